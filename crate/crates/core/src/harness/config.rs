//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::assistant::{AblationMask, GridSpec, Head};
use crate::detector::DetectorKind;
use crate::nn::TrainConfig;
use crate::{Error, Result};

/// Which grid the oracle and the discrete head search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridChoice {
    /// 7×7×7, every other value of the full axis.
    Desk,
    /// 13×13×13.
    Full,
}

/// How assisted parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssistMode {
    Oracle,
    Assistant,
}

/// Grid cache storage mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheChoice {
    Materialized,
    Lazy,
}

macro_rules! keyword_enum {
    ($ty:ty, $name:literal, $($text:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(Error::Config(format!("unknown {} `{other}`", $name))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant {
                    return f.write_str($text);
                })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(GridChoice, "grid", "desk" => GridChoice::Desk, "full" => GridChoice::Full);
keyword_enum!(AssistMode, "assist mode", "oracle" => AssistMode::Oracle, "assistant" => AssistMode::Assistant);
keyword_enum!(CacheChoice, "cache mode", "materialized" => CacheChoice::Materialized, "lazy" => CacheChoice::Lazy);

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($ty:ty),*) => {$(
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$ty>().map_err(|e| Error::Config(format!("`{s}`: {e}")))
            }

            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_from_str!(usize, u32, u64, f64, String, DetectorKind, Head, AblationMask, GridChoice, AssistMode, CacheChoice);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }

    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }

    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

macro_rules! config {
    ($($(#[$doc:meta])* $name:ident : $ty:ty = $default:expr,)*) => {
        /// Every setting of an experiment run. Keys match field names.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), ConfigValue::render(&self.$name)),)*]
            }
        }
    };
}

config! {
    /// Dataset manifest; synthetic covers are used when empty.
    manifest: Option<PathBuf> = None,
    synthetic_count: usize = 200,
    synthetic_seed: u64 = 1,
    /// Width and height of synthetic covers; manifest images must match.
    image_size: usize = 64,
    smoothness: f64 = 0.9,
    split_seed: u64 = 7,
    split_ratio: f64 = 0.9,
    rate: f64 = 0.4,
    embed_seed: u64 = 1000,
    detector_kind: DetectorKind = DetectorKind::ResidualFeatures,
    detector_epochs: usize = 30,
    detector_learning_rate: f64 = 0.01,
    detector_decay: f64 = 0.95,
    detector_batch_size: usize = 16,
    detector_seed: u64 = 11,
    /// Load detector A from here instead of training it.
    detector_checkpoint: Option<PathBuf> = None,
    assistant_head: Head = Head::Continuous,
    assistant_epochs: usize = 5,
    assistant_learning_rate: f64 = 0.001,
    assistant_decay: f64 = 0.95,
    assistant_batch_size: usize = 16,
    assistant_seed: u64 = 13,
    /// Load the assistant from here instead of training it.
    assistant_checkpoint: Option<PathBuf> = None,
    refine_step: f64 = 0.0125,
    grid: GridChoice = GridChoice::Desk,
    ablation: AblationMask = AblationMask::ALL,
    assist_mode: AssistMode = AssistMode::Oracle,
    cache_mode: CacheChoice = CacheChoice::Materialized,
    cache_budget_bytes: u64 = 4_000_000_000,
    /// Where materialized stegos are written; kept in memory when empty.
    cache_dir: Option<PathBuf> = None,
    /// Out-of-distribution dataset; synthetic covers with the transfer
    /// settings below are used when empty.
    transfer_manifest: Option<PathBuf> = None,
    transfer_count: usize = 50,
    transfer_seed: u64 = 90_000,
    transfer_smoothness: f64 = 0.6,
    compare_epochs: usize = 3,
    diff_factor: u32 = 8,
    exemplars: usize = 3,
    output_dir: PathBuf = PathBuf::from("sacnn-out"),
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 3f64.log2()) {
            return Err(Error::Config(format!("rate {} outside (0, log2 3]", self.rate)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio {} outside (0, 1)", self.split_ratio)));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be >= 16".into()));
        }
        if self.manifest.is_none() && self.synthetic_count < 4 {
            return Err(Error::Config("synthetic_count must be >= 4".into()));
        }
        if self.compare_epochs < 3 {
            return Err(Error::Config("compare_epochs must be >= 3".into()));
        }
        if self.diff_factor == 0 {
            return Err(Error::Config("diff_factor must be >= 1".into()));
        }
        self.detector_train_config().validate()?;
        self.assistant_train_config().validate()?;
        Ok(())
    }

    pub fn detector_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.detector_learning_rate,
            decay: self.detector_decay,
            epochs: self.detector_epochs,
            batch_size: self.detector_batch_size,
            seed: self.detector_seed,
            ..TrainConfig::default()
        }
    }

    pub fn assistant_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.assistant_learning_rate,
            decay: self.assistant_decay,
            epochs: self.assistant_epochs,
            batch_size: self.assistant_batch_size,
            seed: self.assistant_seed,
            ..TrainConfig::default()
        }
    }

    /// The search grid with the ablation mask applied.
    pub fn search_grid(&self) -> GridSpec {
        let g = match self.grid {
            GridChoice::Desk => crate::assistant::desk_grid(),
            GridChoice::Full => crate::assistant::default_grid(),
        };
        g.masked(self.ablation)
    }
}
