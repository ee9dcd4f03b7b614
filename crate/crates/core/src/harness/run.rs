//! The experiment protocol: phases share one `Experiment` and run their
//! prerequisites on demand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::assistant::{
    derived_seeds, embedding_seed, oracle_select, precompute_grid, project_storage, train_assistant, AssistantModel,
    AssistantTraining, CacheMode, GridCache, Head, Histogram,
};
use crate::cost::{CostContext, ParameterTriple};
use crate::detector::{train_detector, ConfusionMatrix, DetectorModel};
use crate::embed::{amplify_diff, embed, embed_with_context};
use crate::media_io::{load_entry, split_manifest, DatasetManifest, Image8, SynthSpec};
use crate::{Error, Result};

use super::config::{AssistMode, CacheChoice, ExperimentConfig};
use super::report::{
    emit_report, reference, AssistedFragment, BaselineFragment, ChosenParams, CrossFragment, DiscreteFragment,
    Exemplar, HeadSummary, Report, TransferFragment,
};

pub const DETECTOR_A_FILE: &str = "detector_a.ckpt";
pub const DETECTOR_B_FILE: &str = "detector_b.ckpt";

pub fn assistant_file(head: Head) -> String {
    format!("assistant_{head}.ckpt")
}

/// Loads the covers a manifest (or the synthetic fallback) describes.
fn load_dataset(
    manifest: Option<&Path>,
    synth_count: usize,
    synth_seed: u64,
    size: usize,
    smoothness: f64,
    split_seed: u64,
    split_ratio: f64,
) -> Result<(DatasetManifest, Vec<(String, Image8)>)> {
    let m = match manifest {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            DatasetManifest::parse(&text, p.parent().unwrap_or(Path::new(".")), split_seed, split_ratio)?
        }
        None => DatasetManifest::synthetic(synth_count, synth_seed, split_seed, split_ratio)?,
    };
    let spec = SynthSpec {
        width: size,
        height: size,
        smoothness,
    };
    let covers: Vec<(String, Image8)> = m
        .entries()
        .par_iter()
        .map(|e| Ok((e.id.clone(), load_entry(e, &spec)?)))
        .collect::<Result<_>>()?;
    if let Some((id, c)) = covers.iter().find(|(_, c)| c.dims() != (size, size)) {
        return Err(Error::Config(format!(
            "cover `{id}` is {}x{}, image_size is {size}",
            c.width(),
            c.height()
        )));
    }
    if covers.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok((m, covers))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// State of one experiment run.
pub struct Experiment {
    config: ExperimentConfig,
    ids: Vec<String>,
    covers: Vec<Image8>,
    train: Vec<usize>,
    val: Vec<usize>,
    seeds: Vec<u64>,
    baseline_stegos: Vec<Image8>,
    rounding_loss_bits: f64,
    detector: Option<DetectorModel>,
    detector_b: Option<DetectorModel>,
    assistant: Option<AssistantModel>,
    cache: Option<GridCache>,
    /// Assisted stegos of the validation covers, in `val` order.
    assisted_stegos: Option<Vec<Image8>>,
    val_cover_scores: Option<Vec<f64>>,
    report: Report,
}

impl Experiment {
    /// Loads and splits the dataset and embeds every cover with the default
    /// triple. Cover `i` always embeds with `embedding_seed(embed_seed, i)`.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let started = Instant::now();
        let c = &config;
        let (m, covers) = load_dataset(
            c.manifest.as_deref(),
            c.synthetic_count,
            c.synthetic_seed,
            c.image_size,
            c.smoothness,
            c.split_seed,
            c.split_ratio,
        )?;
        let (train_e, val_e) = split_manifest(&m)?;
        let index_of = |id: &str| covers.iter().position(|(c, _)| c == id).expect("split ids come from the manifest");
        let mut train: Vec<usize> = train_e.iter().map(|e| index_of(&e.id)).collect();
        let mut val: Vec<usize> = val_e.iter().map(|e| index_of(&e.id)).collect();
        train.sort_unstable();
        val.sort_unstable();
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "split of {} covers at ratio {} leaves an empty side",
                covers.len(),
                c.split_ratio
            )));
        }
        let seeds = derived_seeds(c.embed_seed, covers.len());
        let embedded: Vec<(Image8, f64)> = covers
            .par_iter()
            .zip(&seeds)
            .map(|((_, cover), &s)| {
                let (st, stats) = embed_with_context(&CostContext::new(cover)?, &ParameterTriple::DEFAULT, c.rate, s)?;
                Ok((st.pixels, stats.calibrated_bits - stats.rounded_bits))
            })
            .collect::<Result<_>>()?;
        let (baseline_stegos, losses): (Vec<Image8>, Vec<f64>) = embedded.into_iter().unzip();
        let (ids, covers): (Vec<String>, Vec<Image8>) = covers.into_iter().unzip();
        let mut report = Report {
            config_text: config.to_text(),
            diff_factor: config.diff_factor,
            ..Report::default()
        };
        report.timings.push(("prepare".into(), started.elapsed().as_secs_f64()));
        Ok(Self {
            rounding_loss_bits: mean(&losses),
            config,
            ids,
            covers,
            train,
            val,
            seeds,
            baseline_stegos,
            detector: None,
            detector_b: None,
            assistant: None,
            cache: None,
            assisted_stegos: None,
            val_cover_scores: None,
            report,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn cover_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn covers(&self) -> &[Image8] {
        &self.covers
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn embedding_seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn baseline_stegos(&self) -> &[Image8] {
        &self.baseline_stegos
    }

    pub fn assisted_stegos(&self) -> Option<&[Image8]> {
        self.assisted_stegos.as_deref()
    }

    pub fn report(&self) -> &Report {
        &self.report
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn ensure_output_dir(&self) -> Result<()> {
        let d = &self.config.output_dir;
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f(self)?;
        self.report.timings.push((phase.to_string(), started.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn pairs(&self, idx: &[usize]) -> Vec<(Image8, Image8)> {
        idx.iter().map(|&i| (self.covers[i].clone(), self.baseline_stegos[i].clone())).collect()
    }

    fn train_detector_with_seed(&self, seed: u64) -> Result<DetectorModel> {
        let cfg = crate::nn::TrainConfig {
            seed,
            ..self.config.detector_train_config()
        };
        train_detector(&self.pairs(&self.train), self.config.detector_kind, &cfg)
    }

    /// Detector A: loaded from `detector_checkpoint` when set, otherwise
    /// trained on the training pairs and saved to the output directory.
    pub fn detector(&mut self) -> Result<&DetectorModel> {
        if self.detector.is_none() {
            let d = self.time("detector_a", |s| match &s.config.detector_checkpoint {
                Some(p) => DetectorModel::load(p),
                None => {
                    let d = s.train_detector_with_seed(s.config.detector_seed)?;
                    s.ensure_output_dir()?;
                    d.save(&s.output_path(DETECTOR_A_FILE))?;
                    Ok(d)
                }
            })?;
            self.detector = Some(d);
        }
        Ok(self.detector.as_ref().expect("set above"))
    }

    /// Detector B, retrained from a different seed on the same pairs.
    pub fn detector_b(&mut self) -> Result<&DetectorModel> {
        if self.detector_b.is_none() {
            let d = self.time("detector_b", |s| {
                let d = s.train_detector_with_seed(s.config.detector_seed.wrapping_add(1))?;
                s.ensure_output_dir()?;
                d.save(&s.output_path(DETECTOR_B_FILE))?;
                Ok(d)
            })?;
            self.detector_b = Some(d);
        }
        Ok(self.detector_b.as_ref().expect("set above"))
    }

    fn val_cover_scores(&mut self) -> Result<Vec<f64>> {
        if self.val_cover_scores.is_none() {
            let covers: Vec<Image8> = self.val.iter().map(|&i| self.covers[i].clone()).collect();
            let s = self.detector()?.predict_many(&covers)?;
            self.val_cover_scores = Some(s);
        }
        Ok(self.val_cover_scores.clone().expect("set above"))
    }

    /// Grid cache over every cover, scored by detector A.
    pub fn cache(&mut self) -> Result<&GridCache> {
        if self.cache.is_none() {
            self.detector()?;
            let cache = self.time("precompute_grid", |s| {
                let c = &s.config;
                let mode = match c.cache_mode {
                    CacheChoice::Materialized => CacheMode::Materialized {
                        budget_bytes: c.cache_budget_bytes,
                        dir: c.cache_dir.clone(),
                    },
                    CacheChoice::Lazy => CacheMode::Lazy,
                };
                let covers: Vec<(String, Image8)> = s.ids.iter().cloned().zip(s.covers.iter().cloned()).collect();
                precompute_grid(&covers, &s.seeds, &c.search_grid(), c.rate, s.detector.as_ref(), &mode)
            })?;
            self.cache = Some(cache);
        }
        Ok(self.cache.as_ref().expect("set above"))
    }

    fn train_head(&mut self, head: Head, epochs: usize, checkpoint: Option<PathBuf>) -> Result<(AssistantModel, crate::assistant::TrainingHistory)> {
        self.cache()?;
        let det = self.detector.as_ref().expect("cache implies detector");
        let cache = self.cache.as_ref().expect("set above");
        let setup = AssistantTraining {
            detector: det,
            cache,
            covers: &self.covers,
            train: &self.train,
            val: &self.val,
            mask: self.config.ablation,
            refine_step: self.config.refine_step,
            checkpoint_path: checkpoint.as_deref(),
        };
        let cfg = crate::nn::TrainConfig {
            epochs,
            ..self.config.assistant_train_config()
        };
        train_assistant(&setup, head, &cfg)
    }

    /// The configured assistant head: loaded from `assistant_checkpoint` when
    /// set, otherwise trained against detector A.
    pub fn assistant(&mut self) -> Result<&AssistantModel> {
        if self.assistant.is_none() {
            let m = match self.config.assistant_checkpoint.clone() {
                Some(p) => {
                    let mut m = AssistantModel::load(&p)?;
                    if m.input_dims() != self.covers[0].dims() {
                        return Err(Error::Config("assistant checkpoint input size differs from the covers".into()));
                    }
                    m.set_mask(self.config.ablation);
                    m
                }
                None => {
                    self.ensure_output_dir()?;
                    let head = self.config.assistant_head;
                    let path = self.output_path(&assistant_file(head));
                    let epochs = self.config.assistant_epochs;
                    self.time("train_assistant", |s| s.train_head(head, epochs, Some(path)))?.0
                }
            };
            self.assistant = Some(m);
        }
        Ok(self.assistant.as_ref().expect("set above"))
    }

    /// Default-triple stegos of the validation covers against detector A.
    pub fn run_baseline(&mut self) -> Result<&BaselineFragment> {
        if self.report.baseline.is_none() {
            let cover_scores = self.val_cover_scores()?;
            let frag = self.time("baseline", |s| {
                let stegos: Vec<Image8> = s.val.iter().map(|&i| s.baseline_stegos[i].clone()).collect();
                let det = s.detector.as_ref().expect("scored above");
                Ok(BaselineFragment {
                    matrix: ConfusionMatrix::from_scores(&cover_scores, &det.predict_many(&stegos)?),
                    train_pairs: s.train.len(),
                    val_pairs: s.val.len(),
                    rounding_loss_bits: s.rounding_loss_bits,
                })
            })?;
            self.report.baseline = Some(frag);
        }
        Ok(self.report.baseline.as_ref().expect("set above"))
    }

    /// Per-cover parameter selection on the validation covers, by exhaustive
    /// oracle search or by the assistant, evaluated against detector A.
    pub fn run_assisted(&mut self) -> Result<&AssistedFragment> {
        if self.report.assisted.is_none() {
            let base = self.run_baseline()?.matrix;
            let cover_scores = self.val_cover_scores()?;
            let mode = self.config.assist_mode;
            match mode {
                AssistMode::Oracle => {
                    self.cache()?;
                }
                AssistMode::Assistant => {
                    self.assistant()?;
                }
            }
            let frag = self.time("assisted", |s| {
                let det = s.detector.as_ref().expect("prepared above");
                let rate = s.config.rate;
                let val_default: Vec<Image8> = s.val.iter().map(|&i| s.baseline_stegos[i].clone()).collect();
                let default_scores = det.predict_many(&val_default)?;
                let chosen: Vec<(ChosenParams, Image8)> = s
                    .val
                    .par_iter()
                    .map(|&i| {
                        let cover = &s.covers[i];
                        let (params, cell, stego) = match mode {
                            AssistMode::Oracle => {
                                let cache = s.cache.as_ref().expect("built above");
                                let o = cache.oracle(i)?;
                                let st = match o.cell {
                                    Some(c) => cache.stego(i, c, cover)?,
                                    None => s.baseline_stegos[i].clone(),
                                };
                                (o.params, o.cell, st)
                            }
                            AssistMode::Assistant => {
                                let am = s.assistant.as_ref().expect("built above");
                                let (p, cell) = match am.head() {
                                    Head::Continuous => (am.predict_params(cover)?, None),
                                    Head::Discrete => {
                                        let c = am.predict_cell(cover)?;
                                        (am.predict_params(cover)?, Some(c))
                                    }
                                };
                                (p, cell, embed(cover, &p, rate, s.seeds[i])?.pixels)
                            }
                        };
                        let cp = ChosenParams {
                            cover_id: s.ids[i].clone(),
                            params,
                            cell,
                        };
                        Ok((cp, stego))
                    })
                    .collect::<Result<_>>()?;
                let (choices, stegos): (Vec<ChosenParams>, Vec<Image8>) = chosen.into_iter().unzip();
                let scores = det.predict_many(&stegos)?;
                let matrix = ConfusionMatrix::from_scores(&cover_scores, &scores);
                let axis = |a: usize| choices.iter().map(|c| c.params.as_array()[a]).collect::<Vec<_>>();
                let frag = AssistedFragment {
                    mode,
                    matrix,
                    delta_pp: matrix.error_rate_percent()? - base.error_rate_percent()?,
                    mean_score: mean(&scores),
                    mean_default_score: mean(&default_scores),
                    histograms: [0, 1, 2].map(|a| Histogram::from_values(&axis(a))),
                    choices,
                    manifest_csv: match mode {
                        AssistMode::Oracle => Some(s.cache.as_ref().expect("built above").manifest_csv()),
                        AssistMode::Assistant => None,
                    },
                    ablation: s.config.ablation.to_string(),
                };
                s.report.exemplars = s
                    .val
                    .iter()
                    .zip(&stegos)
                    .take(s.config.exemplars)
                    .map(|(&i, st)| {
                        Ok(Exemplar {
                            cover_id: s.ids[i].clone(),
                            cover: s.covers[i].clone(),
                            baseline_diff: amplify_diff(&s.covers[i], &s.baseline_stegos[i], s.config.diff_factor)?,
                            assisted_diff: amplify_diff(&s.covers[i], st, s.config.diff_factor)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                s.assisted_stegos = Some(stegos);
                Ok(frag)
            })?;
            self.report.assisted = Some(frag);
        }
        Ok(self.report.assisted.as_ref().expect("set above"))
    }

    /// Evaluates the assisted stegos against a second, re-seeded detector.
    pub fn run_cross_detector(&mut self) -> Result<&CrossFragment> {
        if self.report.cross.is_none() {
            let base = self.run_baseline()?.matrix;
            let familiar = self.run_assisted()?.delta_pp;
            self.detector_b()?;
            let frag = self.time("cross_detector", |s| {
                let b = s.detector_b.as_ref().expect("trained above");
                let a = s.detector.as_ref().expect("trained above");
                let covers: Vec<Image8> = s.val.iter().map(|&i| s.covers[i].clone()).collect();
                let baseline: Vec<Image8> = s.val.iter().map(|&i| s.baseline_stegos[i].clone()).collect();
                let cover_scores = b.predict_many(&covers)?;
                let assisted = s.assisted_stegos.as_ref().expect("assisted ran above");
                let matrix = ConfusionMatrix::from_scores(&cover_scores, &b.predict_many(assisted)?);
                Ok(CrossFragment {
                    baseline_matrix: ConfusionMatrix::from_scores(&cover_scores, &b.predict_many(&baseline)?),
                    matrix,
                    familiar_delta_pp: familiar,
                    unfamiliar_delta_pp: matrix.error_rate_percent()? - base.error_rate_percent()?,
                    checkpoints_differ: a.to_checkpoint().to_bytes() != b.to_checkpoint().to_bytes(),
                })
            })?;
            self.report.cross = Some(frag);
        }
        Ok(self.report.cross.as_ref().expect("set above"))
    }

    /// Baseline and assisted embedding on an unseen dataset with frozen models.
    pub fn run_transfer(&mut self) -> Result<&TransferFragment> {
        if self.report.transfer.is_none() {
            self.detector()?;
            if self.config.assist_mode == AssistMode::Assistant {
                self.assistant()?;
            }
            let frag = self.time("transfer", |s| {
                let c = &s.config;
                let (_, covers) = load_dataset(
                    c.transfer_manifest.as_deref(),
                    c.transfer_count,
                    c.transfer_seed,
                    c.image_size,
                    c.transfer_smoothness,
                    c.split_seed,
                    c.split_ratio,
                )?;
                let det = s.detector.as_ref().expect("loaded above");
                let seeds = derived_seeds(c.transfer_seed, covers.len());
                let grid = c.search_grid();
                let stegos: Vec<(Image8, Image8)> = covers
                    .par_iter()
                    .zip(&seeds)
                    .map(|((_, cover), &seed)| {
                        let ctx = CostContext::new(cover)?;
                        let base = embed_with_context(&ctx, &ParameterTriple::DEFAULT, c.rate, seed)?.0.pixels;
                        let p = match c.assist_mode {
                            AssistMode::Oracle => oracle_select(cover, det, &grid, c.rate, seed)?.params,
                            AssistMode::Assistant => s.assistant.as_ref().expect("loaded above").predict_params(cover)?,
                        };
                        let assisted = embed_with_context(&ctx, &p, c.rate, seed)?.0.pixels;
                        Ok((base, assisted))
                    })
                    .collect::<Result<_>>()?;
                let imgs: Vec<Image8> = covers.iter().map(|(_, c)| c.clone()).collect();
                let (base, assisted): (Vec<Image8>, Vec<Image8>) = stegos.into_iter().unzip();
                let cover_scores = det.predict_many(&imgs)?;
                let baseline_matrix = ConfusionMatrix::from_scores(&cover_scores, &det.predict_many(&base)?);
                let assisted_matrix = ConfusionMatrix::from_scores(&cover_scores, &det.predict_many(&assisted)?);
                Ok(TransferFragment {
                    dataset: match &c.transfer_manifest {
                        Some(p) => p.display().to_string(),
                        None => format!("synthetic(seed={}, smoothness={})", c.transfer_seed, c.transfer_smoothness),
                    },
                    out_of_distribution: true,
                    covers: covers.len(),
                    delta_pp: assisted_matrix.error_rate_percent()? - baseline_matrix.error_rate_percent()?,
                    baseline_matrix,
                    assisted_matrix,
                })
            })?;
            self.report.transfer = Some(frag);
        }
        Ok(self.report.transfer.as_ref().expect("set above"))
    }

    /// Trains both heads for `compare_epochs` epochs on the shared cache and
    /// compares storage, epoch time and validation error.
    pub fn run_discrete_comparison(&mut self) -> Result<&DiscreteFragment> {
        if self.report.discrete.is_none() {
            self.cache()?;
            let epochs = self.config.compare_epochs;
            let frag = self.time("compare_heads", |s| {
                let storage = s.cache.as_ref().expect("built above").storage();
                let materialized = s.cache.as_ref().expect("built above").is_materialized();
                let mut summaries = Vec::new();
                for head in [Head::Continuous, Head::Discrete] {
                    let (_, h) = s.train_head(head, epochs, None)?;
                    let (mean_seconds, std_seconds) = h.epoch_time_stats();
                    summaries.push(HeadSummary {
                        epochs: h.epochs.len(),
                        epoch_seconds: h.epochs.iter().map(|e| e.seconds).collect(),
                        mean_seconds,
                        std_seconds,
                        best_epoch: h.best_epoch,
                        val_matrix: h.best().val_matrix,
                        storage_bytes: match head {
                            Head::Continuous => storage.cover_bytes,
                            Head::Discrete => storage.materialized_bytes,
                        },
                    });
                }
                let discrete = summaries.pop().expect("two heads");
                let continuous = summaries.pop().expect("two heads");
                let (fc, fcells, side) = reference::FULL_SCALE;
                Ok(DiscreteFragment {
                    continuous,
                    discrete,
                    storage,
                    materialized,
                    full_scale_bytes: project_storage(fc, fcells, side, side),
                })
            })?;
            self.report.discrete = Some(frag);
        }
        Ok(self.report.discrete.as_ref().expect("set above"))
    }

    /// Runs every phase.
    pub fn run_all(&mut self) -> Result<&Report> {
        self.run_baseline()?;
        self.run_assisted()?;
        self.run_cross_detector()?;
        self.run_transfer()?;
        self.run_discrete_comparison()?;
        Ok(&self.report)
    }

    /// Writes the report into the output directory.
    pub fn emit_report(&self) -> Result<Vec<PathBuf>> {
        emit_report(&self.report, &self.config.output_dir)
    }
}

/// Embedding seed of cover `i` under `config`.
pub fn cover_seed(config: &ExperimentConfig, i: usize) -> u64 {
    embedding_seed(config.embed_seed, i)
}
