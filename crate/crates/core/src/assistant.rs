//! The parameter-assistant CNN, the multiplier grid, oracle grid search and
//! the grid precompute cache.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost::{CostContext, ParameterTriple};
use crate::detector::{batches, ConfusionMatrix, DetectorModel};
use crate::embed::{embed_with_context, round_probs, simulate_embedding, solve_lambda, StegoImage};
use crate::media_io::{load_pgm, pgm_encoded_len, save_pgm, Image8};
use crate::nn::{adam_step, loss, AdamState, Checkpoint, LayerKind, Mode, Model, Tensor, TrainConfig};
use crate::{Error, Result};

/// The 13 multiplier values used on every axis of the full grid.
pub const GRID_AXIS_VALUES: [f64; 13] = [
    1.3, 1.325, 1.35, 1.3625, 1.375, 1.3875, 1.4, 1.4125, 1.425, 1.4375, 1.45, 1.475, 1.5,
];

/// Reference storage of the full-scale discrete precompute, in bytes.
pub const REFERENCE_DISCRETE_STORAGE_BYTES: f64 = 2.8e12;
/// Reference storage of the full-scale continuous setup (covers only), in bytes.
pub const REFERENCE_CONTINUOUS_STORAGE_BYTES: f64 = 704e6;

/// Per-cover embedding seed derived from a run-level base seed.
pub fn embedding_seed(base: u64, cover_index: usize) -> u64 {
    base ^ (cover_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Candidate values for each multiplier axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    sigma_values: Vec<f64>,
    epsilon_values: Vec<f64>,
    wetcost_values: Vec<f64>,
}

impl GridSpec {
    pub fn new(sigma_values: Vec<f64>, epsilon_values: Vec<f64>, wetcost_values: Vec<f64>) -> Result<Self> {
        for (name, axis) in [
            ("sigma_values", &sigma_values),
            ("epsilon_values", &epsilon_values),
            ("wetcost_values", &wetcost_values),
        ] {
            if axis.is_empty() {
                return Err(Error::param(name, "axis must be non-empty"));
            }
            if axis.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::param(name, "values must be finite and > 0"));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::param(name, "values must be strictly increasing"));
            }
        }
        Ok(Self {
            sigma_values,
            epsilon_values,
            wetcost_values,
        })
    }

    pub fn sigma_values(&self) -> &[f64] {
        &self.sigma_values
    }

    pub fn epsilon_values(&self) -> &[f64] {
        &self.epsilon_values
    }

    pub fn wetcost_values(&self) -> &[f64] {
        &self.wetcost_values
    }

    pub fn axes(&self) -> [&[f64]; 3] {
        [&self.sigma_values, &self.epsilon_values, &self.wetcost_values]
    }

    pub fn cell_count(&self) -> usize {
        self.sigma_values.len() * self.epsilon_values.len() * self.wetcost_values.len()
    }

    /// Cell index of axis positions; σ varies slowest, wet cost fastest.
    pub fn index_of(&self, si: usize, ei: usize, wi: usize) -> usize {
        (si * self.epsilon_values.len() + ei) * self.wetcost_values.len() + wi
    }

    pub fn positions(&self, cell: usize) -> (usize, usize, usize) {
        let nw = self.wetcost_values.len();
        let ne = self.epsilon_values.len();
        (cell / (ne * nw), (cell / nw) % ne, cell % nw)
    }

    pub fn cell(&self, index: usize) -> Result<ParameterTriple> {
        if index >= self.cell_count() {
            return Err(Error::param("cell_index", format!("{index} >= {}", self.cell_count())));
        }
        let (si, ei, wi) = self.positions(index);
        ParameterTriple::new(self.sigma_values[si], self.epsilon_values[ei], self.wetcost_values[wi])
    }

    /// Index of the cell equal to `p`, if any.
    pub fn find(&self, p: &ParameterTriple) -> Option<usize> {
        let pos = |axis: &[f64], v: f64| axis.iter().position(|&a| a == v);
        Some(self.index_of(
            pos(&self.sigma_values, p.sigma_mult)?,
            pos(&self.epsilon_values, p.epsilon_mult)?,
            pos(&self.wetcost_values, p.wetcost_mult)?,
        ))
    }

    /// Keeps every `step`-th value of each axis, always including the last.
    pub fn subsample(&self, step: usize) -> Result<Self> {
        let step = step.max(1);
        let pick = |axis: &[f64]| -> Vec<f64> {
            let mut v: Vec<f64> = axis.iter().step_by(step).copied().collect();
            if v.last() != axis.last() {
                v.push(*axis.last().unwrap());
            }
            v
        };
        Self::new(pick(&self.sigma_values), pick(&self.epsilon_values), pick(&self.wetcost_values))
    }

    /// Collapses axes excluded by `mask` to the single value 1.
    pub fn masked(&self, mask: AblationMask) -> Self {
        let keep = |on: bool, axis: &[f64]| if on { axis.to_vec() } else { vec![1.0] };
        Self {
            sigma_values: keep(mask.sigma, &self.sigma_values),
            epsilon_values: keep(mask.epsilon, &self.epsilon_values),
            wetcost_values: keep(mask.wetcost, &self.wetcost_values),
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = vec![
            self.sigma_values.len() as f64,
            self.epsilon_values.len() as f64,
            self.wetcost_values.len() as f64,
        ];
        v.extend(self.sigma_values.iter().chain(&self.epsilon_values).chain(&self.wetcost_values));
        v
    }

    fn from_flat(v: &[f64]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed grid metadata".into());
        if v.len() < 3 {
            return Err(bad());
        }
        let (a, b, c) = (v[0] as usize, v[1] as usize, v[2] as usize);
        if v.len() != 3 + a + b + c {
            return Err(bad());
        }
        Self::new(v[3..3 + a].to_vec(), v[3 + a..3 + a + b].to_vec(), v[3 + a + b..].to_vec())
    }
}

/// The full 13×13×13 grid.
pub fn default_grid() -> GridSpec {
    let v = GRID_AXIS_VALUES.to_vec();
    GridSpec::new(v.clone(), v.clone(), v).expect("static grid is valid")
}

/// The 7×7×7 desk-scale grid (every other value of the full axis).
pub fn desk_grid() -> GridSpec {
    default_grid().subsample(2).expect("static grid is valid")
}

/// Which multipliers the assistant may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationMask {
    pub sigma: bool,
    pub epsilon: bool,
    pub wetcost: bool,
}

impl AblationMask {
    pub const ALL: Self = Self {
        sigma: true,
        epsilon: true,
        wetcost: true,
    };
    pub const SIGMA_ONLY: Self = Self {
        sigma: true,
        epsilon: false,
        wetcost: false,
    };

    pub fn flags(&self) -> [bool; 3] {
        [self.sigma, self.epsilon, self.wetcost]
    }

    /// Replaces disabled multipliers by 1.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let f = self.flags();
        [0, 1, 2].map(|i| if f[i] { p[i] } else { 1.0 })
    }
}

impl fmt::Display for AblationMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = ["sigma", "epsilon", "wetcost"]
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl std::str::FromStr for AblationMask {
    type Err = Error;

    /// Comma-separated subset of `sigma`, `epsilon`, `wetcost`, or `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::ALL);
        }
        let mut m = Self {
            sigma: false,
            epsilon: false,
            wetcost: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "sigma" => m.sigma = true,
                "epsilon" => m.epsilon = true,
                "wetcost" | "wet" => m.wetcost = true,
                other => return Err(Error::param("ablation_mask", format!("unknown axis `{other}`"))),
            }
        }
        if m.flags() == [false; 3] {
            return Err(Error::param("ablation_mask", "at least one axis must be enabled"));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    /// Three softplus multipliers.
    Continuous,
    /// Softmax over grid cells.
    Discrete,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Continuous => "continuous",
            Head::Discrete => "discrete",
        })
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Head::Continuous),
            "discrete" => Ok(Head::Discrete),
            other => Err(Error::param("head", format!("unknown head `{other}`"))),
        }
    }
}

fn conv_out(size: usize, kernel: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / 2 + 1
}

/// Backbone and head layer list for `width`×`height` single-channel input.
pub fn sa_cnn_layers(head: Head, outputs: usize, width: usize, height: usize) -> Vec<LayerKind> {
    let mut layers = Vec::new();
    let (mut h, mut w, mut cin) = (height, width, 1);
    for (cout, k) in [(8, 5), (16, 3), (32, 3)] {
        layers.push(LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: 2,
            bias: false,
        });
        layers.push(LayerKind::BatchNorm { features: cout });
        layers.push(LayerKind::Relu);
        h = conv_out(h, k);
        w = conv_out(w, k);
        cin = cout;
    }
    layers.push(LayerKind::Flatten);
    let mut inputs = cin * h * w;
    for (width, rate) in [(256, 0.4), (64, 0.6), (16, 0.8)] {
        layers.push(LayerKind::Dense { inputs, outputs: width });
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::Dropout { rate });
        inputs = width;
    }
    layers.push(LayerKind::Dense { inputs, outputs });
    layers.push(match head {
        Head::Continuous => LayerKind::Softplus,
        Head::Discrete => LayerKind::Softmax,
    });
    layers
}

/// Softplus inverse.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// The assistant network with its head configuration.
#[derive(Debug, Clone)]
pub struct AssistantModel {
    head: Head,
    grid: Option<GridSpec>,
    mask: AblationMask,
    width: usize,
    height: usize,
    model: Model,
    trained: bool,
}

/// Builds an initialized (untrained) assistant for `width`×`height` covers.
/// The continuous head's output bias starts at the midpoint of `grid` (or 1
/// without a grid) so initial multipliers are sensible.
pub fn build_sa_cnn(head: Head, grid: Option<&GridSpec>, width: usize, height: usize, seed: u64) -> Result<AssistantModel> {
    if width < 8 || height < 8 {
        return Err(Error::Dimensions {
            width,
            height,
            reason: "assistant input must be at least 8x8",
        });
    }
    let outputs = match head {
        Head::Continuous => 3,
        Head::Discrete => grid.ok_or(Error::Missing("discrete head needs a grid"))?.cell_count(),
    };
    let mut model = Model::seeded(sa_cnn_layers(head, outputs, width, height), seed)?;
    if head == Head::Continuous {
        let start: Vec<f64> = match grid {
            Some(g) => g.axes().iter().map(|a| (a[0] + a[a.len() - 1]) / 2.0).collect(),
            None => vec![1.0; 3],
        };
        let n = model.layers().len();
        let bias = &mut model.layers_mut()[n - 2].params_mut()[1].value;
        for (b, s) in bias.data_mut().iter_mut().zip(start) {
            *b = softplus_inv(s);
        }
    }
    Ok(AssistantModel {
        head,
        grid: grid.cloned(),
        mask: AblationMask::ALL,
        width,
        height,
        model,
        trained: false,
    })
}

/// Cover pixels scaled to [-1, 1] as a `[1, H, W]` tensor.
pub fn cover_tensor(img: &Image8) -> Tensor {
    let d = img.pixels().iter().map(|&p| (f64::from(p) - 127.5) / 127.5).collect();
    Tensor::new(vec![1, img.height(), img.width()], d).expect("shape matches pixel count")
}

impl AssistantModel {
    pub fn head(&self) -> Head {
        self.head
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.grid.as_ref()
    }

    pub fn mask(&self) -> AblationMask {
        self.mask
    }

    pub fn set_mask(&mut self, mask: AblationMask) {
        self.mask = mask;
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks a model as usable for prediction without training it.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn check_input(&self, img: &Image8) -> Result<()> {
        if img.dims() != (self.width, self.height) {
            return Err(Error::DimensionMismatch {
                left: (self.width, self.height),
                right: img.dims(),
            });
        }
        Ok(())
    }

    /// Raw network outputs (multipliers or cell probabilities) in eval mode.
    pub fn outputs(&self, img: &Image8) -> Result<Vec<f64>> {
        self.check_input(img)?;
        let x = cover_tensor(img).reshape(&[1, 1, self.height, self.width])?;
        Ok(self.model.infer(&x)?.into_data())
    }

    pub fn predict_params(&self, img: &Image8) -> Result<ParameterTriple> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let out = self.outputs(img)?;
        match self.head {
            Head::Continuous => ParameterTriple::from_array(self.mask.apply([out[0], out[1], out[2]])),
            Head::Discrete => self.grid.as_ref().ok_or(Error::Missing("discrete head grid"))?.cell(argmax(&out)),
        }
    }

    /// Predicted cell for a discrete head.
    pub fn predict_cell(&self, img: &Image8) -> Result<usize> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if self.head != Head::Discrete {
            return Err(Error::param("head", "cell prediction needs the discrete head"));
        }
        Ok(argmax(&self.outputs(img)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(format!("assistant:{}", self.head), self.model.clone())
            .with_metadata("input_dims", vec![self.width as f64, self.height as f64])
            .with_metadata("mask", self.mask.flags().map(|b| b as u8 as f64).to_vec());
        if let Some(g) = &self.grid {
            ck = ck.with_metadata("grid", g.flat());
        }
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let head: Head = ck
            .tag
            .strip_prefix("assistant:")
            .ok_or_else(|| Error::Checkpoint(format!("not an assistant checkpoint: `{}`", ck.tag)))?
            .parse()?;
        let dims = ck
            .metadata("input_dims")
            .filter(|d| d.len() == 2)
            .ok_or_else(|| Error::Checkpoint("missing input dimensions".into()))?;
        let (width, height) = (dims[0] as usize, dims[1] as usize);
        let grid = ck.metadata("grid").map(GridSpec::from_flat).transpose()?;
        let mask = match ck.metadata("mask") {
            Some([s, e, w]) => AblationMask {
                sigma: *s != 0.0,
                epsilon: *e != 0.0,
                wetcost: *w != 0.0,
            },
            _ => AblationMask::ALL,
        };
        let outputs = match head {
            Head::Continuous => 3,
            Head::Discrete => grid.as_ref().ok_or(Error::Missing("discrete head grid"))?.cell_count(),
        };
        ck.expect_architecture(&sa_cnn_layers(head, outputs, width, height))?;
        Ok(Self {
            head,
            grid,
            mask,
            width,
            height,
            model: ck.model,
            trained: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Every cell's stego for one cover. Cells sharing (σ, wet cost) share one
/// cost map and λ calibration; only ε rounding and simulation repeat. The
/// result equals `embed(cover, cell, rate, seed)` for each cell.
fn grid_stegos(ctx: &CostContext, grid: &GridSpec, rate_bpp: f64, seed: u64, mut visit: impl FnMut(usize, StegoImage) -> Result<()>) -> Result<()> {
    let cover = ctx.cover();
    for (si, &s) in grid.sigma_values().iter().enumerate() {
        for (wi, &w) in grid.wetcost_values().iter().enumerate() {
            let costs = ctx.cost_map(&ParameterTriple::new(s, 1.0, w)?)?;
            let calibrated = solve_lambda(&costs, rate_bpp * costs.len() as f64)?;
            for (ei, &e) in grid.epsilon_values().iter().enumerate() {
                let rounded = round_probs(&calibrated, e)?;
                let mut stego = simulate_embedding(cover, &rounded, seed)?;
                stego.params = ParameterTriple::new(s, e, w)?;
                visit(grid.index_of(si, ei, wi), stego)?;
            }
        }
    }
    Ok(())
}

/// Scores every cell with the detector, reusing the previous score when
/// consecutive stegos are identical.
fn score_grid(ctx: &CostContext, grid: &GridSpec, detector: &DetectorModel, rate_bpp: f64, seed: u64) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; grid.cell_count()];
    let mut last: Option<(Image8, f64)> = None;
    grid_stegos(ctx, grid, rate_bpp, seed, |cell, st| {
        let score = match &last {
            Some((img, sc)) if *img == st.pixels => *sc,
            _ => detector.predict(&st.pixels)?,
        };
        scores[cell] = score;
        last = Some((st.pixels, score));
        Ok(())
    })?;
    Ok(scores)
}

/// Result of the exhaustive per-cover search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleChoice {
    pub params: ParameterTriple,
    /// `None` when the default triple won.
    pub cell: Option<usize>,
    pub score: f64,
    pub default_score: f64,
}

/// Argmin over `cell_scores` then the default triple; ties keep the lowest
/// cell index and the default triple only wins when strictly better.
pub fn oracle_from_scores(grid: &GridSpec, cell_scores: &[f64], default_score: f64) -> Result<OracleChoice> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in cell_scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    Ok(match best {
        Some((i, s)) if s <= default_score => OracleChoice {
            params: grid.cell(i)?,
            cell: Some(i),
            score: s,
            default_score,
        },
        _ => OracleChoice {
            params: ParameterTriple::DEFAULT,
            cell: None,
            score: default_score,
            default_score,
        },
    })
}

/// Embeds `cover` under every grid cell and the default triple with the same
/// seed and returns the triple the detector finds least suspicious.
pub fn oracle_select(cover: &Image8, detector: &DetectorModel, grid: &GridSpec, rate_bpp: f64, seed: u64) -> Result<OracleChoice> {
    let ctx = CostContext::new(cover)?;
    let scores = score_grid(&ctx, grid, detector, rate_bpp, seed)?;
    let default = embed_with_context(&ctx, &ParameterTriple::DEFAULT, rate_bpp, seed)?.0;
    oracle_from_scores(grid, &scores, detector.predict(&default.pixels)?)
}

/// How precomputed stegos are kept.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheMode {
    /// Stores every stego, in memory or as PGM files under `dir`.
    Materialized { budget_bytes: u64, dir: Option<PathBuf> },
    /// Stores only the regeneration recipe (cover, cell, seed).
    Lazy,
}

#[derive(Debug, Clone, PartialEq)]
enum Artifact {
    None,
    Memory(Image8),
    File(PathBuf),
}

/// One (cover, cell) record.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub cell_index: usize,
    pub params: ParameterTriple,
    pub seed: u64,
    pub score: Option<f64>,
    artifact: Artifact,
}

impl CacheEntry {
    pub fn artifact_path(&self) -> Option<&Path> {
        match &self.artifact {
            Artifact::File(p) => Some(p),
            _ => None,
        }
    }
}

/// Exact storage figures for a cache and projections to other scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    pub covers: usize,
    pub cells: usize,
    /// Encoded PGM size of one stego (header included).
    pub artifact_bytes: u64,
    /// Σ artifact bytes actually stored (0 in lazy mode).
    pub stored_bytes: u64,
    /// Σ artifact bytes a materialized cache of this size needs.
    pub materialized_bytes: u64,
    /// Cover set size (what a continuous-head run stores).
    pub cover_bytes: u64,
}

/// Bytes needed to materialize `cells` stegos of every one of `covers`
/// `width`×`height` covers as binary PGM.
pub fn project_storage(covers: u64, cells: u64, width: usize, height: usize) -> u64 {
    covers * cells * pgm_encoded_len(width, height) as u64
}

/// Precomputed stegos and detector scores for every (cover, cell).
#[derive(Debug, Clone)]
pub struct GridCache {
    grid: GridSpec,
    rate_bpp: f64,
    materialized: bool,
    cover_ids: Vec<String>,
    dims: (usize, usize),
    entries: Vec<Vec<CacheEntry>>,
    default_scores: Vec<Option<f64>>,
    stored_bytes: u64,
}

pub const GRID_MANIFEST_HEADER: &str = "cover_id,cell_index,sigma,epsilon,wetcost,seed,detector_score,artifact_path";

/// `embedding_seed(base, i)` for `i` in `0..n`.
pub fn derived_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| embedding_seed(base, i)).collect()
}

/// Embeds every cover under every cell, cover `i` with `seeds[i]` for all of
/// its cells. With a detector, each stego (and the default-triple stego) is
/// scored.
pub fn precompute_grid(
    covers: &[(String, Image8)],
    seeds: &[u64],
    grid: &GridSpec,
    rate_bpp: f64,
    detector: Option<&DetectorModel>,
    mode: &CacheMode,
) -> Result<GridCache> {
    let first = covers.first().ok_or(Error::Empty("no covers to precompute"))?;
    if seeds.len() != covers.len() {
        return Err(Error::param("seeds", "one embedding seed per cover required"));
    }
    let dims = first.1.dims();
    if let Some((id, _)) = covers.iter().find(|(_, c)| c.dims() != dims) {
        return Err(Error::param("covers", format!("cover `{id}` differs in size from the first cover")));
    }
    let projected = project_storage(covers.len() as u64, grid.cell_count() as u64, dims.0, dims.1);
    let (materialized, dir) = match mode {
        CacheMode::Materialized { budget_bytes, dir } => {
            if projected > *budget_bytes {
                return Err(Error::InsufficientStorage {
                    projected_bytes: projected,
                    budget_bytes: *budget_bytes,
                });
            }
            if let Some(d) = dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            (true, dir.as_deref())
        }
        CacheMode::Lazy => (false, None),
    };
    let rows: Vec<(Vec<CacheEntry>, Option<f64>)> = covers
        .par_iter()
        .enumerate()
        .map(|(i, (id, cover))| {
            let s = seeds[i];
            let ctx = CostContext::new(cover)?;
            let mut row = Vec::with_capacity(grid.cell_count());
            let mut last: Option<(Image8, f64)> = None;
            grid_stegos(&ctx, grid, rate_bpp, s, |cell, st| {
                let score = match detector {
                    Some(d) => Some(match &last {
                        Some((img, sc)) if *img == st.pixels => *sc,
                        _ => d.predict(&st.pixels)?,
                    }),
                    None => None,
                };
                let artifact = match (materialized, dir) {
                    (false, _) => Artifact::None,
                    (true, None) => Artifact::Memory(st.pixels.clone()),
                    (true, Some(d)) => {
                        let path = d.join(format!("{id}_{cell:05}.pgm"));
                        save_pgm(&path, &st.pixels)?;
                        Artifact::File(path)
                    }
                };
                if let Some(sc) = score {
                    last = Some((st.pixels.clone(), sc));
                }
                row.push(CacheEntry {
                    cell_index: cell,
                    params: st.params,
                    seed: s,
                    score,
                    artifact,
                });
                Ok(())
            })?;
            row.sort_by_key(|e| e.cell_index);
            let default_score = match detector {
                Some(d) => Some(d.predict(&embed_with_context(&ctx, &ParameterTriple::DEFAULT, rate_bpp, s)?.0.pixels)?),
                None => None,
            };
            Ok((row, default_score))
        })
        .collect::<Result<_>>()?;
    let (entries, default_scores) = rows.into_iter().unzip();
    Ok(GridCache {
        grid: grid.clone(),
        rate_bpp,
        materialized,
        cover_ids: covers.iter().map(|(id, _)| id.clone()).collect(),
        dims,
        entries,
        default_scores,
        stored_bytes: if materialized { projected } else { 0 },
    })
}

impl GridCache {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn rate_bpp(&self) -> f64 {
        self.rate_bpp
    }

    /// Embedding seed shared by all cells of `cover`.
    pub fn seed(&self, cover: usize) -> Result<u64> {
        Ok(self.entry(cover, 0)?.seed)
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    pub fn cover_ids(&self) -> &[String] {
        &self.cover_ids
    }

    pub fn cover_count(&self) -> usize {
        self.cover_ids.len()
    }

    pub fn entry(&self, cover: usize, cell: usize) -> Result<&CacheEntry> {
        self.entries
            .get(cover)
            .and_then(|r| r.get(cell))
            .ok_or_else(|| Error::param("cache index", format!("no entry for cover {cover}, cell {cell}")))
    }

    pub fn score(&self, cover: usize, cell: usize) -> Result<f64> {
        self.entry(cover, cell)?
            .score
            .ok_or(Error::Missing("detector scores (precompute with a detector)"))
    }

    pub fn cell_scores(&self, cover: usize) -> Result<Vec<f64>> {
        (0..self.grid.cell_count()).map(|c| self.score(cover, c)).collect()
    }

    pub fn default_score(&self, cover: usize) -> Result<f64> {
        self.default_scores
            .get(cover)
            .copied()
            .flatten()
            .ok_or(Error::Missing("detector scores (precompute with a detector)"))
    }

    pub fn oracle(&self, cover: usize) -> Result<OracleChoice> {
        oracle_from_scores(&self.grid, &self.cell_scores(cover)?, self.default_score(cover)?)
    }

    /// Lowest-scoring grid cell (ties to the lowest index); the label for
    /// discrete training.
    pub fn best_cell(&self, cover: usize) -> Result<usize> {
        let scores = self.cell_scores(cover)?;
        Ok(oracle_from_scores(&self.grid, &scores, f64::INFINITY)?
            .cell
            .expect("finite scores beat the infinite default"))
    }

    /// Re-embeds an entry from its recipe.
    pub fn regenerate(&self, cover_index: usize, cell: usize, cover: &Image8) -> Result<Image8> {
        let e = self.entry(cover_index, cell)?;
        Ok(crate::embed::embed(cover, &e.params, self.rate_bpp, e.seed)?.pixels)
    }

    /// The stored stego when materialized, otherwise a regeneration.
    pub fn stego(&self, cover_index: usize, cell: usize, cover: &Image8) -> Result<Image8> {
        match &self.entry(cover_index, cell)?.artifact {
            Artifact::Memory(img) => Ok(img.clone()),
            Artifact::File(p) => load_pgm(p),
            Artifact::None => self.regenerate(cover_index, cell, cover),
        }
    }

    /// Score of an entry: stored when materialized, recomputed otherwise.
    pub fn lookup_score(&self, cover_index: usize, cell: usize, cover: &Image8, detector: &DetectorModel) -> Result<f64> {
        match (self.materialized, self.entry(cover_index, cell)?.score) {
            (true, Some(s)) => Ok(s),
            _ => detector.predict(&self.stego(cover_index, cell, cover)?),
        }
    }

    pub fn storage(&self) -> StorageReport {
        let (w, h) = self.dims;
        StorageReport {
            covers: self.cover_count(),
            cells: self.grid.cell_count(),
            artifact_bytes: pgm_encoded_len(w, h) as u64,
            stored_bytes: self.stored_bytes,
            materialized_bytes: project_storage(self.cover_count() as u64, self.grid.cell_count() as u64, w, h),
            cover_bytes: self.cover_count() as u64 * pgm_encoded_len(w, h) as u64,
        }
    }

    /// Manifest CSV, one row per (cover, cell), in cover then cell order.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from(GRID_MANIFEST_HEADER);
        out.push('\n');
        for (id, row) in self.cover_ids.iter().zip(&self.entries) {
            for e in row {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    id,
                    e.cell_index,
                    e.params.sigma_mult,
                    e.params.epsilon_mult,
                    e.params.wetcost_mult,
                    e.seed,
                    e.score.map(|s| s.to_string()).unwrap_or_default(),
                    e.artifact_path().map(|p| p.display().to_string()).unwrap_or_default()
                ));
            }
        }
        out
    }
}

/// Settings shared by both heads' training loops.
#[derive(Debug, Clone)]
pub struct AssistantTraining<'a> {
    pub detector: &'a DetectorModel,
    pub cache: &'a GridCache,
    /// Covers in cache order.
    pub covers: &'a [Image8],
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub mask: AblationMask,
    /// Coordinate-search step for continuous targets; 0 disables refinement.
    pub refine_step: f64,
    /// Written whenever validation detector error reaches a new high.
    pub checkpoint_path: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Detector error on the validation covers and their assisted stegos.
    pub val_error_percent: f64,
    pub val_matrix: ConfusionMatrix,
    pub seconds: f64,
    pub checkpointed: bool,
    /// Continuous targets improved by this epoch's refinement sweep.
    pub refined: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub head: Head,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// Mean and sample standard deviation of per-epoch wall-clock seconds.
    pub fn epoch_time_stats(&self) -> (f64, f64) {
        mean_std(&self.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>())
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains an assistant head against the frozen detector.
///
/// Discrete: cross-entropy against each training cover's best cache cell;
/// validation stegos come from the cache. Continuous: smooth-L1 regression
/// onto per-cover targets that start at the oracle triple and are refined
/// every epoch by a ±`refine_step` coordinate search on the enabled axes;
/// validation re-embeds with the predicted triples. The returned model is the
/// epoch with the highest validation detector error.
pub fn train_assistant(setup: &AssistantTraining<'_>, head: Head, config: &TrainConfig) -> Result<(AssistantModel, TrainingHistory)> {
    config.validate()?;
    if setup.train.is_empty() || setup.val.is_empty() {
        return Err(Error::Empty("assistant training and validation splits"));
    }
    if setup.covers.len() != setup.cache.cover_count() {
        return Err(Error::param("covers", "cover list must match the grid cache"));
    }
    if config.epochs == 0 {
        return Err(Error::param("epochs", "must be >= 1"));
    }
    let grid = setup.cache.grid();
    let (w, h) = setup.covers[0].dims();
    let mut am = build_sa_cnn(head, Some(grid), w, h, config.seed)?;
    am.mask = setup.mask;
    let rate = setup.cache.rate_bpp();
    let seed_of = |i: usize| setup.cache.seed(i);

    let inputs: Vec<Tensor> = setup.covers.iter().map(cover_tensor).collect();
    let val_covers: Vec<Image8> = setup.val.iter().map(|&i| setup.covers[i].clone()).collect();
    let val_cover_scores = setup.detector.predict_many(&val_covers)?;

    let labels: Vec<usize> = match head {
        Head::Discrete => setup.train.iter().map(|&i| setup.cache.best_cell(i)).collect::<Result<_>>()?,
        Head::Continuous => Vec::new(),
    };
    let mut targets: Vec<([f64; 3], f64)> = match head {
        Head::Continuous => setup
            .train
            .iter()
            .map(|&i| {
                let o = setup.cache.oracle(i)?;
                Ok((setup.mask.apply(o.params.as_array()), o.score))
            })
            .collect::<Result<_>>()?,
        Head::Discrete => Vec::new(),
    };
    let contexts: Vec<Option<CostContext>> = match head {
        Head::Continuous => setup.covers.par_iter().map(|c| CostContext::new(c).map(Some)).collect::<Result<_>>()?,
        Head::Discrete => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA551_57A7);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..setup.train.len()).collect();
    let mut history = TrainingHistory {
        head,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, AssistantModel)> = None;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut refined = 0;
        if head == Head::Continuous && setup.refine_step > 0.0 {
            let flags = setup.mask.flags();
            let updates: Vec<Option<([f64; 3], f64)>> = setup
                .train
                .par_iter()
                .zip(&targets)
                .map(|(&ci, &(t, score))| {
                    let ctx = contexts[ci].as_ref().expect("continuous contexts");
                    let s = seed_of(ci)?;
                    let (mut cur, mut cur_score) = (t, score);
                    let mut improved = false;
                    for axis in (0..3).filter(|&a| flags[a]) {
                        for dir in [1.0, -1.0] {
                            let mut cand = cur;
                            cand[axis] = (cand[axis] + dir * setup.refine_step).max(setup.refine_step);
                            let p = ParameterTriple::from_array(cand)?;
                            let st = embed_with_context(ctx, &p, rate, s)?.0;
                            let sc = setup.detector.predict(&st.pixels)?;
                            if sc < cur_score {
                                cur = cand;
                                cur_score = sc;
                                improved = true;
                            }
                        }
                    }
                    Ok(improved.then_some((cur, cur_score)))
                })
                .collect::<Result<_>>()?;
            for (t, u) in targets.iter_mut().zip(updates) {
                if let Some(u) = u {
                    *t = u;
                    refined += 1;
                }
            }
        }

        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in batches(&order, config.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&k| inputs[setup.train[k]].clone()).collect::<Vec<_>>())?;
            let out = am.model.forward(
                &x,
                Mode::Train {
                    dropout_seed: config.seed.wrapping_add(step),
                },
            )?;
            let (l, g) = match head {
                Head::Discrete => loss::cross_entropy(&out, &batch.iter().map(|&k| labels[k]).collect::<Vec<_>>())?,
                Head::Continuous => {
                    let t: Vec<f64> = batch.iter().flat_map(|&k| targets[k].0).collect();
                    loss::smooth_l1(&out, &Tensor::new(vec![batch.len(), 3], t)?)?
                }
            };
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("assistant loss at epoch {epoch}"),
                });
            }
            am.model.zero_grad();
            am.model.backward(&g)?;
            adam_step(am.model.params_mut(), &mut state, config, epoch)?;
            loss_sum += l * batch.len() as f64;
            loss_n += batch.len();
            step += 1;
        }

        am.trained = true;
        let stego_scores: Vec<f64> = setup
            .val
            .par_iter()
            .map(|&ci| {
                let cover = &setup.covers[ci];
                match head {
                    Head::Discrete => {
                        let cell = am.predict_cell(cover)?;
                        setup.cache.lookup_score(ci, cell, cover, setup.detector)
                    }
                    Head::Continuous => {
                        let p = am.predict_params(cover)?;
                        let ctx = contexts[ci].as_ref().expect("continuous contexts");
                        let st = embed_with_context(ctx, &p, rate, seed_of(ci)?)?.0;
                        setup.detector.predict(&st.pixels)
                    }
                }
            })
            .collect::<Result<_>>()?;
        let cm = ConfusionMatrix::from_scores(&val_cover_scores, &stego_scores);
        let err = cm.error_rate_percent()?;
        let new_high = best.as_ref().map_or(true, |(b, _)| err > *b);
        if new_high {
            best = Some((err, am.clone()));
            history.best_epoch = epoch;
            if let Some(p) = setup.checkpoint_path {
                am.save(p)?;
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_error_percent: err,
            val_matrix: cm,
            seconds: started.elapsed().as_secs_f64(),
            checkpointed: new_high,
            refined,
        });
    }
    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, history))
}

/// Histogram bin width for multiplier histograms.
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.0125;
pub const HISTOGRAM_RANGE: (f64, f64) = (1.0, 2.0);
pub const HISTOGRAM_CSV_HEADER: &str = "bin_left,bin_right,count";

/// Counts over fixed bins; values outside the range land in the end bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_count() -> usize {
        ((HISTOGRAM_RANGE.1 - HISTOGRAM_RANGE.0) / HISTOGRAM_BIN_WIDTH).round() as usize
    }

    pub fn bin_edges(i: usize) -> (f64, f64) {
        let left = HISTOGRAM_RANGE.0 + i as f64 * HISTOGRAM_BIN_WIDTH;
        (left, HISTOGRAM_RANGE.0 + (i + 1) as f64 * HISTOGRAM_BIN_WIDTH)
    }

    pub fn from_values(values: &[f64]) -> Self {
        let n = Self::bin_count();
        let mut counts = vec![0; n];
        for v in values {
            // grid values sit exactly on bin edges; keep them in the bin they open
            let b = ((v - HISTOGRAM_RANGE.0) / HISTOGRAM_BIN_WIDTH + 1e-9).floor();
            counts[(b.max(0.0) as usize).min(n - 1)] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTOGRAM_CSV_HEADER}\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (l, r) = Self::bin_edges(i);
            out.push_str(&format!("{l:.4},{r:.4},{c}\n"));
        }
        out
    }
}

/// Histograms of predicted σ, ε and wet-cost multipliers over `covers`.
pub fn multiplier_histogram(m: &AssistantModel, covers: &[Image8]) -> Result<[Histogram; 3]> {
    if covers.is_empty() {
        return Err(Error::Empty("histogram covers"));
    }
    let preds: Vec<[f64; 3]> = covers
        .par_iter()
        .map(|c| m.predict_params(c).map(|p| p.as_array()))
        .collect::<Result<_>>()?;
    Ok([0, 1, 2].map(|a| Histogram::from_values(&preds.iter().map(|p| p[a]).collect::<Vec<_>>())))
}
