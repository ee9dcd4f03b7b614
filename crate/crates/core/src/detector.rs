//! Steganalyzers: a KV-residual co-occurrence classifier and a tiny CNN, plus
//! confusion-matrix evaluation.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::media_io::Image8;
use crate::nn::{adam_step, loss, AdamState, Checkpoint, LayerKind, Mode, Model, Tensor, TrainConfig};
use crate::wavelet::Plane;
use crate::{Error, Result};

/// The 5×5 KV high-pass kernel, to be divided by [`KV_SCALE`].
pub const KV_KERNEL: [[i32; 5]; 5] = [
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
];
pub const KV_SCALE: f64 = 12.0;

pub const DEFAULT_TRUNCATION: usize = 3;
pub const DEFAULT_QUANT_STEP: f64 = 1.0;
pub const DECISION_THRESHOLD: f64 = 0.5;

pub const COVER: usize = 0;
pub const STEGO: usize = 1;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Same-size KV residual with symmetric (edge not repeated) padding.
pub fn kv_residual(img: &Image8) -> Result<Plane> {
    let (w, h) = img.dims();
    if w < 5 || h < 5 {
        return Err(Error::Dimensions {
            width: w,
            height: h,
            reason: "KV residual needs at least 5x5",
        });
    }
    let px = img.pixels();
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0i32;
            for (a, row) in KV_KERNEL.iter().enumerate() {
                let rr = reflect(r as isize + a as isize - 2, h);
                for (b, &k) in row.iter().enumerate() {
                    let cc = reflect(c as isize + b as isize - 2, w);
                    acc += k * i32::from(px[rr * w + cc]);
                }
            }
            out[r * w + c] = f64::from(acc) / KV_SCALE;
        }
    }
    Plane::new(w, h, out)
}

/// Normalized horizontal and vertical co-occurrences of the quantized,
/// truncated residual. Length `2 (2T+1)^2`, horizontal block first.
pub fn extract_features(residual: &Plane, t: usize, q: f64) -> Result<Vec<f64>> {
    if t < 1 {
        return Err(Error::param("truncation", "T must be >= 1"));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::param("quant_step", format!("q must be > 0, got {q}")));
    }
    let (w, h) = (residual.width(), residual.height());
    if w < 2 || h < 2 {
        return Err(Error::Dimensions {
            width: w,
            height: h,
            reason: "co-occurrences need at least 2x2",
        });
    }
    let ti = t as i64;
    let side = 2 * t + 1;
    let codes: Vec<usize> = residual
        .data()
        .iter()
        .map(|&v| (((v / q).round() as i64).clamp(-ti, ti) + ti) as usize)
        .collect();
    let mut feats = vec![0.0; 2 * side * side];
    let (horiz, vert) = feats.split_at_mut(side * side);
    for r in 0..h {
        for c in 0..w {
            let a = codes[r * w + c];
            if c + 1 < w {
                horiz[a * side + codes[r * w + c + 1]] += 1.0;
            }
            if r + 1 < h {
                vert[a * side + codes[(r + 1) * w + c]] += 1.0;
            }
        }
    }
    let nh = (h * (w - 1)) as f64;
    let nv = ((h - 1) * w) as f64;
    horiz.iter_mut().for_each(|v| *v /= nh);
    vert.iter_mut().for_each(|v| *v /= nv);
    Ok(feats)
}

pub fn feature_dimension(t: usize) -> usize {
    2 * (2 * t + 1).pow(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    /// Co-occurrence features with a two-class softmax (logistic) classifier.
    ResidualFeatures,
    /// KV preprocessing then two strided conv blocks, pooling and a dense softmax.
    TinyCnn,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::ResidualFeatures => "residual_features",
            DetectorKind::TinyCnn => "tiny_cnn",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_features" | "features" => Ok(DetectorKind::ResidualFeatures),
            "tiny_cnn" | "cnn" => Ok(DetectorKind::TinyCnn),
            other => Err(Error::param("detector_kind", format!("unknown kind `{other}`"))),
        }
    }
}

fn architecture(kind: DetectorKind, t: usize) -> Vec<LayerKind> {
    match kind {
        DetectorKind::ResidualFeatures => vec![
            LayerKind::Dense {
                inputs: feature_dimension(t),
                outputs: 2,
            },
            LayerKind::Softmax,
        ],
        DetectorKind::TinyCnn => {
            let block = |cin| {
                [
                    LayerKind::Conv2d {
                        in_channels: cin,
                        out_channels: 8,
                        kernel: 3,
                        stride: 2,
                        bias: false,
                    },
                    LayerKind::BatchNorm { features: 8 },
                    LayerKind::Relu,
                ]
            };
            let mut v: Vec<LayerKind> = block(1).into_iter().chain(block(8)).collect();
            v.extend([
                LayerKind::GlobalAvgPool,
                LayerKind::Dense { inputs: 8, outputs: 2 },
                LayerKind::Softmax,
            ]);
            v
        }
    }
}

/// A trained (or checkpoint-loaded) steganalyzer.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    kind: DetectorKind,
    model: Model,
    truncation: usize,
    quant_step: f64,
    /// Feature standardization; empty for the CNN.
    mean: Vec<f64>,
    scale: Vec<f64>,
    trained: bool,
}

impl DetectorModel {
    /// An untrained model with default preprocessing constants.
    pub fn untrained(kind: DetectorKind, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            model: Model::seeded(architecture(kind, DEFAULT_TRUNCATION), seed)?,
            truncation: DEFAULT_TRUNCATION,
            quant_step: DEFAULT_QUANT_STEP,
            mean: Vec::new(),
            scale: Vec::new(),
            trained: false,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Network input for one image: a standardized feature row or a
    /// `[1, H, W]` KV residual.
    fn input_of(&self, img: &Image8) -> Result<Tensor> {
        let res = kv_residual(img)?;
        match self.kind {
            DetectorKind::ResidualFeatures => {
                let mut f = extract_features(&res, self.truncation, self.quant_step)?;
                if !self.mean.is_empty() {
                    for ((v, m), s) in f.iter_mut().zip(&self.mean).zip(&self.scale) {
                        *v = (*v - m) / s;
                    }
                }
                let n = f.len();
                Tensor::new(vec![n], f)
            }
            DetectorKind::TinyCnn => Tensor::new(vec![1, res.height(), res.width()], res.into_data()),
        }
    }

    /// Probability that `img` is a stego image.
    pub fn predict(&self, img: &Image8) -> Result<f64> {
        Ok(self.predict_many(std::slice::from_ref(img))?[0])
    }

    /// Stego probabilities for many images, computed in parallel.
    pub fn predict_many(&self, imgs: &[Image8]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        imgs.par_iter()
            .map(|img| {
                let x = self.input_of(img)?;
                let mut shape = vec![1];
                shape.extend_from_slice(x.shape());
                let y = self.model.infer(&x.reshape(&shape)?)?;
                Ok(y.data()[STEGO].clamp(0.0, 1.0))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(format!("detector:{}", self.kind), self.model.clone())
            .with_metadata("preprocessing", vec![self.truncation as f64, self.quant_step])
            .with_metadata("feature_mean", self.mean.clone())
            .with_metadata("feature_scale", self.scale.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let kind: DetectorKind = ck
            .tag
            .strip_prefix("detector:")
            .ok_or_else(|| Error::Checkpoint(format!("not a detector checkpoint: `{}`", ck.tag)))?
            .parse()?;
        let pre = ck
            .metadata("preprocessing")
            .filter(|p| p.len() == 2)
            .ok_or_else(|| Error::Checkpoint("missing preprocessing constants".into()))?;
        let truncation = pre[0] as usize;
        ck.expect_architecture(&architecture(kind, truncation))?;
        let get = |name| ck.metadata(name).map(<[f64]>::to_vec).unwrap_or_default();
        let (mean, scale) = (get("feature_mean"), get("feature_scale"));
        Ok(Self {
            kind,
            truncation,
            quant_step: pre[1],
            mean,
            scale,
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

/// Trains on each pair's cover (label 0) and stego (label 1).
pub fn train_detector(pairs: &[(Image8, Image8)], kind: DetectorKind, config: &TrainConfig) -> Result<DetectorModel> {
    if pairs.len() < 2 {
        return Err(Error::Empty("detector training needs at least 2 pairs"));
    }
    let mut images = Vec::with_capacity(2 * pairs.len());
    let mut labels = Vec::with_capacity(2 * pairs.len());
    for (c, s) in pairs {
        images.push(c.clone());
        labels.push(COVER);
        images.push(s.clone());
        labels.push(STEGO);
    }
    train_detector_labeled(&images, &labels, kind, config)
}

/// Trains on arbitrary labeled images (0 = cover, 1 = stego).
pub fn train_detector_labeled(
    images: &[Image8],
    labels: &[usize],
    kind: DetectorKind,
    config: &TrainConfig,
) -> Result<DetectorModel> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("no training images"));
    }
    if images.len() != labels.len() || labels.iter().any(|&l| l > STEGO) {
        return Err(Error::param("labels", "one 0/1 label per image required"));
    }
    let mut det = DetectorModel::untrained(kind, config.seed)?;
    let inputs: Vec<Tensor> = images.par_iter().map(|img| det.input_of(img)).collect::<Result<_>>()?;
    let inputs = match kind {
        DetectorKind::ResidualFeatures => {
            let (mean, scale) = standardization(&inputs);
            det.mean = mean;
            det.scale = scale;
            inputs
                .into_iter()
                .map(|t| {
                    let d = t
                        .data()
                        .iter()
                        .zip(&det.mean)
                        .zip(&det.scale)
                        .map(|((v, m), s)| (v - m) / s)
                        .collect();
                    Tensor::new(t.shape().to_vec(), d)
                })
                .collect::<Result<Vec<_>>>()?
        }
        DetectorKind::TinyCnn => inputs,
    };
    fit_classifier(&mut det.model, &inputs, labels, config)?;
    det.trained = true;
    Ok(det)
}

fn standardization(rows: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r.data()).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(r.data())
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    // constant features get unit scale so they standardize to zero
    let scale = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Minibatch Adam on cross-entropy. Sample order is reshuffled every epoch
/// from `config.seed`; a trailing batch of one is folded into the previous
/// batch so batchnorm never sees a singleton.
pub(crate) fn fit_classifier(model: &mut Model, inputs: &[Tensor], labels: &[usize], config: &TrainConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_DE7E_C702);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, config.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = model.forward(
                &x,
                Mode::Train {
                    dropout_seed: config.seed.wrapping_add(step),
                },
            )?;
            let (l, g) = loss::cross_entropy(&out, &y)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss at epoch {epoch}"),
                });
            }
            model.zero_grad();
            model.backward(&g)?;
            adam_step(model.params_mut(), &mut state, config, epoch)?;
            step += 1;
        }
    }
    Ok(())
}

pub(crate) fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(1)).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Outcome counts of cover/stego classification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub cover_as_cover: u64,
    pub cover_as_stego: u64,
    pub stego_as_cover: u64,
    pub stego_as_stego: u64,
}

pub const CONFUSION_CSV_HEADER: &str = "cover_as_cover,cover_as_stego,stego_as_cover,stego_as_stego,error_rate";

impl ConfusionMatrix {
    pub fn new(cover_as_cover: u64, cover_as_stego: u64, stego_as_cover: u64, stego_as_stego: u64) -> Self {
        Self {
            cover_as_cover,
            cover_as_stego,
            stego_as_cover,
            stego_as_stego,
        }
    }

    /// Thresholds stego probabilities at 0.5.
    pub fn from_scores(cover_scores: &[f64], stego_scores: &[f64]) -> Self {
        let hit = |p: &&f64| **p >= DECISION_THRESHOLD;
        let cs = cover_scores.iter().filter(hit).count() as u64;
        let ss = stego_scores.iter().filter(hit).count() as u64;
        Self::new(cover_scores.len() as u64 - cs, cs, stego_scores.len() as u64 - ss, ss)
    }

    pub fn cells(&self) -> [u64; 4] {
        [
            self.cover_as_cover,
            self.cover_as_stego,
            self.stego_as_cover,
            self.stego_as_stego,
        ]
    }

    pub fn total(&self) -> u64 {
        self.cells().iter().sum()
    }

    /// Cells as percentages of the total.
    pub fn percentages(&self) -> Result<[f64; 4]> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix"));
        }
        Ok(self.cells().map(|c| 100.0 * c as f64 / total as f64))
    }

    /// Misclassified fraction.
    pub fn error_rate(&self) -> Result<f64> {
        Ok(self.error_rate_percent()? / 100.0)
    }

    /// Misclassified share in percent.
    pub fn error_rate_percent(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix"));
        }
        Ok(100.0 * (self.cover_as_stego + self.stego_as_cover) as f64 / total as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        Ok(1.0 - self.error_rate()?)
    }

    /// CSV data row matching [`CONFUSION_CSV_HEADER`]; the error rate is in
    /// percent and printed in shortest round-trip form.
    pub fn csv_row(&self) -> Result<String> {
        Ok(format!(
            "{},{},{},{},{}",
            self.cover_as_cover,
            self.cover_as_stego,
            self.stego_as_cover,
            self.stego_as_stego,
            self.error_rate_percent()?
        ))
    }

    pub fn to_csv(&self) -> Result<String> {
        Ok(format!("{CONFUSION_CSV_HEADER}\n{}\n", self.csv_row()?))
    }

    /// Parses a data row produced by [`ConfusionMatrix::csv_row`], returning
    /// the matrix and the stored error rate.
    pub fn parse_csv_row(row: &str) -> Result<(Self, f64)> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 5 {
            return Err(Error::param("confusion csv", format!("expected 5 fields, got {}", f.len())));
        }
        let n = |s: &str| s.parse::<u64>().map_err(|e| Error::param("confusion csv", e.to_string()));
        let m = Self::new(n(f[0])?, n(f[1])?, n(f[2])?, n(f[3])?);
        let rate = f[4]
            .parse::<f64>()
            .map_err(|e| Error::param("confusion csv", e.to_string()))?;
        Ok((m, rate))
    }
}

/// Classifies every cover and stego of `pairs`.
pub fn evaluate(m: &DetectorModel, pairs: &[(Image8, Image8)]) -> Result<ConfusionMatrix> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let covers: Vec<Image8> = pairs.iter().map(|p| p.0.clone()).collect();
    let stegos: Vec<Image8> = pairs.iter().map(|p| p.1.clone()).collect();
    Ok(ConfusionMatrix::from_scores(&m.predict_many(&covers)?, &m.predict_many(&stegos)?))
}
