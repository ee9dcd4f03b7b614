use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Mode, Model};
use super::tensor::Tensor;
use crate::Result;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_MAX_PARAMS: usize = 200;
const MAX_INPUT_COORDS: usize = 50;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation flipped a relu, where the central
    /// difference straddles a kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `L = Σ w·y` (seeded random `w`) against
/// central differences, on up to 200 sampled parameters plus some input
/// coordinates. Runs in training mode with a fixed dropout mask.
pub fn gradcheck(model: &mut Model, input: &Tensor, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let mode = Mode::Train { dropout_seed: seed };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let out = model.forward(input, mode)?;
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss_grad = Tensor::new(out.shape().to_vec(), weights.clone())?;
    let base_sig = model.relu_signature();
    model.zero_grad();
    let input_grad = model.backward(&loss_grad)?;

    let loss = |y: &Tensor| y.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();

    let coords: Vec<(usize, usize)> = model
        .params()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.value.len()).map(move |e| (pi, e)))
        .collect();
    let picked: Vec<usize> = if coords.len() <= GRADCHECK_MAX_PARAMS {
        (0..coords.len()).collect()
    } else {
        sample(&mut rng, coords.len(), GRADCHECK_MAX_PARAMS).into_vec()
    };
    let analytic: Vec<f64> = {
        let grads: Vec<&[f64]> = model.params().map(|p| p.grad.data()).collect();
        picked.iter().map(|&c| grads[coords[c].0][coords[c].1]).collect()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        tolerance,
    };
    let mut record = |a: f64, plus: (f64, u64), minus: (f64, u64)| {
        if plus.1 != base_sig || minus.1 != base_sig {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * GRADCHECK_STEP);
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.checked += 1;
    };

    for (k, &c) in picked.iter().enumerate() {
        let (pi, e) = coords[c];
        let mut eval_at = |delta: f64| -> Result<(f64, u64)> {
            let original = {
                let p = model.params_mut().nth(pi).expect("parameter index");
                let v = p.value.data()[e];
                p.value.data_mut()[e] = v + delta;
                v
            };
            let y = model.forward(input, mode)?;
            model.params_mut().nth(pi).expect("parameter index").value.data_mut()[e] = original;
            Ok((loss(&y), model.relu_signature()))
        };
        let plus = eval_at(GRADCHECK_STEP)?;
        let minus = eval_at(-GRADCHECK_STEP)?;
        record(analytic[k], plus, minus);
    }

    let n_in = input.len().min(MAX_INPUT_COORDS);
    for i in sample(&mut rng, input.len(), n_in).into_iter() {
        let mut eval_at = |delta: f64| -> Result<(f64, u64)> {
            let mut x = input.clone();
            x.data_mut()[i] += delta;
            let y = model.forward(&x, mode)?;
            Ok((loss(&y), model.relu_signature()))
        };
        let plus = eval_at(GRADCHECK_STEP)?;
        let minus = eval_at(-GRADCHECK_STEP)?;
        record(input_grad.data()[i], plus, minus);
    }
    Ok(report)
}
