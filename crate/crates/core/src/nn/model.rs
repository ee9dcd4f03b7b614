use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, LayerKind};
use super::tensor::{Param, Tensor};
use crate::{Error, Result};

/// Forward-pass mode. Training mode applies dropout with masks derived from
/// `dropout_seed`, uses batch statistics in batchnorm, and records the state
/// needed by [`Model::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// A sequential stack of layers.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    ready_for_backward: bool,
}

impl Model {
    pub fn new(kinds: Vec<LayerKind>) -> Result<Self> {
        let layers = kinds.into_iter().map(Layer::new).collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ready_for_backward: false,
        })
    }

    /// Builds the model and applies seeded He-uniform initialization.
    pub fn seeded(kinds: Vec<LayerKind>, seed: u64) -> Result<Self> {
        let mut m = Self::new(kinds)?;
        m.init(seed);
        Ok(m)
    }

    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            layer.init(&mut rng);
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind().clone()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => {
                self.layers.iter_mut().for_each(Layer::clear_cache);
                self.ready_for_backward = false;
                self.infer(input)
            }
            Mode::Train { dropout_seed } => {
                self.ready_for_backward = false;
                let mut x = input.clone();
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    x = layer.forward_train(i, &x, dropout_seed)?;
                }
                self.ready_for_backward = true;
                Ok(x)
            }
        }
    }

    /// Eval-mode forward on a shared reference.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_eval(i, &x)?;
        }
        Ok(x)
    }

    /// Reverse-mode pass from `loss_grad` (gradient w.r.t. the model output).
    /// Parameter gradients accumulate; the input gradient is returned.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<Tensor> {
        if !self.ready_for_backward {
            return Err(Error::NoForwardState);
        }
        let mut g = loss_grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Hash of every relu activation pattern from the last training forward.
    pub(crate) fn relu_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in &self.layers {
            if let Some(mask) = l.relu_mask() {
                mask.hash(&mut h);
            }
        }
        h.finish()
    }
}
