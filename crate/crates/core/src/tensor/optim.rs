use super::{ParamStore, Real, Tensor};
use crate::error::{NasError, Result};

/// Learning-rate drop epochs of the 70-epoch reference schedule.
pub const REFERENCE_MILESTONES: [usize; 3] = [30, 45, 60];
pub const REFERENCE_EPOCHS: usize = 70;

/// Maps the reference milestones proportionally onto a run of
/// `total_epochs` epochs.
pub fn scaled_milestones(total_epochs: usize) -> Vec<usize> {
    REFERENCE_MILESTONES
        .iter()
        .map(|&m| ((m * total_epochs) as f64 / REFERENCE_EPOCHS as f64).round() as usize)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            milestones: REFERENCE_MILESTONES.to_vec(),
            gamma: 0.1,
        }
    }
}

/// Stochastic gradient descent with (Nesterov) momentum and L2 weight decay
/// on parameters flagged for it.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
    epoch: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, velocity: Vec::new(), epoch: 0 }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Learning rate in effect for the current epoch.
    pub fn lr(&self) -> f64 {
        let drops = self.config.milestones.iter().filter(|&&m| self.epoch >= m).count();
        self.config.lr * self.config.gamma.powi(drops as i32)
    }

    /// Applies one update using the gradients stored on `params`, then
    /// clears them. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        let lr = T::of(self.lr());
        let mom = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (p, vel) in params.params_mut().iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad.take() else { continue };
            let decay = if p.weight_decay { wd } else { T::zero() };
            let buf = vel.get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let (w, b) = (p.value.data_mut(), buf.data_mut());
            for ((wi, bi), &gi) in w.iter_mut().zip(b.iter_mut()).zip(grad.data()) {
                let d = gi + decay * *wi;
                *bi = mom * *bi + d;
                let step = if self.config.nesterov { d + mom * *bi } else { *bi };
                *wi -= lr * step;
            }
        }
    }

    /// Velocity buffers keyed by parameter name, for checkpointing.
    pub fn state(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        params
            .iter()
            .filter_map(|(id, p)| {
                self.velocity.get(id.index()).and_then(|v| v.as_ref()).map(|v| (p.name.clone(), v.clone()))
            })
            .collect()
    }

    pub fn load_state(&mut self, params: &ParamStore<T>, state: Vec<(String, Tensor<T>)>, epoch: usize) -> Result<()> {
        self.velocity = vec![None; params.len()];
        for (name, v) in state {
            let id = params
                .find(&name)
                .ok_or_else(|| NasError::Parse(format!("optimizer state for unknown parameter {name}")))?;
            if params.value(id).shape() != v.shape() {
                return Err(NasError::structural(format!("velocity shape mismatch for {name}")));
            }
            self.velocity[id.index()] = Some(v);
        }
        self.epoch = epoch;
        Ok(())
    }
}
