use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let mut data = p.to_vec();
            for (i, (w, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Optimization settings shared by every trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Mean loss of every epoch, first to last.
pub type LossHistory = Vec<f64>;

/// Minibatch training over `n` samples. `batch_loss` builds the loss of one
/// minibatch on the tape from the parameter variables. The learning rate
/// decays linearly to 10% over the run.
pub(crate) fn fit<F>(
    params: &mut Vec<Tensor>,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut batch_loss: F,
) -> Result<LossHistory>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>], &[usize], &mut ChaCha8Rng) -> Result<Var<'t>>,
{
    if n == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = Adam::new(params, cfg.lr);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut acc = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = params.iter().map(|p| tape.var(p.clone())).collect();
            let loss = batch_loss(&tape, &vars, chunk, rng)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {value}"),
                });
            }
            let grads = tape.backward(loss, &vars)?;
            opt.set_lr(cfg.lr * (1.0 - 0.9 * step as f64 / total.max(1) as f64));
            opt.update(params, &grads)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    step,
                    reason: "non-finite parameters".into(),
                });
            }
            acc += value;
            step += 1;
        }
        history.push(acc / steps_per_epoch as f64);
    }
    Ok(history)
}
