//! Memorization pretraining with Adam on mean next-token NLL.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::Target;
use super::params::ModelParams;
use super::ToyTransformer;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update over parameter/gradient chunks laid out contiguously in
    /// the optimizer's state.
    pub fn step<'p, 'g>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut [f64]>,
        grads: impl IntoIterator<Item = &'g [f64]>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            debug_assert_eq!(p.len(), g.len());
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            offset += p.len();
        }
        debug_assert_eq!(offset, self.m.len());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean per-token loss of each step's batch.
    pub losses: Vec<f64>,
}

/// Trains `model` in place on next-token prediction over `corpus`.
///
/// Batches are drawn from seeded per-epoch shuffles; the loss is the mean
/// NLL over every predicted token in the batch. Sequences are processed in
/// batch order and gradients summed in that order, so a run is a pure
/// function of its inputs.
pub fn train_lm(
    model: &mut ToyTransformer,
    corpus: &[Vec<TokenId>],
    cfg: &LmTrainConfig,
) -> Result<TrainingLog> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    if let Some(i) = corpus.iter().position(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "corpus sequence {i} is shorter than two tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut grads = ModelParams::zeros(model.config());
    let mut adam = Adam::new(grads.num_params(), cfg.lr);
    let mut log = TrainingLog::default();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let n_tokens: usize = batch.iter().map(|&i| corpus[i].len() - 1).sum();
        let w = 1.0 / n_tokens as f64;
        grads.fill_zero();
        let view = model.view();
        let mut loss = 0.0;
        for &i in &batch {
            let seq = &corpus[i];
            let targets: Vec<Target> = (1..seq.len())
                .map(|p| Target {
                    pos: p - 1,
                    token: seq[p],
                    weight: w,
                })
                .collect();
            loss += view
                .targets_grad(&seq[..seq.len() - 1], &targets, 1.0, &mut grads)
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} at step {step}, batch corpus indices {batch:?}"))
                    }
                    other => other,
                })?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step}, batch corpus indices {batch:?}"
            )));
        }
        adam.step(
            model.params_mut().tensors_mut(),
            grads.tensors().into_iter().map(|(_, g)| g),
        );
        if step % 100 == 0 {
            debug!("pretrain step {step}: loss {loss:.4}");
        }
        log.losses.push(loss);
    }
    if !model.params().is_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(log)
}
