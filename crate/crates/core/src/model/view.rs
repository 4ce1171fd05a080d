use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::forward::{self, ActivationTrace, LayerScales, Target};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};
use crate::vocab::{TokenId, EOS_ID};

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of vocabulary logits per input position.
    pub logits: Matrix,
    pub trace: Option<ActivationTrace>,
}

/// A prompt and the continuation to be scored after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTarget {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub(crate) struct NllPass {
    fwd: forward::Forward,
    dlogits: Matrix,
    pub nll: f64,
}

/// A read-only model as seen through a suppression plan and/or adapter.
///
/// The parameters are either borrowed from the base model or an owned,
/// materialized copy (masked or adapted weights). The base model is never
/// modified.
#[derive(Debug, Clone)]
pub struct ModelView<'a> {
    config: &'a ModelConfig,
    params: Cow<'a, ModelParams>,
    scales: LayerScales,
}

impl<'a> ModelView<'a> {
    pub fn new(config: &'a ModelConfig, params: Cow<'a, ModelParams>, scales: LayerScales) -> Result<Self> {
        if scales.n_layers() != config.n_layers
            || scales.attn.len() != config.n_layers
            || scales.block.len() != config.n_layers
        {
            return Err(Error::DimensionMismatch(format!(
                "layer scales for {} layers on a {}-layer model",
                scales.n_layers(),
                config.n_layers
            )));
        }
        let all = scales.attn.iter().chain(&scales.ffn).chain(&scales.block);
        if let Some(bad) = all.into_iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale {bad} must be finite and non-negative"
            )));
        }
        Ok(Self {
            config,
            params,
            scales,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn scales(&self) -> &LayerScales {
        &self.scales
    }

    pub fn with_scales(&self, scales: LayerScales) -> Result<ModelView<'_>> {
        ModelView::new(self.config, Cow::Borrowed(self.params.as_ref()), scales)
    }

    pub fn forward(&self, tokens: &[TokenId], trace: bool) -> Result<ForwardOutput> {
        let fwd = forward::run(self.config, &self.params, &self.scales, tokens)?;
        let trace = trace.then(|| fwd.trace(&self.scales));
        Ok(ForwardOutput {
            logits: fwd.logits,
            trace,
        })
    }

    fn check_pair(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<Vec<TokenId>> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let mut seq = Vec::with_capacity(prompt.len() + target.len());
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(target);
        forward::check_tokens(self.config, &seq)?;
        Ok(seq)
    }

    /// Per-token cross-entropy of `target` under teacher forcing after
    /// `prompt`.
    pub fn token_nlls(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>> {
        let seq = self.check_pair(prompt, target)?;
        // The last target token is never an input.
        let out = self.forward(&seq[..seq.len() - 1], false)?;
        target
            .iter()
            .enumerate()
            .map(|(k, &tok)| {
                let row = out.logits.row(prompt.len() - 1 + k);
                crate::numerics::cross_entropy_slice(row, tok as usize)
            })
            .collect()
    }

    /// Mean token-level negative log-likelihood of `target` given `prompt`.
    pub fn sequence_nll(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<f64> {
        let nlls = self.token_nlls(prompt, target)?;
        Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
    }

    /// Mean NLL of `target` given `prompt`; accumulates
    /// `weight · ∂NLL/∂θ` (θ = this view's effective parameters) into
    /// `grads`.
    pub fn sequence_nll_grad(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
        weight: f64,
        grads: &mut ModelParams,
    ) -> Result<f64> {
        let seq = self.check_pair(prompt, target)?;
        let inputs = &seq[..seq.len() - 1];
        let w = 1.0 / target.len() as f64;
        let targets: Vec<Target> = target
            .iter()
            .enumerate()
            .map(|(k, &token)| Target {
                pos: prompt.len() - 1 + k,
                token,
                weight: w,
            })
            .collect();
        self.targets_grad(inputs, &targets, weight, grads)
    }

    /// Forward pass for the mean NLL of `target` given `prompt`, keeping
    /// what [`Self::backprop`] needs so the gradient weight can be chosen
    /// after the loss is known.
    pub(crate) fn nll_pass(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<NllPass> {
        let seq = self.check_pair(prompt, target)?;
        let inputs = &seq[..seq.len() - 1];
        let w = 1.0 / target.len() as f64;
        let targets: Vec<Target> = target
            .iter()
            .enumerate()
            .map(|(k, &token)| Target {
                pos: prompt.len() - 1 + k,
                token,
                weight: w,
            })
            .collect();
        let fwd = forward::run(self.config, &self.params, &self.scales, inputs)?;
        let (nll, dlogits) = forward::weighted_ce(&fwd.logits, &targets)?;
        Ok(NllPass { fwd, dlogits, nll })
    }

    /// Accumulates `weight · ∂NLL/∂θ` for a pass made by [`Self::nll_pass`].
    pub(crate) fn backprop(&self, pass: &NllPass, weight: f64, grads: &mut ModelParams) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let mut d = pass.dlogits.clone();
        d.scale(weight);
        forward::backward(&self.params, &self.scales, &pass.fwd, &d, grads)
    }

    /// Weighted CE over explicit targets; gradient scaled by `weight`.
    pub(crate) fn targets_grad(
        &self,
        inputs: &[TokenId],
        targets: &[Target],
        weight: f64,
        grads: &mut ModelParams,
    ) -> Result<f64> {
        let fwd = forward::run(self.config, &self.params, &self.scales, inputs)?;
        let (loss, mut dlogits) = forward::weighted_ce(&fwd.logits, targets)?;
        if weight != 0.0 {
            dlogits.scale(weight);
            forward::backward(&self.params, &self.scales, &fwd, &dlogits, grads)?;
        }
        Ok(loss)
    }

    /// Autoregressive continuation of `prompt`.
    ///
    /// Temperature 0 decodes greedily (ties go to the lowest token id);
    /// otherwise tokens are drawn from `softmax(logits / temperature)` with a
    /// ChaCha8 stream seeded by `seed`. Generation stops before the
    /// end-of-sequence token, after `max_new` tokens, or at the context
    /// limit. The returned continuation excludes the end-of-sequence token.
    pub fn sample(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<TokenId>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and >= 0, got {temperature}"
            )));
        }
        forward::check_tokens(self.config, prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.max_seq_len {
            let logits = self.forward(&seq, false)?.logits;
            let last = logits.row(logits.rows() - 1);
            let next = if temperature == 0.0 {
                argmax(last)
            } else {
                let mut probs: Vec<f64> = last.iter().map(|v| v / temperature).collect();
                softmax_in_place(&mut probs)?;
                draw(&probs, rng.random::<f64>())
            };
            if next == EOS_ID {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

pub(crate) fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn draw(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // Rounding left u above the final cumulative sum.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn draw_walks_cdf() {
        let p = [0.25, 0.5, 0.25];
        assert_eq!(draw(&p, 0.0), 0);
        assert_eq!(draw(&p, 0.3), 1);
        assert_eq!(draw(&p, 0.8), 2);
        assert_eq!(draw(&p, 1.0), 2);
    }
}
