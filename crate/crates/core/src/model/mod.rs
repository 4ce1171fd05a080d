//! Toy decoder-only transformer whose FFN sublayers are explicit key-value
//! memories: `FFN(x) = ReLU(K x)ᵀ V`, with `K`, `V ∈ ℝ^{d_ffn × d_model}`.

mod checkpoint;
mod config;
pub(crate) mod forward;
mod params;
mod train;
mod view;

use std::borrow::Cow;

pub use checkpoint::{
    load_checkpoint, read_container, save_checkpoint, write_container, Container, Manifest, ParamEntry,
    TrainingMeta, CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{ActivationTrace, LayerScales};
pub use params::{LayerParams, MatrixId, MatrixKind, ModelParams, TensorInfo};
pub use train::{train_lm, Adam, LmTrainConfig, TrainingLog};
pub use view::{ForwardOutput, ModelView, PromptTarget};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, gemm, Matrix, Vector};
use crate::suppress::{apply_plan, SuppressionPlan};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    params: ModelParams,
}

/// Seeded initialization of a fresh model.
pub fn init_model(config: ModelConfig) -> Result<ToyTransformer> {
    ToyTransformer::init(config)
}

impl ToyTransformer {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking every tensor shape against the
    /// config.
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::zeros(&config);
        let want = expected.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((w, _), (g, _)) in want.iter().zip(&got) {
            if w != g {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    g.name, g.shape, w.name, w.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// The unsuppressed view.
    pub fn view(&self) -> ModelView<'_> {
        ModelView::new(
            &self.config,
            Cow::Borrowed(&self.params),
            LayerScales::identity(self.config.n_layers),
        )
        .expect("identity scales match the config")
    }

    pub fn view_with(&self, plan: Option<&SuppressionPlan>) -> Result<ModelView<'_>> {
        match plan {
            Some(plan) => apply_plan(self, plan),
            None => Ok(self.view()),
        }
    }

    /// Causal forward pass; logits for every position, plus the FFN
    /// activation trace when `trace` is set.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        plan: Option<&SuppressionPlan>,
        trace: bool,
    ) -> Result<ForwardOutput> {
        self.view_with(plan)?.forward(tokens, trace)
    }

    pub fn sequence_nll(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
        plan: Option<&SuppressionPlan>,
    ) -> Result<f64> {
        self.view_with(plan)?.sequence_nll(prompt, target)
    }

    pub fn sample(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        temperature: f64,
        seed: u64,
        plan: Option<&SuppressionPlan>,
    ) -> Result<Vec<TokenId>> {
        self.view_with(plan)?.sample(prompt, max_new, temperature, seed)
    }

    fn check_ffn_input(&self, x: &Vector, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::IndexOutOfRange {
                index: layer,
                len: self.config.n_layers,
            });
        }
        if x.dim() != self.config.d_model {
            return Err(Error::DimensionMismatch(format!(
                "FFN input of dim {} for d_model {}",
                x.dim(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// FFN sublayer of `layer` applied to its (normalized) input `x`, with
    /// the activation coefficients scaled by `lambda`:
    /// `(λ · ReLU(K x))ᵀ V`.
    ///
    /// λ is applied to the matrix-form product, so the output is exactly
    /// `λ` times the λ = 1 output.
    pub fn ffn_forward(&self, x: &Vector, layer: usize, lambda: f64) -> Result<Vector> {
        self.check_ffn_input(x, layer)?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        let p = &self.params.layers[layer];
        let row = Matrix::from_vec(1, x.dim(), x.as_slice().to_vec())?;
        let mut act = Matrix::zeros(1, self.config.d_ffn);
        gemm(1.0, &row, false, &p.ffn_key, true, 0.0, &mut act)?;
        for a in act.as_mut_slice() {
            *a = a.max(0.0);
        }
        let mut out = Matrix::zeros(1, self.config.d_model);
        gemm(1.0, &act, false, &p.ffn_value, false, 0.0, &mut out)?;
        Ok(Vector::new(out.into_vec()).scaled(lambda))
    }

    /// Key-value decomposition of the FFN: coefficients `a_j = ReLU(x·k_j)`
    /// and the reconstruction `Σ_j a_j v_j`, computed neuron by neuron.
    pub fn ffn_decompose(&self, x: &Vector, layer: usize) -> Result<(Vector, Vector)> {
        self.check_ffn_input(x, layer)?;
        let p = &self.params.layers[layer];
        let coeffs: Vec<f64> = (0..self.config.d_ffn)
            .map(|j| dot(x.as_slice(), p.ffn_key.row(j)).max(0.0))
            .collect();
        let mut recon = vec![0.0; self.config.d_model];
        for (j, &a) in coeffs.iter().enumerate() {
            if a > 0.0 {
                axpy(a, p.ffn_value.row(j), &mut recon);
            }
        }
        Ok((Vector::new(coeffs), Vector::new(recon)))
    }
}
