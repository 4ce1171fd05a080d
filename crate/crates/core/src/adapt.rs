//! Low-rank adapter trained on a suppressed model with a knowledge-aware
//! likelihood term plus a context-vs-no-context margin term.

use std::borrow::Cow;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    read_container, write_container, Adam, MatrixId, MatrixKind, ModelParams, ModelView, TensorInfo,
    ToyTransformer, TrainingMeta,
};
use crate::numerics::{gemm, Matrix};
use crate::suppress::{apply_param_mask, SuppressionPlan};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub rank: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma_start: 1.0,
            gamma_end: 5.0,
            rank: 4,
            lr: 1e-4,
            steps: 600,
            batch: 16,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return bad("alpha and beta cannot both be zero");
        }
        if !(self.gamma_start >= 0.0 && self.gamma_end >= self.gamma_start) {
            return bad("need gamma_end >= gamma_start >= 0");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        Ok(())
    }
}

/// One question in token form: the closed-book and open-book prompts and
/// the contextual answer (with its end marker when used for training).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub closed_prompt: Vec<TokenId>,
    pub open_prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Mean token NLL of the answer after the open-book prompt.
pub fn kat_loss(view: &ModelView<'_>, ex: &QaExample) -> Result<f64> {
    view.sequence_nll(&ex.open_prompt, &ex.answer)
}

/// `[γ − log P(y*|q,c) + log P(y*|q)]₊` from mean-per-token log-likelihoods.
pub fn kpo_hinge(gamma: f64, logp_ctx: f64, logp_noctx: f64) -> f64 {
    (gamma - logp_ctx + logp_noctx).max(0.0)
}

pub fn kpo_loss(view: &ModelView<'_>, ex: &QaExample, gamma: f64) -> Result<f64> {
    let ctx = view.sequence_nll(&ex.open_prompt, &ex.answer)?;
    let noctx = view.sequence_nll(&ex.closed_prompt, &ex.answer)?;
    Ok(kpo_hinge(gamma, -ctx, -noctx))
}

/// Margin at `step`, interpolated linearly from `gamma_start` to
/// `gamma_end` over `total` steps.
pub fn gamma_at(step: usize, total: usize, cfg: &AdaptConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("total_steps must be at least 1".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total {total}"
        )));
    }
    Ok(cfg.gamma_start + (cfg.gamma_end - cfg.gamma_start) * (step as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kat: f64,
    pub kpo: f64,
    pub gamma: f64,
    pub combined: f64,
}

pub fn combined_loss(
    view: &ModelView<'_>,
    ex: &QaExample,
    cfg: &AdaptConfig,
    step: usize,
    total: usize,
) -> Result<LossParts> {
    let gamma = gamma_at(step, total, cfg)?;
    let ctx = view.sequence_nll(&ex.open_prompt, &ex.answer)?;
    let noctx = view.sequence_nll(&ex.closed_prompt, &ex.answer)?;
    let kpo = kpo_hinge(gamma, -ctx, -noctx);
    Ok(LossParts {
        kat: ctx,
        kpo,
        gamma,
        combined: cfg.alpha * ctx + cfg.beta * kpo,
    })
}

/// Low-rank update `A·B` of one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub id: MatrixId,
    /// rows × rank
    pub a: Matrix,
    /// rank × cols
    pub b: Matrix,
}

impl LowRankFactor {
    pub fn delta(&self) -> Matrix {
        let mut d = Matrix::zeros(self.a.rows(), self.b.cols());
        gemm(1.0, &self.a, false, &self.b, false, 0.0, &mut d).expect("factor shapes agree");
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub rank: usize,
    pub factors: Vec<LowRankFactor>,
}

/// Matrices an adapter attaches to under `plan`: every attention and FFN
/// matrix except those the plan suppresses.
pub fn adapter_targets(n_layers: usize, plan: Option<&SuppressionPlan>) -> Vec<MatrixId> {
    let excluded = plan.map(SuppressionPlan::suppressed_matrices).unwrap_or_default();
    (0..n_layers)
        .flat_map(|layer| {
            MatrixKind::ALL
                .into_iter()
                .map(move |kind| MatrixId { layer, kind })
        })
        .filter(|id| !excluded.contains(id))
        .collect()
}

impl Adapter {
    /// Fresh adapter: `A` seeded normal with std `1/√rank`, `B` zero.
    pub fn new(model: &ToyTransformer, targets: &[MatrixId], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("valid std");
        let factors = targets
            .iter()
            .map(|&id| {
                let (rows, cols) = model.params().matrix(id)?.shape();
                Ok(LowRankFactor {
                    id,
                    a: Matrix::from_fn(rows, rank, |_, _| normal.sample(&mut rng)),
                    b: Matrix::zeros(rank, cols),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rank, factors })
    }

    pub fn num_params(&self) -> usize {
        self.factors.iter().map(|f| f.a.len() + f.b.len()).sum()
    }

    /// Adds every `A·B` to the matching matrix of `params`.
    pub fn add_to(&self, params: &mut ModelParams) -> Result<()> {
        for f in &self.factors {
            let w = params.matrix_mut(f.id)?;
            if w.shape() != (f.a.rows(), f.b.cols()) {
                return Err(Error::DimensionMismatch(format!(
                    "adapter for {} is {}x{}, matrix is {:?}",
                    f.id.name(),
                    f.a.rows(),
                    f.b.cols(),
                    w.shape()
                )));
            }
            gemm(1.0, &f.a, false, &f.b, false, 1.0, w)?;
        }
        Ok(())
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.factors
            .iter_mut()
            .flat_map(|f| [f.a.as_mut_slice(), f.b.as_mut_slice()])
            .collect()
    }
}

/// Effective weights: base, then the plan's parameter mask, then the
/// adapter update.
pub fn adapted_params(
    model: &ToyTransformer,
    plan: Option<&SuppressionPlan>,
    adapter: &Adapter,
) -> Result<ModelParams> {
    let mut p = model.params().clone();
    if let Some(plan) = plan {
        plan.validate(model.config(), model.params())?;
        if let Some(mask) = &plan.param_mask {
            apply_param_mask(&mut p, mask, plan.lambda)?;
        }
    }
    adapter.add_to(&mut p)?;
    Ok(p)
}

/// The suppressed model with the adapter applied.
pub fn adapted_view<'a>(
    model: &'a ToyTransformer,
    plan: Option<&SuppressionPlan>,
    adapter: &Adapter,
) -> Result<ModelView<'a>> {
    let params = adapted_params(model, plan, adapter)?;
    let n = model.config().n_layers;
    let scales = plan.map_or_else(|| crate::model::LayerScales::identity(n), |p| p.scales(n));
    ModelView::new(model.config(), Cow::Owned(params), scales)
}

/// A copy of `model` with `W ← W + A·B` for every factor.
pub fn merge_adapter(model: &ToyTransformer, adapter: &Adapter) -> Result<ToyTransformer> {
    let mut params = model.params().clone();
    adapter.add_to(&mut params)?;
    ToyTransformer::from_params(model.config().clone(), params)
}

/// Mean combined loss over `batch` and its gradient with respect to every
/// adapter factor, as `(dA, dB)` pairs in factor order.
pub fn adapter_gradient(
    model: &ToyTransformer,
    plan: Option<&SuppressionPlan>,
    adapter: &Adapter,
    batch: &[&QaExample],
    cfg: &AdaptConfig,
    step: usize,
    total: usize,
) -> Result<(LossParts, Vec<(Matrix, Matrix)>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let gamma = gamma_at(step, total, cfg)?;
    let view = adapted_view(model, plan, adapter)?;
    let mut grads = ModelParams::zeros(model.config());
    let w = 1.0 / batch.len() as f64;
    let (mut kat, mut kpo) = (0.0, 0.0);
    for ex in batch {
        let ctx = view.nll_pass(&ex.open_prompt, &ex.answer)?;
        let noctx = view.nll_pass(&ex.closed_prompt, &ex.answer)?;
        let hinge = kpo_hinge(gamma, -ctx.nll, -noctx.nll);
        // ∂hinge/∂NLL_ctx = +1 and ∂hinge/∂NLL_noctx = −1 while active.
        let active = if hinge > 0.0 { cfg.beta } else { 0.0 };
        view.backprop(&ctx, w * (cfg.alpha + active), &mut grads)?;
        view.backprop(&noctx, -w * active, &mut grads)?;
        kat += w * ctx.nll;
        kpo += w * hinge;
    }
    let parts = LossParts {
        kat,
        kpo,
        gamma,
        combined: cfg.alpha * kat + cfg.beta * kpo,
    };
    if !parts.combined.is_finite() {
        return Err(Error::NonFinite(format!(
            "adapter loss at step {step}: kat {kat}, kpo {kpo}"
        )));
    }
    let factor_grads = adapter
        .factors
        .iter()
        .map(|f| {
            let dw = grads.matrix(f.id)?;
            let mut da = Matrix::zeros(f.a.rows(), f.a.cols());
            gemm(1.0, dw, false, &f.b, true, 0.0, &mut da)?;
            let mut db = Matrix::zeros(f.b.rows(), f.b.cols());
            gemm(1.0, &f.a, true, dw, false, 0.0, &mut db)?;
            Ok((da, db))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, factor_grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptLogRow {
    pub step: usize,
    pub kat_loss: f64,
    pub kpo_loss: f64,
    pub gamma: f64,
    pub combined: f64,
}

/// Trains a fresh adapter on the model seen through `plan`. Only the
/// adapter factors change; the base weights and the plan stay fixed.
pub fn train_adapter(
    model: &ToyTransformer,
    plan: Option<&SuppressionPlan>,
    dataset: &[QaExample],
    cfg: &AdaptConfig,
) -> Result<(Adapter, Vec<AdaptLogRow>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let targets = adapter_targets(model.config().n_layers, plan);
    let mut adapter = Adapter::new(model, &targets, cfg.rank, cfg.seed)?;
    let mut adam = Adam::new(adapter.num_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let (parts, grads) = adapter_gradient(model, plan, &adapter, &batch, cfg, step, cfg.steps)?;
        let flat: Vec<&[f64]> = grads
            .iter()
            .flat_map(|(da, db)| [da.as_slice(), db.as_slice()])
            .collect();
        adam.step(adapter.slices_mut(), flat);
        if step % 50 == 0 {
            debug!(
                "adapt step {step}: kat {:.4} kpo {:.4} gamma {:.2}",
                parts.kat, parts.kpo, parts.gamma
            );
        }
        log.push(AdaptLogRow {
            step,
            kat_loss: parts.kat,
            kpo_loss: parts.kpo,
            gamma: parts.gamma,
            combined: parts.combined,
        });
    }
    Ok((adapter, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterExtra {
    rank: usize,
    targets: Vec<String>,
    plan: Option<SuppressionPlan>,
}

/// Saves the adapter (and the plan it was trained under) in the checkpoint
/// container with kind `"adapter"`.
pub fn save_adapter(
    path: &Path,
    model: &ToyTransformer,
    adapter: &Adapter,
    plan: Option<&SuppressionPlan>,
    meta: &TrainingMeta,
) -> Result<()> {
    let extra = AdapterExtra {
        rank: adapter.rank,
        targets: adapter.factors.iter().map(|f| f.id.name()).collect(),
        plan: plan.cloned(),
    };
    let mut tensors = Vec::new();
    for f in &adapter.factors {
        let name = f.id.name();
        tensors.push((
            TensorInfo {
                name: format!("{name}.lora_a"),
                shape: f.a.shape(),
            },
            f.a.as_slice(),
        ));
        tensors.push((
            TensorInfo {
                name: format!("{name}.lora_b"),
                shape: f.b.shape(),
            },
            f.b.as_slice(),
        ));
    }
    write_container(
        path,
        "adapter",
        model.config(),
        serde_json::to_value(extra)?,
        &tensors,
        meta,
    )
}

pub fn load_adapter(
    path: &Path,
    model: &ToyTransformer,
) -> Result<(Adapter, Option<SuppressionPlan>, TrainingMeta)> {
    let c = read_container(path)?;
    if c.manifest.kind != "adapter" {
        return Err(Error::Checkpoint(format!(
            "expected an adapter checkpoint, found kind {:?}",
            c.manifest.kind
        )));
    }
    if &c.manifest.model != model.config() {
        return Err(Error::Checkpoint(
            "adapter was trained for a different model shape".into(),
        ));
    }
    let extra: AdapterExtra = serde_json::from_value(c.manifest.extra.clone())
        .map_err(|e| Error::Checkpoint(format!("adapter settings: {e}")))?;
    let factors = extra
        .targets
        .iter()
        .map(|name| {
            let id = MatrixId::parse(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown adapter target {name:?}")))?;
            let (rows, cols) = model.params().matrix(id)?.shape();
            let get = |suffix: &str, shape: (usize, usize)| -> Result<Matrix> {
                let key = format!("{name}.{suffix}");
                let (e, data) = c
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if e.shape != [shape.0, shape.1] {
                    return Err(Error::Checkpoint(format!("tensor {key} has shape {:?}", e.shape)));
                }
                Matrix::from_vec(shape.0, shape.1, data.to_vec())
            };
            Ok(LowRankFactor {
                id,
                a: get("lora_a", (rows, extra.rank))?,
                b: get("lora_b", (extra.rank, cols))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Adapter {
            rank: extra.rank,
            factors,
        },
        extra.plan,
        c.manifest.metadata,
    ))
}
