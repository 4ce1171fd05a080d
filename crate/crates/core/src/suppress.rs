//! Suppression plans: scaling FFN, attention, whole-block or individual
//! parameter contributions by λ at inference time, plus SNIP-style
//! parameter saliency and the λ intervention sweep.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    LayerScales, MatrixId, MatrixKind, ModelConfig, ModelParams, ModelView, PromptTarget, ToyTransformer,
};

/// λ grid used by the intervention sweep unless overridden.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuppressionKind {
    /// Scale the FFN activation coefficients.
    Ffn,
    /// Scale the attention output.
    Mha,
    /// Scale the whole residual contribution of the block.
    Layer,
    /// Scale individual FFN weights chosen by saliency.
    Parameter,
}

impl SuppressionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ffn => "ffn",
            Self::Mha => "mha",
            Self::Layer => "layer",
            Self::Parameter => "parameter",
        }
    }
}

impl std::str::FromStr for SuppressionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(Self::Ffn),
            "mha" => Ok(Self::Mha),
            "layer" => Ok(Self::Layer),
            "parameter" => Ok(Self::Parameter),
            other => Err(Error::InvalidArgument(format!(
                "unknown suppression kind {other:?}"
            ))),
        }
    }
}

/// One scalar weight: tensor name plus row-major flat index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamMaskEntry {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionPlan {
    pub kind: SuppressionKind,
    /// Target layers; empty for parameter plans.
    pub layers: Vec<usize>,
    pub lambda: f64,
    /// Present exactly when `kind` is `parameter`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_mask: Option<Vec<ParamMaskEntry>>,
}

impl SuppressionPlan {
    /// A layer-targeted plan (`ffn`, `mha` or `layer`).
    pub fn new(kind: SuppressionKind, layers: Vec<usize>, lambda: f64) -> Result<Self> {
        let plan = Self {
            kind,
            layers,
            lambda,
            param_mask: None,
        };
        plan.check_shape()?;
        Ok(plan)
    }

    pub fn ffn(layers: Vec<usize>, lambda: f64) -> Result<Self> {
        Self::new(SuppressionKind::Ffn, layers, lambda)
    }

    pub fn parameter(mask: Vec<ParamMaskEntry>, lambda: f64) -> Result<Self> {
        let plan = Self {
            kind: SuppressionKind::Parameter,
            layers: Vec::new(),
            lambda,
            param_mask: Some(mask),
        };
        plan.check_shape()?;
        Ok(plan)
    }

    fn check_shape(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        match (self.kind, &self.param_mask) {
            (SuppressionKind::Parameter, None) => Err(Error::InvalidArgument(
                "parameter plans need a parameter mask".into(),
            )),
            (SuppressionKind::Parameter, Some(_)) if !self.layers.is_empty() => Err(Error::InvalidArgument(
                "parameter plans select weights, not layers".into(),
            )),
            (SuppressionKind::Parameter, Some(_)) => Ok(()),
            (kind, Some(_)) => Err(Error::InvalidArgument(format!(
                "a parameter mask is only valid for parameter plans, not {}",
                kind.as_str()
            ))),
            (_, None) => Ok(()),
        }
    }

    /// Checks the plan against a model: λ, layer indices, mask names and
    /// indices.
    pub fn validate(&self, config: &ModelConfig, params: &ModelParams) -> Result<()> {
        self.check_shape()?;
        if let Some(&l) = self.layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: config.n_layers,
            });
        }
        for e in self.param_mask.iter().flatten() {
            let t = params
                .tensor(&e.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {:?}", e.name)))?;
            if e.index >= t.len() {
                return Err(Error::IndexOutOfRange {
                    index: e.index,
                    len: t.len(),
                });
            }
        }
        Ok(())
    }

    /// Layer multipliers implied by the plan. Parameter plans leave every
    /// scale at 1.
    pub fn scales(&self, n_layers: usize) -> LayerScales {
        let mut s = LayerScales::identity(n_layers);
        let target = match self.kind {
            SuppressionKind::Ffn => &mut s.ffn,
            SuppressionKind::Mha => &mut s.attn,
            SuppressionKind::Layer => &mut s.block,
            SuppressionKind::Parameter => return s,
        };
        for &l in &self.layers {
            target[l] = self.lambda;
        }
        s
    }

    /// Matrices whose contribution the plan scales. An adapter must leave
    /// these alone or it could undo the suppression.
    pub fn suppressed_matrices(&self) -> BTreeSet<MatrixId> {
        let kinds: &[MatrixKind] = match self.kind {
            SuppressionKind::Ffn => &MatrixKind::FFN,
            SuppressionKind::Mha => &MatrixKind::ATTENTION,
            SuppressionKind::Layer => &MatrixKind::ALL,
            SuppressionKind::Parameter => {
                return self
                    .param_mask
                    .iter()
                    .flatten()
                    .filter_map(|e| MatrixId::parse(&e.name))
                    .collect();
            }
        };
        self.layers
            .iter()
            .flat_map(|&layer| kinds.iter().map(move |&kind| MatrixId { layer, kind }))
            .collect()
    }
}

/// Multiplies the masked weights of `params` by `lambda`.
pub fn apply_param_mask(params: &mut ModelParams, mask: &[ParamMaskEntry], lambda: f64) -> Result<()> {
    for e in mask {
        let t = params
            .tensor_mut(&e.name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {:?}", e.name)))?;
        let len = t.len();
        let v = t
            .get_mut(e.index)
            .ok_or(Error::IndexOutOfRange { index: e.index, len })?;
        *v *= lambda;
    }
    Ok(())
}

/// The model as seen through `plan`. Layer-targeted plans borrow the base
/// weights; parameter plans materialize a masked copy.
pub fn apply_plan<'a>(model: &'a ToyTransformer, plan: &SuppressionPlan) -> Result<ModelView<'a>> {
    plan.validate(model.config(), model.params())?;
    let scales = plan.scales(model.config().n_layers);
    let params = match &plan.param_mask {
        Some(mask) => {
            let mut p = model.params().clone();
            apply_param_mask(&mut p, mask, plan.lambda)?;
            Cow::Owned(p)
        }
        None => Cow::Borrowed(model.params()),
    };
    ModelView::new(model.config(), params, scales)
}

/// `|w · ∂L/∂w|` for every FFN weight of `layers`, where `L` is the mean
/// NLL over `sample`. Entries come in canonical tensor order.
pub fn snip_scores(
    model: &ToyTransformer,
    sample: &[PromptTarget],
    layers: &[usize],
) -> Result<Vec<(ParamMaskEntry, f64)>> {
    if sample.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_layers = model.config().n_layers;
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::IndexOutOfRange {
            index: l,
            len: n_layers,
        });
    }
    let view = model.view();
    let mut grads = ModelParams::zeros(model.config());
    let w = 1.0 / sample.len() as f64;
    for item in sample {
        view.sequence_nll_grad(&item.prompt, &item.target, w, &mut grads)?;
    }
    let mut layer_set: Vec<usize> = layers.to_vec();
    layer_set.sort_unstable();
    layer_set.dedup();
    let mut out = Vec::new();
    for layer in layer_set {
        for kind in MatrixKind::FFN {
            let id = MatrixId { layer, kind };
            let name = id.name();
            let wts = model.params().matrix(id)?.as_slice();
            let g = grads.matrix(id)?.as_slice();
            out.extend(wts.iter().zip(g).enumerate().map(|(index, (w, g))| {
                (
                    ParamMaskEntry {
                        name: name.clone(),
                        index,
                    },
                    (w * g).abs(),
                )
            }));
        }
    }
    Ok(out)
}

fn saliency_order(a: &(ParamMaskEntry, f64), b: &(ParamMaskEntry, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// The `top_k` most salient FFN weights of `layers`. Ties are broken by
/// tensor name, then flat index; `top_k` beyond the candidate count takes
/// every candidate. The returned mask is in rank order.
pub fn snip_saliency(
    model: &ToyTransformer,
    sample: &[PromptTarget],
    layers: &[usize],
    top_k: usize,
) -> Result<Vec<ParamMaskEntry>> {
    let mut scores = snip_scores(model, sample, layers)?;
    let k = top_k.min(scores.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scores.len() {
        scores.select_nth_unstable_by(k - 1, saliency_order);
        scores.truncate(k);
    }
    scores.sort_unstable_by(saliency_order);
    Ok(scores.into_iter().map(|(e, _)| e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub lambda: f64,
    pub nll_unfaithful: f64,
    pub nll_faithful: f64,
}

fn mean_nll(view: &ModelView<'_>, items: &[PromptTarget]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        total += view.sequence_nll(&item.prompt, &item.target)?;
    }
    Ok(total / items.len() as f64)
}

/// Mean NLL of the parametric answers over the unfaithful and faithful
/// subsets with the FFNs of `layers` scaled by each λ.
pub fn intervention_sweep(
    model: &ToyTransformer,
    unfaithful: &[PromptTarget],
    faithful: &[PromptTarget],
    layers: &[usize],
    lambdas: &[f64],
) -> Result<Vec<InterventionRow>> {
    if unfaithful.is_empty() || faithful.is_empty() {
        return Err(Error::InvalidArgument(
            "both faithful and unfaithful subsets must be non-empty".into(),
        ));
    }
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let plan = SuppressionPlan::ffn(layers.to_vec(), lambda)?;
            let view = apply_plan(model, &plan)?;
            Ok(InterventionRow {
                lambda,
                nll_unfaithful: mean_nll(&view, unfaithful)?,
                nll_faithful: mean_nll(&view, faithful)?,
            })
        })
        .collect()
}
