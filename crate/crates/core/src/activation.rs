//! Activation ratios, faithful-vs-unfaithful activation gaps, per-layer
//! correlation with unfaithfulness, and layer selection.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, ModelView};
use crate::numerics::{mean, pearson_corr, perm_pvalue};
use crate::vocab::TokenId;

/// Fraction of strictly positive coefficients.
pub fn position_ratio(coefficients: &[f64]) -> Result<f64> {
    if coefficients.is_empty() {
        return Err(Error::EmptyInput);
    }
    let active = coefficients.iter().filter(|a| **a > 0.0).count();
    Ok(active as f64 / coefficients.len() as f64)
}

/// Mean activation ratio of `layer` over the positions in `span`.
pub fn response_ratio(trace: &ActivationTrace, layer: usize, span: Range<usize>) -> Result<f64> {
    if span.is_empty() {
        return Err(Error::InvalidArgument("empty response span".into()));
    }
    if layer >= trace.n_layers() {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: trace.n_layers(),
        });
    }
    if span.end > trace.n_positions() {
        return Err(Error::IndexOutOfRange {
            index: span.end - 1,
            len: trace.n_positions(),
        });
    }
    mean(&trace.ratios(layer)[span])
}

/// Response-level ratio of every layer for `response` generated after
/// `prompt`: one traced forward pass over the concatenation, averaged over
/// the response positions only.
pub fn response_ratios(view: &ModelView<'_>, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::InvalidArgument("empty response".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(response);
    let trace = view.forward(&seq, true)?.trace.expect("trace was requested");
    let span = prompt.len()..seq.len();
    (0..trace.n_layers())
        .map(|l| response_ratio(&trace, l, span.clone()))
        .collect()
}

/// Per-layer activation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub mean_ratio_unfaithful: f64,
    pub mean_ratio_faithful: f64,
    /// Unfaithful mean minus faithful mean.
    pub gap: f64,
    /// `None` when the correlation is undefined (constant ratios).
    pub pcc: Option<f64>,
    pub p_value: Option<f64>,
}

/// Activation gap per layer. `unfaithful[l]` and `faithful[l]` hold the
/// response-level ratios of layer `l` over each subset.
pub fn activation_gap(unfaithful: &[Vec<f64>], faithful: &[Vec<f64>]) -> Result<Vec<LayerStats>> {
    if unfaithful.len() != faithful.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} unfaithful layers vs {} faithful layers",
            unfaithful.len(),
            faithful.len()
        )));
    }
    unfaithful
        .iter()
        .zip(faithful)
        .enumerate()
        .map(|(layer, (u, f))| {
            if u.is_empty() || f.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer}: both subsets must be non-empty"
                )));
            }
            let mu = mean(u)?;
            let mf = mean(f)?;
            Ok(LayerStats {
                layer,
                mean_ratio_unfaithful: mu,
                mean_ratio_faithful: mf,
                gap: mu - mf,
                pcc: None,
                p_value: None,
            })
        })
        .collect()
}

/// Correlation of each layer's ratio with the unfaithfulness indicator
/// `1 − y_f`, with a permutation p-value.
///
/// `ratios[i][l]` is instance `i`'s ratio at layer `l`; `faithful[i]` is
/// its label. Layers whose ratios are constant yield `(None, None)`.
pub fn layer_pcc(
    ratios: &[Vec<f64>],
    faithful: &[bool],
    n_perm: usize,
    seed: u64,
) -> Result<Vec<(Option<f64>, Option<f64>)>> {
    if ratios.len() != faithful.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ratio rows for {} labels",
            ratios.len(),
            faithful.len()
        )));
    }
    if ratios.len() < 2 {
        return Err(Error::InvalidArgument("need at least two instances".into()));
    }
    if faithful.iter().all(|f| *f) || faithful.iter().all(|f| !*f) {
        return Err(Error::UndefinedCorrelation(
            "labels contain a single class".into(),
        ));
    }
    let n_layers = ratios[0].len();
    if ratios.iter().any(|r| r.len() != n_layers) {
        return Err(Error::DimensionMismatch("ragged ratio rows".into()));
    }
    let unfaithful: Vec<bool> = faithful.iter().map(|f| !f).collect();
    let indicator: Vec<f64> = unfaithful.iter().map(|&u| u as u8 as f64).collect();
    (0..n_layers)
        .map(|l| {
            let x: Vec<f64> = ratios.iter().map(|r| r[l]).collect();
            match pearson_corr(&x, &indicator) {
                Ok(r) => {
                    let p = perm_pvalue(&x, &unfaithful, n_perm, seed.wrapping_add(l as u64))?;
                    Ok((Some(r), Some(p)))
                }
                Err(Error::ZeroVariance) => Ok((None, None)),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Gap and correlation statistics for every layer from per-instance ratios.
pub fn layer_statistics(
    ratios: &[Vec<f64>],
    faithful: &[bool],
    n_perm: usize,
    seed: u64,
) -> Result<Vec<LayerStats>> {
    let n_layers = ratios.first().map_or(0, Vec::len);
    let mut by_layer_u = vec![Vec::new(); n_layers];
    let mut by_layer_f = vec![Vec::new(); n_layers];
    for (r, &f) in ratios.iter().zip(faithful) {
        let bucket = if f { &mut by_layer_f } else { &mut by_layer_u };
        for (l, v) in r.iter().enumerate() {
            bucket[l].push(*v);
        }
    }
    let mut stats = activation_gap(&by_layer_u, &by_layer_f)?;
    for (s, (pcc, p)) in stats.iter_mut().zip(layer_pcc(ratios, faithful, n_perm, seed)?) {
        s.pcc = pcc;
        s.p_value = p;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Top-N layers by activation gap.
    UaGap,
    Bottom,
    Middle,
    Random,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ua_gap" => Ok(Self::UaGap),
            "bottom" => Ok(Self::Bottom),
            "middle" => Ok(Self::Middle),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: SelectionStrategy,
    pub n: usize,
    /// Selected layer indices, ascending.
    pub layers: Vec<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Chooses which layers to suppress.
///
/// `ua_gap` ranks by gap, largest first, ties to the lower index. `middle`
/// takes the `n` layers starting at `⌊L/2⌋ − ⌊n/2⌋`. `random` samples
/// without replacement from a ChaCha8 stream seeded by `seed`. A request
/// larger than the layer count is clamped and the clamp is noted in
/// `warning`.
pub fn select_layers(
    stats: &[LayerStats],
    n: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<SelectionResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let n_layers = stats.len();
    if n_layers == 0 {
        return Err(Error::EmptyInput);
    }
    let warning =
        (n > n_layers).then(|| format!("requested {n} layers but the model has {n_layers}; clamped"));
    let k = n.min(n_layers);
    let mut layers: Vec<usize> = match strategy {
        SelectionStrategy::UaGap => {
            let mut order: Vec<usize> = (0..n_layers).collect();
            // Stable sort keeps lower indices first among equal gaps.
            order.sort_by(|&a, &b| stats[b].gap.total_cmp(&stats[a].gap));
            order.truncate(k);
            order.into_iter().map(|i| stats[i].layer).collect()
        }
        SelectionStrategy::Bottom => (0..k).map(|i| stats[i].layer).collect(),
        SelectionStrategy::Middle => {
            let start = (n_layers / 2).saturating_sub(k / 2).min(n_layers - k);
            (start..start + k).map(|i| stats[i].layer).collect()
        }
        SelectionStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n_layers, k)
                .into_iter()
                .map(|i| stats[i].layer)
                .collect()
        }
    };
    layers.sort_unstable();
    Ok(SelectionResult {
        strategy,
        n,
        layers,
        seed,
        warning,
    })
}
