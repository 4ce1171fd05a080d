//! Experiment configuration: one JSON document, optionally patched with
//! `key=value` overrides, hashed for provenance.

use std::path::{Path, PathBuf};

use pmlab_core::activation::SelectionStrategy;
use pmlab_core::adapt::AdaptConfig;
use pmlab_core::dataqa::ElicitConfig;
use pmlab_core::model::ModelConfig;
use pmlab_core::suppress::{SuppressionKind, DEFAULT_LAMBDA_GRID};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            max_seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_facts: usize,
    pub n_entities: usize,
    /// Add open-book QA renderings to the memorization corpus.
    pub open_book_pretraining: bool,
    /// Share of facts that also get an open-book rendering whose context
    /// names a wrong entity while the answer stays the true object.
    pub distractor_rate: f64,
    pub counterfactual_rate: f64,
    /// Share of retained instances held out for evaluation; the rest train
    /// the adapter.
    pub eval_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_facts: 200,
            n_entities: 60,
            open_book_pretraining: true,
            distractor_rate: 0.5,
            counterfactual_rate: 0.5,
            eval_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 2500,
            lr: 3e-3,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Permutations for the correlation p-values.
    pub n_perm: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { n_perm: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub strategy: SelectionStrategy,
    pub n_layers_to_suppress: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::UaGap,
            // Half the stack; all eight leaves the adapter nothing to build on.
            n_layers_to_suppress: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuppressionSection {
    pub kind: SuppressionKind,
    pub lambda: f64,
    /// Weights masked by a parameter plan; `None` means half of the FFN
    /// weights of the selected layers.
    pub snip_top_k: Option<usize>,
    /// D⁻ instances scored for parameter saliency.
    pub snip_sample: usize,
}

impl Default for SuppressionSection {
    fn default() -> Self {
        Self {
            kind: SuppressionKind::Ffn,
            lambda: 0.0,
            snip_top_k: None,
            snip_sample: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionSection {
    pub lambda_grid: Vec<f64>,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub rank: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            alpha: d.alpha,
            beta: d.beta,
            gamma_start: d.gamma_start,
            gamma_end: d.gamma_end,
            rank: d.rank,
            lr: 3e-3,
            steps: d.steps,
            batch: d.batch,
        }
    }
}

impl AdaptSection {
    pub fn to_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma_start: self.gamma_start,
            gamma_end: self.gamma_end,
            rank: self.rank,
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_new: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambda_list: Vec<f64>,
    pub n_list: Vec<usize>,
    pub alpha_beta_list: Vec<[f64; 2]>,
    /// Adapter steps per α:β grid point.
    pub adapt_steps: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_list: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            n_list: (1..=8).collect(),
            alpha_beta_list: vec![[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]],
            adapt_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub elicitation: ElicitConfig,
    pub analysis: AnalysisSection,
    pub selection: SelectionSection,
    pub suppression: SuppressionSection,
    pub intervention: InterventionSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `dotted.key` in `doc`, creating intermediate objects.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?} goes through a non-object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {key:?} goes through a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path`, applies overrides in order, then the `--seed` and
    /// `--out` flags, and validates.
    pub fn load(
        path: &Path,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut doc: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !doc.is_object() {
            return Err(CliError::Config(format!(
                "{}: top level must be an object",
                path.display()
            )));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.paths.out_dir = o.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.n_facts == 0 || d.n_entities < 3 {
            return bad("data needs n_facts >= 1 and n_entities >= 3".into());
        }
        if ![d.counterfactual_rate, d.eval_fraction, d.distractor_rate]
            .iter()
            .all(|r| (0.0..=1.0).contains(r))
        {
            return bad("counterfactual_rate, distractor_rate and eval_fraction must lie in [0, 1]".into());
        }
        self.model_config(3)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.pretrain.batch == 0 || !(self.pretrain.lr > 0.0) {
            return bad("pretrain needs batch >= 1 and lr > 0".into());
        }
        if self.elicitation.n == 0 {
            return bad("elicitation.n must be at least 1".into());
        }
        if !(self.elicitation.temperature >= 0.0) {
            return bad("elicitation.temperature must be >= 0".into());
        }
        if self.analysis.n_perm < 100 {
            return bad("analysis.n_perm must be at least 100".into());
        }
        if self.selection.n_layers_to_suppress == 0 {
            return bad("selection.n_layers_to_suppress must be at least 1".into());
        }
        let n_layers = self.model.n_layers;
        if self.selection.n_layers_to_suppress > n_layers
            || self.sweep.n_list.iter().any(|&n| n == 0 || n > n_layers)
        {
            return bad(format!(
                "selection.n_layers_to_suppress and sweep.n_list must lie in 1..={n_layers}"
            ));
        }
        if !(self.suppression.lambda >= 0.0 && self.suppression.lambda.is_finite()) {
            return bad("suppression.lambda must be finite and >= 0".into());
        }
        if self.intervention.lambda_grid.iter().any(|l| !(*l >= 0.0))
            || self.intervention.lambda_grid.is_empty()
        {
            return bad("intervention.lambda_grid must be a non-empty list of values >= 0".into());
        }
        self.adapt
            .to_config(0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            d_ffn: m.d_ffn,
            n_heads: m.n_heads,
            vocab_size,
            max_seq_len: m.max_seq_len,
            seed: sub_seed(self.seed, "model"),
        }
    }

    /// Hash of everything except output paths, so the same experiment run
    /// into two directories carries the same provenance.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Named sub-seed: the first eight bytes (little endian) of
/// `sha256(seed_le || name)`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_patch_nested_keys() {
        let mut doc = serde_json::json!({"adapt": {"lr": 0.1}});
        apply_override(&mut doc, "adapt.lr=0.5").unwrap();
        apply_override(&mut doc, "selection.strategy=bottom").unwrap();
        assert_eq!(doc["adapt"]["lr"], 0.5);
        assert_eq!(doc["selection"]["strategy"], "bottom");
        assert!(apply_override(&mut doc, "noequals").is_err());
        assert!(apply_override(&mut doc, "adapt.lr.x=1").is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn sub_seeds_differ_by_name() {
        assert_ne!(sub_seed(0, "model"), sub_seed(0, "pretrain"));
        assert_eq!(sub_seed(3, "model"), sub_seed(3, "model"));
    }
}
