//! Output files, provenance headers, and per-stage fingerprints used to
//! detect stale upstream artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{sha256_hex, ExperimentConfig};
use crate::error::CliError;

/// Pipeline stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    Benchmark,
    Analyze,
    Intervene,
    Adapt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Benchmark => "benchmark",
            Stage::Analyze => "analyze",
            Stage::Intervene => "intervene",
            Stage::Adapt => "adapt",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Pretrain => &[],
            Stage::Benchmark => &[Stage::Pretrain],
            Stage::Analyze => &[Stage::Benchmark],
            Stage::Intervene | Stage::Adapt => &[Stage::Analyze],
        }
    }

    /// Config sections that influence this stage's outputs.
    fn inputs(self, cfg: &ExperimentConfig) -> Value {
        match self {
            Stage::Pretrain => json!({
                "seed": cfg.seed,
                "model": cfg.model,
                "facts": [cfg.data.n_facts, cfg.data.n_entities],
                "open_book_pretraining": cfg.data.open_book_pretraining,
                "distractor_rate": cfg.data.distractor_rate,
                "pretrain": cfg.pretrain,
            }),
            Stage::Benchmark => json!({
                "seed": cfg.seed,
                "counterfactual_rate": cfg.data.counterfactual_rate,
                "elicitation": cfg.elicitation,
            }),
            Stage::Analyze => json!({
                "seed": cfg.seed,
                "analysis": cfg.analysis,
                "selection": cfg.selection,
            }),
            Stage::Intervene => json!({ "intervention": cfg.intervention }),
            Stage::Adapt => json!({
                "seed": cfg.seed,
                "eval_fraction": cfg.data.eval_fraction,
                "suppression": cfg.suppression,
                "adapt": cfg.adapt,
            }),
        }
    }

    /// Fingerprint of this stage under `cfg`: its own inputs chained with
    /// the fingerprints of everything upstream.
    pub fn fingerprint(self, cfg: &ExperimentConfig) -> String {
        let up: Vec<String> = self.upstream().iter().map(|s| s.fingerprint(cfg)).collect();
        let doc = json!({ "stage": self.name(), "inputs": self.inputs(cfg), "upstream": up });
        sha256_hex(doc.to_string().as_bytes())
    }

    pub fn meta_file(self) -> String {
        format!("{}.meta.json", self.name())
    }
}

/// Provenance written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub fingerprint: String,
    pub config_hash: String,
    pub seed: u64,
    /// File name → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

/// Collects a stage's outputs and writes them plus the meta file.
pub struct StageWriter<'a> {
    dir: &'a Path,
    meta: StageMeta,
}

impl<'a> StageWriter<'a> {
    pub fn new(cfg: &'a ExperimentConfig, stage: Stage) -> Result<Self, CliError> {
        fs::create_dir_all(cfg.out_dir()).with_context(|| format!("creating {}", cfg.out_dir().display()))?;
        Ok(Self {
            dir: cfg.out_dir(),
            meta: StageMeta {
                stage: stage.name().to_string(),
                fingerprint: stage.fingerprint(cfg),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                outputs: BTreeMap::new(),
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `bytes` to `name` and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.meta.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(p)
    }

    /// Records a file some other routine already wrote.
    pub fn record(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        self.meta.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(p)
    }

    pub fn finish(self, stage: Stage) -> Result<StageMeta, CliError> {
        let p = self.dir.join(stage.meta_file());
        let mut text = serde_json::to_string_pretty(&self.meta)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(self.meta)
    }
}

/// Confirms `stage`'s artifacts in the output directory were produced under
/// the current config and have not been modified since. Missing artifacts
/// are an ordinary error; mismatches are reported as stale.
pub fn check_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<StageMeta, CliError> {
    let meta_path = cfg.out_dir().join(stage.meta_file());
    let text = fs::read_to_string(&meta_path).map_err(|e| {
        CliError::Other(anyhow::anyhow!(
            "missing {} ({e}); run the {} stage first",
            meta_path.display(),
            stage.name()
        ))
    })?;
    let meta: StageMeta = serde_json::from_str(&text).map_err(|e| CliError::Stale {
        file: meta_path.clone(),
        reason: format!("unreadable stage record: {e}"),
    })?;
    let expected = stage.fingerprint(cfg);
    if meta.fingerprint != expected {
        let primary = meta
            .outputs
            .keys()
            .next()
            .cloned()
            .unwrap_or_else(|| stage.meta_file());
        return Err(CliError::Stale {
            file: cfg.out_dir().join(primary),
            reason: format!(
                "produced by the {} stage under a different configuration (fingerprint {} != {})",
                stage.name(),
                short(&meta.fingerprint),
                short(&expected)
            ),
        });
    }
    for (name, hash) in &meta.outputs {
        let p = cfg.out_dir().join(name);
        let bytes = fs::read(&p).map_err(|e| CliError::Stale {
            file: p.clone(),
            reason: format!("recorded by the {} stage but unreadable: {e}", stage.name()),
        })?;
        if &sha256_hex(&bytes) != hash {
            return Err(CliError::Stale {
                file: p,
                reason: format!("contents changed since the {} stage wrote it", stage.name()),
            });
        }
    }
    Ok(meta)
}

/// Checks every stage `stage` depends on, transitively.
pub fn check_upstream(cfg: &ExperimentConfig, stage: Stage) -> Result<(), CliError> {
    for &up in stage.upstream() {
        check_upstream(cfg, up)?;
        check_stage(cfg, up)?;
    }
    Ok(())
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// `# config_hash=… seed=…` comment line that opens every CSV.
pub fn provenance_line(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

/// Renders rows as CSV beneath the provenance comment.
pub fn csv_bytes(cfg: &ExperimentConfig, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut buf = provenance_line(cfg).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

/// Pretty JSON with the config hash and seed as leading keys.
pub fn json_bytes<T: Serialize>(cfg: &ExperimentConfig, payload: &T) -> Result<Vec<u8>, CliError> {
    let mut obj = serde_json::Map::new();
    obj.insert("config_hash".into(), Value::String(cfg.hash()));
    obj.insert("seed".into(), json!(cfg.seed));
    match serde_json::to_value(payload)? {
        Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Reads a CSV written by [`csv_bytes`], skipping the provenance line.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}
