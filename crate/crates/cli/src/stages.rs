//! The pipeline commands. Each reads its inputs from the output directory,
//! verifies they are current, and writes its artifacts plus a stage record.

use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::info;
use pmlab_core::activation::{layer_statistics, response_ratios, select_layers, LayerStats, SelectionResult};
use pmlab_core::adapt::{
    adapted_view, load_adapter, save_adapter, train_adapter, AdaptLogRow, Adapter, QaExample,
};
use pmlab_core::dataqa::{
    build_benchmark, build_corpus, fact_tokenizer, gen_factbase, normalize_answer, read_jsonl,
    split_train_eval, write_jsonl, Benchmark, BenchmarkConfig, Fact, OpenBookForms, QAInstance,
};
use pmlab_core::evalkit::{evaluate, DecodeConfig, EvalReport};
use pmlab_core::model::{
    init_model, load_checkpoint, save_checkpoint, train_lm, LmTrainConfig, ModelView, PromptTarget,
    ToyTransformer, TrainingMeta,
};
use pmlab_core::suppress::{intervention_sweep, snip_saliency, SuppressionKind, SuppressionPlan};
use pmlab_core::vocab::{Tokenizer, EOS_ID};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    check_stage, check_upstream, csv_bytes, fmt_f64, fmt_opt, json_bytes, read_csv, Stage, StageWriter,
};
use crate::config::{sub_seed, ExperimentConfig};
use crate::error::CliError;

pub const MODEL_FILE: &str = "model.ckpt";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";
pub const LAYER_STATS_FILE: &str = "layer_stats.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const ADAPTER_FILE: &str = "adapter.ckpt";

/// Fact base and vocabulary, both pure functions of the config.
pub struct World {
    pub tok: Tokenizer,
    pub facts: Vec<Fact>,
}

impl World {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let d = &cfg.data;
        let tok = fact_tokenizer(d.n_entities).map_err(|e| CliError::Config(e.to_string()))?;
        let facts = gen_factbase(d.n_facts, d.n_entities, sub_seed(cfg.seed, "factbase"))
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self { tok, facts })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactHit {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub prediction: String,
    pub hit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n_facts: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub facts: Vec<FactHit>,
}

/// Greedy closed-book exact match over the fact base.
pub fn closed_book_accuracy(view: &ModelView<'_>, world: &World) -> Result<AccuracyReport, CliError> {
    let mut facts = Vec::with_capacity(world.facts.len());
    for f in &world.facts {
        let prompt = pmlab_core::dataqa::closed_prompt(&world.tok, &f.question())?;
        let prediction = world.tok.decode(&view.sample(&prompt, 4, 0.0, 0)?);
        let hit = normalize_answer(&prediction) == normalize_answer(&f.object);
        facts.push(FactHit {
            subject: f.subject.clone(),
            relation: f.relation.clone(),
            object: f.object.clone(),
            prediction,
            hit,
        });
    }
    let hits = facts.iter().filter(|f| f.hit).count();
    Ok(AccuracyReport {
        n_facts: facts.len(),
        hits,
        accuracy: hits as f64 / facts.len() as f64,
        facts,
    })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<AccuracyReport, CliError> {
    let world = World::new(cfg)?;
    let open_book = OpenBookForms {
        distractor_rate: cfg.data.distractor_rate,
        n_entities: cfg.data.n_entities,
        seed: sub_seed(cfg.seed, "corpus"),
    };
    let corpus = build_corpus(
        &world.facts,
        &world.tok,
        cfg.data.open_book_pretraining.then_some(&open_book),
    )?;
    let mut model =
        init_model(cfg.model_config(world.tok.len())).map_err(|e| CliError::Config(e.to_string()))?;
    info!(
        "pretraining on {} sequences for {} steps",
        corpus.len(),
        cfg.pretrain.steps
    );
    let log = train_lm(
        &mut model,
        &corpus,
        &LmTrainConfig {
            steps: cfg.pretrain.steps,
            lr: cfg.pretrain.lr,
            batch: cfg.pretrain.batch,
            seed: sub_seed(cfg.seed, "pretrain"),
        },
    )?;
    let acc = closed_book_accuracy(&model.view(), &world)?;
    info!("closed-book exact match {}/{}", acc.hits, acc.n_facts);

    let mut w = StageWriter::new(cfg, Stage::Pretrain)?;
    let meta = TrainingMeta {
        step_count: cfg.pretrain.steps,
        seed: cfg.seed,
        losses: log.losses.clone(),
        config_hash: Some(cfg.hash()),
    };
    save_checkpoint(&model, &w.path(MODEL_FILE), &meta)?;
    w.record(MODEL_FILE)?;
    let rows: Vec<Vec<String>> = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), fmt_f64(*l)])
        .collect();
    w.write("pretrain_log.csv", &csv_bytes(cfg, &["step", "loss"], &rows)?)?;
    w.write("pretrain_accuracy.json", &json_bytes(cfg, &acc)?)?;
    w.finish(Stage::Pretrain)?;
    Ok(acc)
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<ToyTransformer, CliError> {
    let (model, _) = load_checkpoint(&cfg.out_dir().join(MODEL_FILE))?;
    Ok(model)
}

pub fn cmd_build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark, CliError> {
    check_upstream(cfg, Stage::Benchmark)?;
    let world = World::new(cfg)?;
    let model = load_model(cfg)?;
    let bench = build_benchmark(
        &model.view(),
        &world.tok,
        &world.facts,
        cfg.data.n_entities,
        &BenchmarkConfig {
            counterfactual_rate: cfg.data.counterfactual_rate,
            elicit: cfg.elicitation.clone(),
        },
        sub_seed(cfg.seed, "benchmark"),
    )?;
    let s = &bench.stats;
    info!(
        "benchmark: {} facts, {} retained ({} faithful, {} unfaithful)",
        s.facts, s.retained, s.faithful, s.unfaithful
    );
    let mut w = StageWriter::new(cfg, Stage::Benchmark)?;
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &bench.instances)?;
    w.write(BENCHMARK_FILE, &jsonl)?;
    let stages = [
        ("facts", s.facts),
        ("elicited", s.elicited),
        ("retained", s.retained),
        ("faithful", s.faithful),
        ("unfaithful", s.unfaithful),
        ("counterfactual_contexts", s.counterfactual_contexts),
    ];
    let rows: Vec<Vec<String>> = stages
        .iter()
        .map(|(n, c)| vec![n.to_string(), c.to_string()])
        .collect();
    w.write(
        "benchmark_stages.csv",
        &csv_bytes(cfg, &["stage", "count"], &rows)?,
    )?;
    let rows: Vec<Vec<String>> = bench
        .frequency_buckets()
        .into_iter()
        .map(|(f, a, b)| vec![f.to_string(), a.to_string(), b.to_string()])
        .collect();
    w.write(
        "benchmark_buckets.csv",
        &csv_bytes(cfg, &["parametric_freq", "faithful", "unfaithful"], &rows)?,
    )?;
    w.finish(Stage::Benchmark)?;
    Ok(bench)
}

pub fn load_instances(cfg: &ExperimentConfig) -> Result<Vec<QAInstance>, CliError> {
    let p = cfg.out_dir().join(BENCHMARK_FILE);
    let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub stats: Vec<LayerStats>,
    pub selection: SelectionResult,
}

pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<AnalysisOutput, CliError> {
    check_upstream(cfg, Stage::Analyze)?;
    let world = World::new(cfg)?;
    let model = load_model(cfg)?;
    let instances = load_instances(cfg)?;
    let view = model.view();
    let mut ratios = Vec::with_capacity(instances.len());
    for inst in &instances {
        let prompt = inst.open_prompt(&world.tok)?;
        let response = world.tok.encode(&inst.parametric_answer)?;
        ratios.push(response_ratios(&view, &prompt, &response)?);
    }
    let labels: Vec<bool> = instances.iter().map(|i| i.faithful).collect();
    let stats = layer_statistics(
        &ratios,
        &labels,
        cfg.analysis.n_perm,
        sub_seed(cfg.seed, "analysis"),
    )
    .map_err(|e| anyhow!("layer statistics over {} instances: {e}", instances.len()))?;
    let selection = select_layers(
        &stats,
        cfg.selection.n_layers_to_suppress,
        cfg.selection.strategy,
        sub_seed(cfg.seed, "selection"),
    )?;
    if let Some(warn) = &selection.warning {
        log::warn!("{warn}");
    }
    info!("selected layers {:?}", selection.layers);

    let mut w = StageWriter::new(cfg, Stage::Analyze)?;
    let n_layers = model.config().n_layers;
    let mut header = vec!["id".to_string(), "faithful".to_string()];
    header.extend((0..n_layers).map(|l| format!("layer_{l}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = instances
        .iter()
        .zip(&ratios)
        .map(|(inst, r)| {
            let mut row = vec![inst.id.clone(), (inst.faithful as u8).to_string()];
            row.extend(r.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    w.write("activation_ratios.csv", &csv_bytes(cfg, &header_refs, &rows)?)?;
    let rows: Vec<Vec<String>> = stats
        .iter()
        .map(|s| {
            vec![
                s.layer.to_string(),
                fmt_f64(s.mean_ratio_unfaithful),
                fmt_f64(s.mean_ratio_faithful),
                fmt_f64(s.gap),
                fmt_opt(s.pcc),
                fmt_opt(s.p_value),
            ]
        })
        .collect();
    w.write(
        LAYER_STATS_FILE,
        &csv_bytes(
            cfg,
            &[
                "layer",
                "mean_unfaithful",
                "mean_faithful",
                "gap",
                "pcc",
                "p_value",
            ],
            &rows,
        )?,
    )?;
    // Nested, since the selection carries its own seed.
    w.write(
        SELECTION_FILE,
        &json_bytes(cfg, &serde_json::json!({ "selection": selection }))?,
    )?;
    w.finish(Stage::Analyze)?;
    Ok(AnalysisOutput { stats, selection })
}

pub fn load_selection(cfg: &ExperimentConfig) -> Result<SelectionResult, CliError> {
    let p = cfg.out_dir().join(SELECTION_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text)?;
    let sel: SelectionResult =
        serde_json::from_value(v["selection"].take()).map_err(|e| anyhow!("{}: {e}", p.display()))?;
    Ok(sel)
}

/// Layer statistics as written by the analysis stage.
pub fn load_layer_stats(cfg: &ExperimentConfig) -> Result<Vec<LayerStats>, CliError> {
    let (_, rows) = read_csv(&cfg.out_dir().join(LAYER_STATS_FILE))?;
    let num = |s: &str| -> Result<f64, CliError> {
        s.parse::<f64>()
            .map_err(|e| anyhow!("bad number {s:?}: {e}").into())
    };
    let opt = |s: &str| -> Result<Option<f64>, CliError> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    rows.iter()
        .map(|r| {
            Ok(LayerStats {
                layer: r[0].parse().map_err(|e| anyhow!("bad layer {:?}: {e}", r[0]))?,
                mean_ratio_unfaithful: num(&r[1])?,
                mean_ratio_faithful: num(&r[2])?,
                gap: num(&r[3])?,
                pcc: opt(&r[4])?,
                p_value: opt(&r[5])?,
            })
        })
        .collect()
}

fn parametric_pairs(tok: &Tokenizer, insts: &[&QAInstance]) -> Result<Vec<PromptTarget>, CliError> {
    insts
        .iter()
        .map(|i| i.parametric_pair(tok).map_err(CliError::from))
        .collect()
}

pub fn cmd_intervene(cfg: &ExperimentConfig) -> Result<Vec<pmlab_core::suppress::InterventionRow>, CliError> {
    check_upstream(cfg, Stage::Intervene)?;
    let world = World::new(cfg)?;
    let model = load_model(cfg)?;
    let instances = load_instances(cfg)?;
    let selection = load_selection(cfg)?;
    let unfaithful: Vec<&QAInstance> = instances.iter().filter(|i| !i.faithful).collect();
    let faithful: Vec<&QAInstance> = instances.iter().filter(|i| i.faithful).collect();
    let rows = intervention_sweep(
        &model,
        &parametric_pairs(&world.tok, &unfaithful)?,
        &parametric_pairs(&world.tok, &faithful)?,
        &selection.layers,
        &cfg.intervention.lambda_grid,
    )?;
    let mut w = StageWriter::new(cfg, Stage::Intervene)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.lambda),
                fmt_f64(r.nll_unfaithful),
                fmt_f64(r.nll_faithful),
            ]
        })
        .collect();
    w.write(
        "intervention.csv",
        &csv_bytes(cfg, &["lambda", "nll_unfaithful", "nll_faithful"], &csv_rows)?,
    )?;
    w.finish(Stage::Intervene)?;
    Ok(rows)
}

/// Suppression plan of `kind` over `layers` at the configured λ. Parameter
/// plans score FFN weights on the first D⁻ instances.
pub fn build_plan(
    cfg: &ExperimentConfig,
    kind: SuppressionKind,
    lambda: f64,
    layers: &[usize],
    model: &ToyTransformer,
    tok: &Tokenizer,
    instances: &[QAInstance],
) -> Result<SuppressionPlan, CliError> {
    if kind != SuppressionKind::Parameter {
        return Ok(SuppressionPlan::new(kind, layers.to_vec(), lambda)?);
    }
    let unfaithful: Vec<&QAInstance> = instances
        .iter()
        .filter(|i| !i.faithful)
        .take(cfg.suppression.snip_sample)
        .collect();
    if unfaithful.is_empty() {
        return Err(anyhow!("parameter saliency needs at least one unfaithful instance").into());
    }
    let c = model.config();
    let top_k = cfg
        .suppression
        .snip_top_k
        .unwrap_or(layers.len() * c.d_ffn * c.d_model);
    let mask = snip_saliency(model, &parametric_pairs(tok, &unfaithful)?, layers, top_k)?;
    Ok(SuppressionPlan::parameter(mask, lambda)?)
}

/// The retained instances split into adapter-training and evaluation parts.
pub fn split_instances(
    cfg: &ExperimentConfig,
    instances: &[QAInstance],
) -> Result<(Vec<QAInstance>, Vec<QAInstance>), CliError> {
    Ok(split_train_eval(
        instances,
        cfg.data.eval_fraction,
        sub_seed(cfg.seed, "split"),
    )?)
}

/// Token form of an instance for adapter training; the answer ends with
/// the end-of-sequence token so the adapted model learns to stop.
pub fn qa_example(tok: &Tokenizer, inst: &QAInstance) -> Result<QaExample, CliError> {
    let mut answer = tok.encode(&inst.contextual_answer)?;
    answer.push(EOS_ID);
    Ok(QaExample {
        closed_prompt: inst.closed_prompt(tok)?,
        open_prompt: inst.open_prompt(tok)?,
        answer,
    })
}

pub fn adapt_log_csv(cfg: &ExperimentConfig, log: &[AdaptLogRow]) -> Result<Vec<u8>, CliError> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.kat_loss),
                fmt_f64(r.kpo_loss),
                fmt_f64(r.gamma),
                fmt_f64(r.combined),
            ]
        })
        .collect();
    csv_bytes(cfg, &["step", "kat_loss", "kpo_loss", "gamma", "combined"], &rows)
}

pub struct AdaptOutput {
    pub adapter: Adapter,
    pub plan: SuppressionPlan,
    pub log: Vec<AdaptLogRow>,
}

fn train_for(
    cfg: &ExperimentConfig,
    adapt: &pmlab_core::adapt::AdaptConfig,
) -> Result<AdaptOutput, CliError> {
    let world = World::new(cfg)?;
    let model = load_model(cfg)?;
    let instances = load_instances(cfg)?;
    let selection = load_selection(cfg)?;
    let plan = build_plan(
        cfg,
        cfg.suppression.kind,
        cfg.suppression.lambda,
        &selection.layers,
        &model,
        &world.tok,
        &instances,
    )?;
    let (train, _) = split_instances(cfg, &instances)?;
    if train.is_empty() {
        return Err(anyhow!("no training instances after the split").into());
    }
    let examples = train
        .iter()
        .map(|i| qa_example(&world.tok, i))
        .collect::<Result<Vec<_>, _>>()?;
    info!(
        "training adapter on {} instances for {} steps",
        examples.len(),
        adapt.steps
    );
    let (adapter, log) = train_adapter(&model, Some(&plan), &examples, adapt)?;
    Ok(AdaptOutput { adapter, plan, log })
}

pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<AdaptOutput, CliError> {
    check_upstream(cfg, Stage::Adapt)?;
    let adapt = cfg.adapt.to_config(sub_seed(cfg.seed, "adapt"));
    let out = train_for(cfg, &adapt)?;
    let model = load_model(cfg)?;
    let mut w = StageWriter::new(cfg, Stage::Adapt)?;
    let meta = TrainingMeta {
        step_count: adapt.steps,
        seed: cfg.seed,
        losses: out.log.iter().map(|r| r.combined).collect(),
        config_hash: Some(cfg.hash()),
    };
    save_adapter(
        &w.path(ADAPTER_FILE),
        &model,
        &out.adapter,
        Some(&out.plan),
        &meta,
    )?;
    w.record(ADAPTER_FILE)?;
    w.write("adapt_log.csv", &adapt_log_csv(cfg, &out.log)?)?;
    w.write("plan.json", &json_bytes(cfg, &out.plan)?)?;
    w.finish(Stage::Adapt)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Base,
    Adapted,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Base => "base",
            ModelTag::Adapted => "adapted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanTag {
    None,
    Ffn,
    Mha,
    Layer,
    Parameter,
}

impl PlanTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanTag::None => "none",
            PlanTag::Ffn => "ffn",
            PlanTag::Mha => "mha",
            PlanTag::Layer => "layer",
            PlanTag::Parameter => "parameter",
        }
    }

    pub fn kind(self) -> Option<SuppressionKind> {
        match self {
            PlanTag::None => None,
            PlanTag::Ffn => Some(SuppressionKind::Ffn),
            PlanTag::Mha => Some(SuppressionKind::Mha),
            PlanTag::Layer => Some(SuppressionKind::Layer),
            PlanTag::Parameter => Some(SuppressionKind::Parameter),
        }
    }

    pub fn from_kind(kind: SuppressionKind) -> Self {
        match kind {
            SuppressionKind::Ffn => PlanTag::Ffn,
            SuppressionKind::Mha => PlanTag::Mha,
            SuppressionKind::Layer => PlanTag::Layer,
            SuppressionKind::Parameter => PlanTag::Parameter,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggedReport {
    pub model_tag: ModelTag,
    pub plan_tag: PlanTag,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn report_csv_row(r: &TaggedReport) -> Vec<String> {
    let e = &r.report;
    vec![
        r.model_tag.as_str().to_string(),
        r.plan_tag.as_str().to_string(),
        fmt_f64(e.conr),
        fmt_f64(e.memr),
        fmt_opt(e.mr),
        fmt_f64(e.sim_to_parametric),
        fmt_f64(e.sim_to_contextual),
        fmt_f64(e.ppl_with_context),
        fmt_f64(e.ppl_without_context),
        e.n_instances.to_string(),
    ]
}

pub const REPORT_HEADER: [&str; 10] = [
    "model_tag",
    "plan_tag",
    "conr",
    "memr",
    "mr",
    "sim_parametric",
    "sim_contextual",
    "ppl_ctx",
    "ppl_noctx",
    "n",
];

/// Held-out D⁻: unfaithful instances of the evaluation split.
pub fn eval_instances(cfg: &ExperimentConfig, instances: &[QAInstance]) -> Result<Vec<QAInstance>, CliError> {
    let (_, eval) = split_instances(cfg, instances)?;
    let out: Vec<QAInstance> = eval.into_iter().filter(|i| !i.faithful).collect();
    if out.is_empty() {
        return Err(anyhow!("the evaluation split holds no unfaithful instances").into());
    }
    Ok(out)
}

fn evaluate_with(
    cfg: &ExperimentConfig,
    model: &ToyTransformer,
    plan: Option<&SuppressionPlan>,
    adapter: Option<&Adapter>,
    tok: &Tokenizer,
    eval: &[QAInstance],
) -> Result<EvalReport, CliError> {
    let view = match adapter {
        Some(a) => adapted_view(model, plan, a)?,
        None => model.view_with(plan)?,
    };
    Ok(evaluate(
        &view,
        tok,
        eval,
        &DecodeConfig {
            max_new: cfg.eval.max_new,
        },
    )?)
}

pub fn report_stem(model_tag: ModelTag, plan_tag: PlanTag) -> String {
    format!("report_{}_{}", model_tag.as_str(), plan_tag.as_str())
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    model_tag: ModelTag,
    plan_tag: PlanTag,
) -> Result<TaggedReport, CliError> {
    check_upstream(cfg, Stage::Adapt)?;
    if model_tag == ModelTag::Adapted {
        check_stage(cfg, Stage::Adapt)?;
    }
    let world = World::new(cfg)?;
    let model = load_model(cfg)?;
    let instances = load_instances(cfg)?;
    let selection = load_selection(cfg)?;
    let eval = eval_instances(cfg, &instances)?;
    let plan = plan_tag
        .kind()
        .map(|k| {
            build_plan(
                cfg,
                k,
                cfg.suppression.lambda,
                &selection.layers,
                &model,
                &world.tok,
                &instances,
            )
        })
        .transpose()?;
    let adapter = match model_tag {
        ModelTag::Base => None,
        ModelTag::Adapted => Some(load_adapter(&cfg.out_dir().join(ADAPTER_FILE), &model)?.0),
    };
    let report = evaluate_with(cfg, &model, plan.as_ref(), adapter.as_ref(), &world.tok, &eval)?;
    let tagged = TaggedReport {
        model_tag,
        plan_tag,
        report,
    };
    info!(
        "{} / {}: ConR {:.1} MemR {:.1} MR {}",
        model_tag.as_str(),
        plan_tag.as_str(),
        tagged.report.conr,
        tagged.report.memr,
        fmt_opt(tagged.report.mr)
    );
    let stem = report_stem(model_tag, plan_tag);
    let dir = cfg.out_dir();
    fs::write(dir.join(format!("{stem}.json")), json_bytes(cfg, &tagged)?)?;
    fs::write(
        dir.join(format!("{stem}.csv")),
        csv_bytes(cfg, &REPORT_HEADER, &[report_csv_row(&tagged)])?,
    )?;
    Ok(tagged)
}

pub const SWEEP_HEADER: [&str; 11] = [
    "axis",
    "lambda",
    "n_layers",
    "alpha",
    "beta",
    "conr",
    "memr",
    "mr",
    "sim_parametric",
    "sim_contextual",
    "n",
];

/// λ, N and α:β grids, one CSV row per grid point.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    check_upstream(cfg, Stage::Adapt)?;
    let world = World::new(cfg)?;
    let model = load_model(cfg)?;
    let instances = load_instances(cfg)?;
    let selection = load_selection(cfg)?;
    let stats = load_layer_stats(cfg)?;
    let eval = eval_instances(cfg, &instances)?;
    let kind = cfg.suppression.kind;
    let row = |axis: &str, lambda: f64, n: usize, ab: [f64; 2], r: &EvalReport| {
        vec![
            axis.to_string(),
            fmt_f64(lambda),
            n.to_string(),
            fmt_f64(ab[0]),
            fmt_f64(ab[1]),
            fmt_f64(r.conr),
            fmt_f64(r.memr),
            fmt_opt(r.mr),
            fmt_f64(r.sim_to_parametric),
            fmt_f64(r.sim_to_contextual),
            r.n_instances.to_string(),
        ]
    };
    let ab0 = [cfg.adapt.alpha, cfg.adapt.beta];
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambda_list {
        let plan = build_plan(
            cfg,
            kind,
            lambda,
            &selection.layers,
            &model,
            &world.tok,
            &instances,
        )?;
        let r = evaluate_with(cfg, &model, Some(&plan), None, &world.tok, &eval)?;
        rows.push(row("lambda", lambda, selection.layers.len(), ab0, &r));
    }
    for &n in &cfg.sweep.n_list {
        let sel = select_layers(&stats, n, cfg.selection.strategy, sub_seed(cfg.seed, "selection"))?;
        let plan = build_plan(
            cfg,
            kind,
            cfg.suppression.lambda,
            &sel.layers,
            &model,
            &world.tok,
            &instances,
        )?;
        let r = evaluate_with(cfg, &model, Some(&plan), None, &world.tok, &eval)?;
        rows.push(row("n_layers", cfg.suppression.lambda, sel.layers.len(), ab0, &r));
    }
    for &[alpha, beta] in &cfg.sweep.alpha_beta_list {
        let mut adapt = cfg.adapt.to_config(sub_seed(cfg.seed, "adapt"));
        adapt.alpha = alpha;
        adapt.beta = beta;
        adapt.steps = cfg.sweep.adapt_steps;
        adapt
            .validate()
            .map_err(|e| CliError::Config(format!("sweep alpha:beta {alpha}:{beta}: {e}")))?;
        let out = train_for(cfg, &adapt)?;
        let r = evaluate_with(
            cfg,
            &model,
            Some(&out.plan),
            Some(&out.adapter),
            &world.tok,
            &eval,
        )?;
        rows.push(row(
            "alpha_beta",
            cfg.suppression.lambda,
            selection.layers.len(),
            [alpha, beta],
            &r,
        ));
    }
    fs::write(
        cfg.out_dir().join("sweep.csv"),
        csv_bytes(cfg, &SWEEP_HEADER, &rows)?,
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub closed_book_accuracy: f64,
    pub retained: usize,
    pub unfaithful: usize,
    pub selected_layers: Vec<usize>,
    pub reports: Vec<TaggedReport>,
    /// Wall-clock seconds per stage; kept out of the written summary so
    /// reruns stay byte-identical.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

/// Every stage in order, then the three standard evaluations.
pub fn cmd_run_all(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let acc = cmd_pretrain(cfg)?;
    lap("pretrain");
    let bench = cmd_build_benchmark(cfg)?;
    lap("build-benchmark");
    let analysis = cmd_analyze(cfg)?;
    lap("analyze");
    cmd_intervene(cfg)?;
    lap("intervene");
    cmd_adapt(cfg)?;
    lap("adapt");
    let kind = PlanTag::from_kind(cfg.suppression.kind);
    let mut reports = Vec::new();
    for (m, p) in [
        (ModelTag::Base, PlanTag::None),
        (ModelTag::Base, kind),
        (ModelTag::Adapted, kind),
    ] {
        reports.push(cmd_evaluate(cfg, m, p)?);
    }
    lap("evaluate");
    let summary = RunSummary {
        closed_book_accuracy: acc.accuracy,
        retained: bench.stats.retained,
        unfaithful: bench.stats.unfaithful,
        selected_layers: analysis.selection.layers,
        reports,
        timings,
    };
    fs::write(cfg.out_dir().join("summary.json"), json_bytes(cfg, &summary)?)?;
    Ok(summary)
}

/// Convenience for tests and tools: the config's output directory exists
/// and holds a complete run.
pub fn has_run(dir: &Path) -> bool {
    [MODEL_FILE, BENCHMARK_FILE, SELECTION_FILE, ADAPTER_FILE]
        .iter()
        .all(|f| dir.join(f).exists())
}
