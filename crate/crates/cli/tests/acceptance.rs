//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fail.
//!
//! The default config is run twice with `run-all`: once in-process (for
//! stage timings) and once through the binary, then the artifacts of the
//! first run feed the checks that need a trained model.

use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pmlab::artifacts::read_csv;
use pmlab::stages::{self, World};
use pmlab::ExperimentConfig;
use pmlab_core::activation::{select_layers, LayerStats, SelectionStrategy};
use pmlab_core::adapt::{
    adapted_view, adapter_gradient, adapter_targets, combined_loss, kpo_hinge, AdaptConfig, Adapter,
    QaExample,
};
use pmlab_core::dataqa::{build_benchmark, BenchmarkConfig, QAInstance};
use pmlab_core::evalkit::{conr_memr, memorization_ratio};
use pmlab_core::model::{init_model, ModelConfig, ModelParams, ModelView, ToyTransformer};
use pmlab_core::numerics::{relative_error, Vector};
use pmlab_core::suppress::{SuppressionKind, SuppressionPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        vocab_size: 11,
        max_seq_len: 16,
        seed: 5,
    }
}

/// Micro model with O(1) weights so every nonlinearity is exercised.
fn rough_micro_model(seed: u64) -> ToyTransformer {
    let cfg = micro_config();
    let mut params = ModelParams::zeros(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.tensors().into_iter().map(|(i, _)| i.name).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let base = if name.ends_with("norm") { 1.0 } else { 0.0 };
        for v in t.iter_mut() {
            *v = base + rng.random_range(-0.8..0.8);
        }
    }
    ToyTransformer::from_params(cfg, params).unwrap()
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn factor_slot(a: &mut Adapter, k: usize, b_side: bool, i: usize) -> &mut f64 {
    let f = &mut a.factors[k];
    if b_side {
        &mut f.b.as_mut_slice()[i]
    } else {
        &mut f.a.as_mut_slice()[i]
    }
}

fn ac1() -> Check {
    let t0 = Instant::now();
    let h = 1e-5;
    let model = rough_micro_model(21);
    let view = model.view();
    let prompt = [1u32, 4, 7, 3];
    let target = [9u32, 5, 2];
    let mut grads = ModelParams::zeros(model.config());
    view.sequence_nll_grad(&prompt, &target, 1.0, &mut grads)
        .map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, g)| g.to_vec()).collect();
    let names: Vec<String> = grads.tensors().into_iter().map(|(i, _)| i.name).collect();
    let mut worst = (0.0f64, String::new());
    for (t, name) in names.iter().enumerate() {
        let mut probe = model.params().clone();
        let numeric: Vec<f64> = (0..analytic[t].len())
            .map(|i| {
                let orig = probe.tensors()[t].1[i];
                let d = central_diff(
                    |x| {
                        probe.tensors_mut()[t][i] = x;
                        let v = ModelView::new(model.config(), Cow::Borrowed(&probe), view.scales().clone())
                            .unwrap();
                        v.sequence_nll(&prompt, &target).unwrap()
                    },
                    orig,
                    h,
                );
                probe.tensors_mut()[t][i] = orig;
                d
            })
            .collect();
        let err = relative_error(&analytic[t], &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }

    // Adapter factors, with B moved off zero so dA is informative and one
    // FFN suppressed so the target set is the reduced one.
    let plan = SuppressionPlan::ffn(vec![1], 0.5).unwrap();
    let targets = adapter_targets(2, Some(&plan));
    let mut adapter = Adapter::new(&model, &targets, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for f in &mut adapter.factors {
        for v in f.b.as_mut_slice() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let examples = [
        QaExample {
            closed_prompt: vec![1, 6, 3],
            open_prompt: vec![1, 8, 4, 6, 3],
            answer: vec![4, 2],
        },
        QaExample {
            closed_prompt: vec![1, 7, 3],
            open_prompt: vec![1, 8, 9, 7, 3],
            answer: vec![9, 2],
        },
    ];
    let batch: Vec<&QaExample> = examples.iter().collect();
    let cfg = AdaptConfig {
        gamma_start: 0.5,
        gamma_end: 0.5,
        ..AdaptConfig::default()
    };
    let loss = |a: &Adapter| -> f64 {
        let v = adapted_view(&model, Some(&plan), a).unwrap();
        batch
            .iter()
            .map(|ex| combined_loss(&v, ex, &cfg, 0, 1).unwrap().combined)
            .sum::<f64>()
            / batch.len() as f64
    };
    let (_, fgrads) =
        adapter_gradient(&model, Some(&plan), &adapter, &batch, &cfg, 0, 1).map_err(|e| e.to_string())?;
    let mut probe = adapter.clone();
    for (k, (da, db)) in fgrads.iter().enumerate() {
        for (which, analytic) in [("lora_a", da.as_slice()), ("lora_b", db.as_slice())] {
            let b_side = which == "lora_b";
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|i| {
                    let orig = *factor_slot(&mut probe, k, b_side, i);
                    let d = central_diff(
                        |x| {
                            *factor_slot(&mut probe, k, b_side, i) = x;
                            loss(&probe)
                        },
                        orig,
                        h,
                    );
                    *factor_slot(&mut probe, k, b_side, i) = orig;
                    d
                })
                .collect();
            let err = relative_error(analytic, &numeric);
            if err > worst.0 {
                worst = (err, format!("{}.{which}", adapter.factors[k].id.name()));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        worst.0 <= 1e-4 && secs < 30.0,
        format!("worst relative error {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn ac2() -> Check {
    let model = init_model(ModelConfig::with_vocab(80)).map_err(|e| e.to_string())?;
    let c = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let layer = i % c.n_layers;
        let x = Vector::new((0..c.d_model).map(|_| rng.random_range(-3.0..3.0)).collect());
        let matrix_form = model.ffn_forward(&x, layer, 1.0).map_err(|e| e.to_string())?;
        let (_, recon) = model.ffn_decompose(&x, layer).map_err(|e| e.to_string())?;
        for (a, b) in matrix_form.as_slice().iter().zip(recon.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(
        worst <= 1e-9,
        format!("max |matrix - decomposed| = {worst:.2e} over 1000 inputs"),
    )
}

fn ac3() -> Check {
    let model = init_model(ModelConfig::with_vocab(80)).map_err(|e| e.to_string())?;
    let n = model.config().n_layers;
    let tokens: Vec<u32> = vec![1, 20, 30, 40, 11, 12, 70, 3];
    let base = model.view().forward(&tokens, true).map_err(|e| e.to_string())?;
    let layers: Vec<usize> = (0..n).step_by(2).collect();
    for kind in [SuppressionKind::Ffn, SuppressionKind::Mha, SuppressionKind::Layer] {
        let plan = SuppressionPlan::new(kind, layers.clone(), 1.0).unwrap();
        let out = model
            .forward(&tokens, Some(&plan), false)
            .map_err(|e| e.to_string())?;
        if out.logits.as_slice() != base.logits.as_slice() {
            return Err(format!("{} plan at lambda 1 changed the logits", kind.as_str()));
        }
    }
    let mask = vec![pmlab_core::suppress::ParamMaskEntry {
        name: "layers.0.ffn.key".into(),
        index: 5,
    }];
    let plan = SuppressionPlan::parameter(mask, 1.0).unwrap();
    let out = model
        .forward(&tokens, Some(&plan), false)
        .map_err(|e| e.to_string())?;
    if out.logits.as_slice() != base.logits.as_slice() {
        return Err("parameter plan at lambda 1 changed the logits".into());
    }

    let plan = SuppressionPlan::ffn(layers.clone(), 0.0).unwrap();
    let trace = model
        .forward(&tokens, Some(&plan), true)
        .map_err(|e| e.to_string())?
        .trace
        .unwrap();
    for &l in &layers {
        if trace.ffn_output(l).as_slice().iter().any(|&v| v != 0.0) {
            return Err(format!("layer {l} FFN output nonzero at lambda 0"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let layer = rng.random_range(0..n);
        let lambda: f64 = rng.random_range(0.0..2.0);
        let x = Vector::new(
            (0..model.config().d_model)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        );
        let one = model.ffn_forward(&x, layer, 1.0).unwrap();
        let scaled = model.ffn_forward(&x, layer, lambda).unwrap();
        let expect: Vec<f64> = one.as_slice().iter().map(|v| v * lambda).collect();
        if scaled.as_slice() != expect.as_slice() {
            return Err(format!("FFN output not exactly linear at lambda {lambda}"));
        }
    }
    Ok(
        "lambda 1 bit-identical for all four kinds; lambda 0 zeroes FFN output; exact linearity on 200 draws"
            .into(),
    )
}

fn ac4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0;
    for case in 0..1000 {
        let n_layers = rng.random_range(1..=12);
        // Coarse values so ties are common.
        let gaps: Vec<f64> = (0..n_layers)
            .map(|_| rng.random_range(-3..=3) as f64 * 0.01)
            .collect();
        let stats: Vec<LayerStats> = gaps
            .iter()
            .enumerate()
            .map(|(layer, &gap)| LayerStats {
                layer,
                mean_ratio_unfaithful: 0.5 + gap,
                mean_ratio_faithful: 0.5,
                gap,
                pcc: None,
                p_value: None,
            })
            .collect();
        let n = rng.random_range(1..=n_layers + 2);
        let got = select_layers(&stats, n, SelectionStrategy::UaGap, case).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..n_layers).collect();
        order.sort_by(|&a, &b| gaps[b].partial_cmp(&gaps[a]).unwrap().then(a.cmp(&b)));
        let mut want: Vec<usize> = order.into_iter().take(n.min(n_layers)).collect();
        want.sort_unstable();
        if got.layers != want {
            return Err(format!(
                "case {case}: gaps {gaps:?} n {n}: got {:?}, want {want:?}",
                got.layers
            ));
        }
        let mut sorted = gaps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ties += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
    }
    Ok(format!(
        "1000 random gap vectors agree with brute force ({ties} with ties)"
    ))
}

struct Run {
    cfg: ExperimentConfig,
    summary: stages::RunSummary,
    secs: f64,
}

fn ac5(run: &Run) -> Check {
    let pretrain_secs = run
        .summary
        .timings
        .iter()
        .find(|(s, _)| s == "pretrain")
        .map(|t| t.1)
        .unwrap_or(f64::NAN);
    let acc = run.summary.closed_book_accuracy;
    ensure(
        acc >= 0.9 && pretrain_secs < 300.0,
        format!(
            "closed-book exact match {:.1}% on {} facts, pretraining {pretrain_secs:.0}s",
            acc * 100.0,
            run.cfg.data.n_facts
        ),
    )
}

fn ac6(run: &Run) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let gamma: f64 = rng.random_range(0.0..6.0);
        let ctx: f64 = rng.random_range(-12.0..0.0);
        let noctx: f64 = rng.random_range(-12.0..0.0);
        let h = kpo_hinge(gamma, ctx, noctx);
        if h < 0.0 || (h == 0.0) != (ctx - noctx >= gamma) {
            return Err(format!("hinge({gamma}, {ctx}, {noctx}) = {h}"));
        }
    }
    let (_, rows) = read_csv(&run.cfg.out_dir().join("adapt_log.csv")).map_err(|e| e.to_string())?;
    let combined: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    let first = combined[0];
    // Per-step values are single-batch estimates; average the tail.
    let tail = &combined[combined.len() - combined.len().div_ceil(20)..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    ensure(
        last <= 0.5 * first,
        format!(
            "hinge conditions hold on 10000 triples; combined loss {first:.3} -> {last:.3} ({:.0}% drop)",
            100.0 * (1.0 - last / first)
        ),
    )
}

fn ac7(run: &Run) -> Check {
    let world = World::new(&run.cfg).map_err(|e| e.to_string())?;
    let model = stages::load_model(&run.cfg).map_err(|e| e.to_string())?;
    let build = |rate: f64| {
        build_benchmark(
            &model.view(),
            &world.tok,
            &world.facts,
            run.cfg.data.n_entities,
            &BenchmarkConfig {
                counterfactual_rate: rate,
                elicit: run.cfg.elicitation.clone(),
            },
            77,
        )
        .map_err(|e| e.to_string())
    };
    let all_cf = build(1.0)?;
    let frac = all_cf.stats.unfaithful as f64 / all_cf.stats.retained.max(1) as f64;
    let none_cf = build(0.0)?;
    ensure(
        frac >= 0.8 && none_cf.stats.unfaithful == 0 && run.summary.closed_book_accuracy >= 0.9,
        format!(
            "rate 1: {}/{} retained unfaithful ({:.1}%); rate 0: {} unfaithful",
            all_cf.stats.unfaithful,
            all_cf.stats.retained,
            100.0 * frac,
            none_cf.stats.unfaithful
        ),
    )
}

fn ac8(run: &Run) -> Check {
    let (_, rows) = read_csv(&run.cfg.out_dir().join("intervention.csv")).map_err(|e| e.to_string())?;
    let mut curve: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .filter(|(l, _): &(f64, f64)| [0.0, 0.25, 0.5, 0.75, 1.0].contains(l))
        .collect();
    curve.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if curve.len() != 5 {
        return Err(format!("expected 5 grid points, found {}", curve.len()));
    }
    let inversions = curve.windows(2).filter(|w| w[1].1 > w[0].1).count();
    let nll: Vec<String> = curve.iter().map(|c| format!("{:.3}", c.1)).collect();
    ensure(
        curve[0].1 > curve[4].1 && inversions <= 1,
        format!(
            "D- NLL over lambda 0..1: [{}], {inversions} inversion(s)",
            nll.join(", ")
        ),
    )
}

fn report_row(dir: &Path, stem: &str) -> Result<(f64, f64, Option<f64>), String> {
    let (header, rows) = read_csv(&dir.join(format!("{stem}.csv"))).map_err(|e| e.to_string())?;
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    let r = &rows[0];
    let mr = r[col("mr")].parse().ok();
    Ok((
        r[col("conr")].parse().unwrap(),
        r[col("memr")].parse().unwrap(),
        mr,
    ))
}

fn ac9(run: &Run) -> Check {
    let dir = run.cfg.out_dir();
    let kind = run.cfg.suppression.kind.as_str();
    let (c0, m0, mr0) = report_row(dir, "report_base_none")?;
    let (c1, m1, mr1) = report_row(dir, &format!("report_adapted_{kind}"))?;
    let lower = matches!((mr0, mr1), (Some(a), Some(b)) if b < a);
    ensure(
        lower && c1 >= c0 - 2.0 && run.secs < 600.0,
        format!(
            "vanilla ConR {c0:.1} MemR {m0:.1} MR {}; suppressed+adapted ConR {c1:.1} MemR {m1:.1} MR {}; run-all {:.0}s",
            fmt_mr(mr0),
            fmt_mr(mr1),
            run.secs
        ),
    )
}

fn fmt_mr(m: Option<f64>) -> String {
    m.map_or("undefined".into(), |v| format!("{v:.3}"))
}

fn ac10(run: &Run) -> Check {
    let inst = |i: usize| QAInstance {
        id: format!("t{i}"),
        question: "q".into(),
        context: "c".into(),
        contextual_answer: "kemo".into(),
        parametric_answer: "ruta".into(),
        parametric_freq: 5,
        faithful: false,
    };
    let instances: Vec<QAInstance> = (0..10).map(inst).collect();
    let responses: Vec<String> = [
        "kemo",
        "the kemo",
        "kemo ruta",
        "kemo .",
        "x kemo",
        "kemo kemo",
        "ruta",
        "ruta .",
        "lisa",
        "",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let s = conr_memr(&responses, &instances).map_err(|e| e.to_string())?;
    if s.conr != 60.0 || s.memr != 20.0 || s.mr != Some(0.25) {
        return Err(format!(
            "hand example gave ConR {} MemR {} MR {:?}",
            s.conr, s.memr, s.mr
        ));
    }
    let mut checked = 0;
    for r in &run.summary.reports {
        let e = &r.report;
        match (e.mr, memorization_ratio(e.conr, e.memr)) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            (a, b) => {
                return Err(format!(
                    "{:?}/{:?}: stored MR {a:?}, recomputed {b:?}",
                    r.model_tag, r.plan_tag
                ))
            }
        }
        checked += 1;
    }
    Ok(format!(
        "hand example ConR 60 MemR 20 MR 0.25; MR recomputed on {checked} reports"
    ))
}

fn ac11(first: &Run, second: &Path) -> Check {
    let a = first.cfg.out_dir();
    let mut files: Vec<String> = vec![
        "model.ckpt".into(),
        "adapter.ckpt".into(),
        "benchmark.jsonl".into(),
    ];
    for entry in std::fs::read_dir(a).map_err(|e| e.to_string())? {
        let name = entry
            .map_err(|e| e.to_string())?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if name.starts_with("report_") && name.ends_with(".csv") {
            files.push(name);
        }
    }
    files.sort();
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(second.join(f)).map_err(|e| format!("second run {f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!(
        "{} files byte-identical across two run-all invocations",
        files.len()
    ))
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir_a = tmp.path().join("run_a");
    let dir_b = tmp.path().join("run_b");
    let mut results: Vec<(&str, Check)> =
        vec![("AC-1", ac1()), ("AC-2", ac2()), ("AC-3", ac3()), ("AC-4", ac4())];

    let cfg =
        ExperimentConfig::load(&default_config(), &[], None, Some(&dir_a)).expect("default config loads");
    let t0 = Instant::now();
    let first = stages::cmd_run_all(&cfg).map(|summary| Run {
        cfg,
        summary,
        secs: t0.elapsed().as_secs_f64(),
    });
    match &first {
        Ok(run) => {
            results.push(("AC-5", ac5(run)));
            results.push(("AC-6", ac6(run)));
            results.push(("AC-7", ac7(run)));
            results.push(("AC-8", ac8(run)));
            results.push(("AC-9", ac9(run)));
            results.push(("AC-10", ac10(run)));
            let status = Command::new(env!("CARGO_BIN_EXE_pmlab"))
                .args(["run-all", "--config"])
                .arg(default_config())
                .arg("--out")
                .arg(&dir_b)
                .env("RUST_LOG", "warn")
                .status();
            let second = match status {
                Ok(s) if s.success() => ac11(run, &dir_b),
                Ok(s) => Err(format!("second run-all exited with {s}")),
                Err(e) => Err(format!("could not start the binary: {e}")),
            };
            results.push(("AC-11", second));
        }
        Err(e) => {
            for ac in ["AC-5", "AC-6", "AC-7", "AC-8", "AC-9", "AC-10", "AC-11"] {
                results.push((ac, Err(format!("run-all failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("{name} PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("{name} FAIL  {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
