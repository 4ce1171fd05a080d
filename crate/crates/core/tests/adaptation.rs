use pmlab_core::adapt::{
    adapted_params, adapted_view, adapter_targets, combined_loss, load_adapter, merge_adapter, save_adapter,
    train_adapter, AdaptConfig, Adapter, QaExample,
};
use pmlab_core::model::{
    MatrixId, MatrixKind, ModelConfig, ModelParams, ModelView, ToyTransformer, TrainingMeta,
};
use pmlab_core::suppress::{ParamMaskEntry, SuppressionPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> ToyTransformer {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        vocab_size: 12,
        max_seq_len: 16,
        seed,
    };
    let mut params = ModelParams::zeros(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.tensors().into_iter().map(|(i, _)| i.name).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let base = if name.ends_with("norm") { 1.0 } else { 0.0 };
        for v in t.iter_mut() {
            *v = base + rng.random_range(-0.5..0.5);
        }
    }
    ToyTransformer::from_params(cfg, params).unwrap()
}

fn randomized(adapter: &mut Adapter, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in &mut adapter.factors {
        for v in f.b.as_mut_slice() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
}

const TOKENS: [u32; 6] = [1, 3, 5, 7, 9, 11];

fn logits(v: &ModelView<'_>) -> Vec<f64> {
    v.forward(&TOKENS, false).unwrap().logits.as_slice().to_vec()
}

/// Toy copy task: the answer token sits in the open-book prompt.
fn dataset() -> Vec<QaExample> {
    (4..10u32)
        .map(|a| QaExample {
            closed_prompt: vec![1, 10, 3],
            open_prompt: vec![1, 11, a, 10, 3],
            answer: vec![a, 2],
        })
        .collect()
}

#[test]
fn fresh_adapter_changes_nothing() {
    let m = model(1);
    let plan = SuppressionPlan::ffn(vec![0], 0.0).unwrap();
    let adapter = Adapter::new(&m, &adapter_targets(2, Some(&plan)), 3, 7).unwrap();
    assert_eq!(
        logits(&adapted_view(&m, Some(&plan), &adapter).unwrap()),
        logits(&m.view_with(Some(&plan)).unwrap())
    );
}

#[test]
fn merged_weights_equal_the_explicit_sum() {
    let m = model(2);
    let targets = adapter_targets(2, None);
    let mut adapter = Adapter::new(&m, &targets, 2, 3).unwrap();
    randomized(&mut adapter, 4);
    let merged = merge_adapter(&m, &adapter).unwrap();
    for f in &adapter.factors {
        let w = m.params().matrix(f.id).unwrap();
        let got = merged.params().matrix(f.id).unwrap();
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let delta: f64 = (0..adapter.rank).map(|k| f.a.get(r, k) * f.b.get(k, c)).sum();
                assert!((got.get(r, c) - (w.get(r, c) + delta)).abs() < 1e-12);
            }
        }
    }
    let a = logits(&merged.view());
    let b = logits(&adapted_view(&m, None, &adapter).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn adapter_applies_after_the_parameter_mask() {
    let m = model(3);
    let mask = vec![ParamMaskEntry {
        name: "layers.1.ffn.key".into(),
        index: 9,
    }];
    let plan = SuppressionPlan::parameter(mask, 0.0).unwrap();
    let targets = adapter_targets(2, Some(&plan));
    assert!(!targets.contains(&MatrixId::new(1, MatrixKind::FfnKey)));
    assert_eq!(targets.len(), 11);
    let mut adapter = Adapter::new(&m, &targets, 2, 3).unwrap();
    randomized(&mut adapter, 5);
    let p = adapted_params(&m, Some(&plan), &adapter).unwrap();
    assert_eq!(p.tensor("layers.1.ffn.key").unwrap()[9], 0.0);
}

#[test]
fn training_reduces_loss_and_leaves_the_base_alone() {
    let m = model(4);
    let before = m.params().to_flat();
    let plan = SuppressionPlan::ffn(vec![1], 0.0).unwrap();
    let cfg = AdaptConfig {
        lr: 1e-2,
        steps: 80,
        batch: 6,
        seed: 9,
        ..AdaptConfig::default()
    };
    let data = dataset();
    let (adapter, log) = train_adapter(&m, Some(&plan), &data, &cfg).unwrap();
    assert_eq!(log.len(), 80);
    assert_eq!(m.params().to_flat(), before);
    assert!(adapter
        .factors
        .iter()
        .all(|f| !f.id.kind.is_ffn() || f.id.layer != 1));

    // Full-dataset loss under the schedule's final margin.
    let full = |a: &Adapter| {
        let v = adapted_view(&m, Some(&plan), a).unwrap();
        data.iter()
            .map(|ex| combined_loss(&v, ex, &cfg, 80, 80).unwrap().combined)
            .sum::<f64>()
    };
    let fresh = Adapter::new(&m, &adapter_targets(2, Some(&plan)), cfg.rank, cfg.seed).unwrap();
    assert!(
        full(&adapter) < 0.5 * full(&fresh),
        "{} vs {}",
        full(&adapter),
        full(&fresh)
    );

    let (again, log2) = train_adapter(&m, Some(&plan), &data, &cfg).unwrap();
    assert_eq!(adapter, again);
    assert_eq!(log, log2);
}

#[test]
fn training_rejects_bad_input() {
    let m = model(5);
    assert!(train_adapter(&m, None, &[], &AdaptConfig::default()).is_err());
    let cfg = AdaptConfig {
        alpha: 0.0,
        beta: 0.0,
        ..AdaptConfig::default()
    };
    assert!(train_adapter(&m, None, &dataset(), &cfg).is_err());
}

#[test]
fn adapter_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let m = model(6);
    let plan = SuppressionPlan::ffn(vec![0], 0.5).unwrap();
    let mut adapter = Adapter::new(&m, &adapter_targets(2, Some(&plan)), 4, 1).unwrap();
    randomized(&mut adapter, 2);
    let meta = TrainingMeta {
        step_count: 3,
        seed: 1,
        losses: vec![1.0, 0.5, 0.25],
        config_hash: None,
    };
    save_adapter(&path, &m, &adapter, Some(&plan), &meta).unwrap();
    let (back, back_plan, back_meta) = load_adapter(&path, &m).unwrap();
    assert_eq!(back, adapter);
    assert_eq!(back_plan, Some(plan));
    assert_eq!(back_meta.losses, meta.losses);

    // A model of another shape cannot take it.
    let other = ToyTransformer::from_params(
        ModelConfig {
            vocab_size: 13,
            ..m.config().clone()
        },
        ModelParams::zeros(&ModelConfig {
            vocab_size: 13,
            ..m.config().clone()
        }),
    )
    .unwrap();
    assert!(load_adapter(&path, &other).is_err());
    // Nor is a model checkpoint an adapter.
    let model_path = dir.path().join("m.ckpt");
    pmlab_core::model::save_checkpoint(&m, &model_path, &meta).unwrap();
    assert!(load_adapter(&model_path, &m).is_err());
}
