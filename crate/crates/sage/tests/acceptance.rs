//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantity. The end-to-end training runs share one
//! fixture (dataset + default-config run) so the suite stays inside a
//! reasonable wall-clock budget.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use sage::data::{self, synth_blobs, Dataset, Split};
use sage::gradcheck;
use sage::model::{checkpoint, metrics, Model, ModelConfig};
use sage::rng::Rng;
use sage::routing::{
    balance_from_vectors, gate_weights, gate_weights_factored, modulate_logits, select_topk,
    GateVariant,
};
use sage::telemetry::{parse_heatmap_csv, HeatmapKind, TelemetryLog};
use sage::tensor::Tensor;
use sage::train::{train, TrainOutput, TrainPlan};

/// Default toy run parameters: K=2, S=2, sigmoid gating, lambdas
/// (1, 1.5, 1), as shipped in configs/toy.conf.
fn toy_model_config(seed: u64) -> ModelConfig {
    ModelConfig { seed, ..ModelConfig::default() }
}

fn toy_plan(seed: u64, epochs: usize) -> TrainPlan {
    TrainPlan { epochs, lr: 2e-3, batch_size: 8, seed, ..TrainPlan::default() }
}

struct Fixture {
    dataset: Dataset,
    run: TrainOutput,
    history_csv: String,
    wall: Duration,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dataset = synth_blobs(250, 32, 32, 42).unwrap();
        assert_eq!(dataset.indices(Split::Train).len(), 200);
        assert_eq!(dataset.indices(Split::Val).len(), 50);
        let start = Instant::now();
        let model = Model::build(toy_model_config(42)).unwrap();
        let run = train(model, &dataset, &toy_plan(42, 30)).unwrap();
        let wall = start.elapsed();
        let history_csv = run.history.to_csv();
        Fixture { dataset, run, history_csv, wall }
    })
}

#[test]
fn criterion_01_gradient_oracle() {
    // Single-core, per the stated budget.
    #[cfg(feature = "parallel")]
    let report = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| gradcheck::run(&toy_model_config(42), false).unwrap());
    #[cfg(not(feature = "parallel"))]
    let report = gradcheck::run(&toy_model_config(42), false).unwrap();

    assert!(report.passed, "{}", report.render());
    assert!(report.max_rel < 1e-4);
    assert!(
        report.runtime < Duration::from_secs(60),
        "gradcheck took {:?}",
        report.runtime
    );
    println!(
        "PASS criterion 1: gradient oracle max rel err {:.3e} over {} params in {:.1}s (single core)",
        report.max_rel,
        report.scalars,
        report.runtime.as_secs_f64()
    );
}

#[test]
fn criterion_02_routing_invariants() {
    let mut rng = Rng::new(0xACCE);

    // (a) g_s = 0.5 modulation leaves top-K indices and softmax gate
    // weights bitwise identical on 1,000 random logit vectors.
    for trial in 0..1000 {
        let m = 4 + (trial % 5); // M in 4..=8
        let k = 1 + (trial % m.min(4));
        let logits: Vec<f64> = (0..m).map(|_| rng.normal() * 2.0).collect();
        let mask: Vec<f64> = (0..m).map(|j| ((j + trial) % 2 == 0) as u64 as f64).collect();

        let modulated = modulate_logits(&logits, 0.5, &mask).unwrap();
        let sel_mod = select_topk(&modulated, k).unwrap();
        let sel_base = select_topk(&logits, k).unwrap();
        assert_eq!(sel_mod, sel_base, "trial {trial}");

        // At g_s = 0.5 both group factors are exactly one half.
        let w_mod = gate_weights_factored(&logits, &sel_mod, &vec![0.5; m]);
        let w_base = gate_weights(&logits, &sel_base, GateVariant::Softmax).unwrap();
        for (a, b) in w_mod.iter().zip(&w_base) {
            assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}");
        }
    }

    // (b) select_topk equals exhaustive subset enumeration for M <= 8.
    fn brute_force(logits: &[f64], k: usize) -> Vec<usize> {
        let m = logits.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for bits in 0u32..(1 << m) {
            if bits.count_ones() as usize != k {
                continue;
            }
            let subset: Vec<usize> = (0..m).filter(|&j| bits & (1 << j) != 0).collect();
            let sum: f64 = subset.iter().map(|&j| logits[j]).sum();
            match &best {
                None => best = Some((sum, subset)),
                Some((bs, bset)) => {
                    if sum > *bs || (sum == *bs && subset < *bset) {
                        best = Some((sum, subset));
                    }
                }
            }
        }
        best.unwrap().1
    }
    for m in 1..=8usize {
        for k in 1..=m {
            for trial in 0..30 {
                let logits: Vec<f64> = if trial % 2 == 0 {
                    (0..m).map(|_| rng.normal()).collect()
                } else {
                    (0..m).map(|_| rng.below(3) as f64).collect()
                };
                assert_eq!(select_topk(&logits, k).unwrap(), brute_force(&logits, k));
            }
        }
    }

    // (c) gate weights sum to 1 within 1e-12 for both variants.
    for _ in 0..500 {
        let logits: Vec<f64> = (0..6).map(|_| rng.normal() * 3.0).collect();
        let sel = select_topk(&logits, 3).unwrap();
        for variant in [GateVariant::Softmax, GateVariant::Sigmoid] {
            let w = gate_weights(&logits, &sel, variant).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    println!("PASS criterion 2: routing invariants (bitwise 0.5-modulation, brute-force top-K, weight sums)");
}

#[test]
fn criterion_03_balance_loss_anchors() {
    for m in 2..=20usize {
        let uniform = vec![1.0 / m as f64; m];
        let loss = balance_from_vectors(&uniform, &uniform);
        assert!((loss - 1.0).abs() <= 1e-12, "uniform M={m}: {loss}");

        let mut collapsed = vec![0.0; m];
        collapsed[0] = 1.0;
        let loss = balance_from_vectors(&collapsed, &collapsed);
        assert!((loss - m as f64).abs() <= 1e-12, "collapse M={m}: {loss}");
    }
    println!("PASS criterion 3: balance loss anchors (uniform -> 1.0, collapse -> M, M in 2..=20)");
}

#[test]
fn criterion_04_shape_closure_and_identity_adapters() {
    // Model construction runs the exhaustive closure check; failure
    // would already have paniced. Re-verify explicitly and check the
    // identity property of same-layout equal-dim adapters at init.
    let model = Model::build(toy_model_config(42)).unwrap();
    assert_eq!(model.layer_count(), 4);
    assert_eq!(model.pool.size(), 6);

    let mut identity_pairs = 0usize;
    let mut closures = 0usize;
    for layer in &model.layers {
        for expert in 0..model.pool.size() {
            let pair = model.hub.pair(layer.layer_index, expert);
            let mut tape = sage::tensor::Tape::new();
            let dims = layer.input_sig.dims();
            let n: usize = dims.iter().product();
            let mut rng = Rng::new((layer.layer_index * 10 + expert) as u64);
            let x = tape.constant(&dims, (0..n).map(|_| rng.normal()).collect());
            let adapted = pair.adapt_in(&mut tape, &model.store, x).unwrap();
            let out = sage::experts::run_expert(
                &model.pool,
                &model.blocks,
                expert,
                &mut tape,
                &model.store,
                adapted,
            )
            .unwrap();
            let restored = pair.adapt_out(&mut tape, &model.store, out).unwrap();
            assert_eq!(
                tape.shape(restored),
                layer.output_sig.dims().as_slice(),
                "layer {} expert {expert}",
                layer.layer_index
            );
            closures += 1;

            // Identity-initialized same-layout adapters are exact
            // identities.
            if pair.s_in.source == pair.s_in.target {
                assert_eq!(tape.value(adapted), tape.value(x));
                identity_pairs += 1;
            }
        }
    }
    assert_eq!(closures, 24);
    assert!(identity_pairs > 0, "toy model should contain same-layout pairs");
    println!(
        "PASS criterion 4: shape closure on all 24 (layer, expert) pairs; {identity_pairs} identity adapters exact"
    );
}

#[test]
fn criterion_05_end_to_end_toy_training() {
    let fx = fixture();
    assert!(
        fx.run.best_val_dsc >= 0.90,
        "validation DSC {:.4} < 0.90",
        fx.run.best_val_dsc
    );
    assert!(!fx.run.diverged);
    assert!(
        fx.wall < Duration::from_secs(300),
        "training took {:?}, budget 5 min",
        fx.wall
    );

    // Rerun with the same seed: history must be byte-identical.
    let model = Model::build(toy_model_config(42)).unwrap();
    let rerun = train(model, &fx.dataset, &toy_plan(42, 30)).unwrap();
    assert_eq!(rerun.history.to_csv(), fx.history_csv, "history CSV differs across reruns");

    println!(
        "PASS criterion 5: toy training val DSC {:.4} (>= 0.90) in {:.0}s; rerun history byte-identical",
        fx.run.best_val_dsc,
        fx.wall.as_secs_f64()
    );
}

#[test]
fn criterion_06_capacity_trend() {
    let fx = fixture();
    let epochs = 8;
    let mut mean = |k: usize, gating: GateVariant| -> f64 {
        let mut acc = 0.0;
        for seed in [1u64, 2, 3] {
            let cfg = ModelConfig { top_k: k, gating, seed, ..ModelConfig::default() };
            let model = Model::build(cfg).unwrap();
            let run = train(model, &fx.dataset, &toy_plan(seed, epochs)).unwrap();
            acc += run.best_val_dsc;
        }
        acc / 3.0
    };
    let dsc_k1 = mean(1, GateVariant::Sigmoid);
    let dsc_k4 = mean(4, GateVariant::Sigmoid);
    assert!(
        dsc_k4 >= dsc_k1 - 0.02,
        "capacity trend violated: K=4 mean {dsc_k4:.4} vs K=1 mean {dsc_k1:.4}"
    );

    // Both gating variants reach DSC >= 0.88. Sigmoid comes from the
    // shared default run; softmax gets its own short run.
    let sigmoid_dsc = fx.run.best_val_dsc;
    assert!(sigmoid_dsc >= 0.88);
    let softmax_cfg = ModelConfig { gating: GateVariant::Softmax, ..ModelConfig::default() };
    let softmax_run = train(
        Model::build(softmax_cfg).unwrap(),
        &fx.dataset,
        &toy_plan(42, epochs),
    )
    .unwrap();
    assert!(
        softmax_run.best_val_dsc >= 0.88,
        "softmax DSC {:.4} < 0.88",
        softmax_run.best_val_dsc
    );

    println!(
        "PASS criterion 6: capacity trend K=4 mean DSC {dsc_k4:.4} vs K=1 {dsc_k1:.4} (within 0.02); sigmoid {sigmoid_dsc:.4} / softmax {:.4} both >= 0.88",
        softmax_run.best_val_dsc
    );
    // Full-scale ordering reported, not asserted: at production scale the
    // sigmoid variant led softmax by about half a Dice point.
    println!(
        "note: desk-scale sigmoid-vs-softmax gap: {:+.4} (reported only)",
        sigmoid_dsc - softmax_run.best_val_dsc
    );
}

#[test]
fn criterion_07_patch_filter_predicate() {
    let rule = data::PatchRule::default();
    let mask150 = vec![1u8; 150];

    // Constant patch: sigma = 0 < 10, rejected.
    assert!(!data::patch_filter(&[128u8; 1024], &mask150, &rule));

    // mu = 240 > 230, rejected regardless of spread.
    let mut bright = vec![225u8; 512];
    bright.extend(vec![255u8; 512]);
    assert!(!data::patch_filter(&bright, &mask150, &rule));

    // sigma = 20, mu = 100, mask sum 150: kept.
    let mut keep = vec![80u8; 512];
    keep.extend(vec![120u8; 512]);
    assert!(data::patch_filter(&keep, &mask150, &rule));

    println!("PASS criterion 7: patch filter matches thresholds bit-exactly");
}

#[test]
fn criterion_08_metric_identity() {
    let mut rng = Rng::new(808);
    for trial in 0..10_000 {
        let n = 16 + rng.below(48);
        let p_bias = rng.below(4);
        let pred: Vec<u8> = (0..n).map(|_| (rng.below(4) <= p_bias) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| (rng.below(3) == 0) as u8).collect();
        let m = metrics::metrics(&pred, &truth).unwrap();
        assert!(
            (m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() <= 1e-12,
            "trial {trial}: dsc {} iou {}",
            m.dsc,
            m.iou
        );
    }
    let ident = metrics::metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
    assert_eq!((ident.acc, ident.iou, ident.dsc), (1.0, 1.0, 1.0));
    let disj = metrics::metrics(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap();
    assert_eq!((disj.iou, disj.dsc), (0.0, 0.0));
    println!("PASS criterion 8: DSC = 2 IoU/(1+IoU) over 10,000 random mask pairs");
}

#[test]
fn criterion_09_telemetry_round_trip() {
    // Replay a validation epoch through a model and compare exports
    // against brute-force recomputation from the recorded decisions.
    let model = Model::build(toy_model_config(7)).unwrap();
    let dataset = synth_blobs(40, 32, 32, 24).unwrap();
    let val: Vec<&data::Sample> = dataset
        .indices(Split::Val)
        .iter()
        .map(|&i| &dataset.samples[i])
        .collect();
    assert!(!val.is_empty());

    let mut log = TelemetryLog::new(model.layer_kinds(), model.pool.size(), model.config.top_k);
    let mut decisions_by_layer: Vec<Vec<sage::routing::RoutingDecision>> =
        vec![Vec::new(); model.layer_count()];
    for s in &val {
        let pred = model.predict(&s.image).unwrap();
        for (l, d) in pred.decisions.iter().enumerate() {
            log.record(l, d).unwrap();
            decisions_by_layer[l].push(d.clone());
        }
    }

    // Affinity rows sum to 1 within 1e-9.
    let affinity = log.affinity_matrix();
    for row in &affinity {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    // CSV re-ingests to the in-memory matrix exactly.
    let csv = log.heatmap_csv(HeatmapKind::Affinity).unwrap();
    let parsed = parse_heatmap_csv(&csv, model.layer_count(), model.pool.size()).unwrap();
    assert_eq!(parsed, affinity);

    // Activation map equals the brute-force bitmap of the replayed
    // decisions.
    let bitmap = log.activation_matrix();
    for (l, decisions) in decisions_by_layer.iter().enumerate() {
        for e in 0..model.pool.size() {
            let expect = decisions.iter().any(|d| d.topk_indices.contains(&e));
            assert_eq!(bitmap[l][e], expect, "layer {l} expert {e}");
        }
    }

    // And the affinity means match a replay-from-scratch computation.
    for (l, decisions) in decisions_by_layer.iter().enumerate() {
        for e in 0..model.pool.size() {
            let mean: f64 = decisions.iter().map(|d| d.full_probs()[e]).sum::<f64>()
                / decisions.len() as f64;
            assert!((affinity[l][e] - mean).abs() <= 1e-12);
        }
    }
    println!("PASS criterion 9: telemetry CSV round trip exact; activation bitmap matches replay");
}

#[test]
fn criterion_10_checkpoint_round_trip() {
    let fx = fixture();
    let bytes = checkpoint::to_bytes(&fx.run.model);
    let loaded = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&loaded), bytes, "save-load-save not byte-exact");

    let mut rng = Rng::new(1010);
    for trial in 0..10 {
        let image = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let a = fx.run.model.predict(&image).unwrap();
        let b = loaded.predict(&image).unwrap();
        for (x, y) in a.logits.values.iter().zip(&b.logits.values) {
            assert_eq!(x.to_bits(), y.to_bits(), "trial {trial}");
        }
    }
    println!("PASS criterion 10: checkpoint round trip bitwise-identical on 10 random inputs");
}
