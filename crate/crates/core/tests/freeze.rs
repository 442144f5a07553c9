mod common;

use common::{freeze_outcome, small_domain};
use vitpeft::harness::{run_forgetting_experiment, TrainConfig};
use vitpeft::peft::Strategy;
use vitpeft::vit::{build_vit, ViTConfig};

fn strategies() -> Vec<Strategy> {
    vec![
        Strategy::Full,
        Strategy::TopK(2),
        Strategy::Linear,
        Strategy::Lora { r: 4, alpha: 4.0 },
        Strategy::BlockExpansion { p: 2 },
    ]
}

#[test]
fn frozen_tensors_keep_their_bits() {
    let base = build_vit::<f32>(&ViTConfig::tiny(8), 1).unwrap();
    let data = small_domain("freeze", 3, 4, 240, 32);
    for s in strategies() {
        let out = freeze_outcome(&base, &s, &data, 30, 8);
        assert!(
            out.frozen_changed.is_empty(),
            "{s}: {:?}",
            out.frozen_changed
        );
        assert!(out.trained > 0, "{s}: nothing trained");
        if matches!(s, Strategy::Full) {
            assert_eq!(out.trained, out.trainable);
        }
    }
}

#[test]
fn linear_probe_keeps_source_knn_accuracy() {
    let base = build_vit::<f32>(&ViTConfig::tiny(8), 2).unwrap();
    let source = small_domain("src", 5, 8, 320, 32);
    let transfer = small_domain("dst", 6, 4, 160, 32);
    let config = TrainConfig {
        lr: 0.05,
        momentum: 0.9,
        steps: 40,
        eval_every: 20,
        batch_size: 8,
        seed: 1,
    };
    let r = run_forgetting_experiment(&base, &source, &transfer, &[Strategy::Linear], &config, 5)
        .unwrap();
    let rec = &r.rows[0].record;
    assert_eq!(rec.source_acc_after, r.baseline);
    assert_eq!(rec.drop, 0.0);
    for p in &r.rows[0].history {
        assert_eq!(p.source_acc, Some(r.baseline));
    }
}
