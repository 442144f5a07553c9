use vitpeft::harness::{evaluate, gen_domain, split_features, train, Split, TrainConfig};
use vitpeft::knn::{build_index, top1_accuracy};
use vitpeft::peft::{build_freeze_mask, MaskStrategy};
use vitpeft::tensor::Tensor;
use vitpeft::vit::{build_vit, ViTConfig};

/// Raw pixels already carry class signal: K-NN on flattened images beats
/// chance by a wide margin, so a learner has something to find.
#[test]
fn synthetic_domain_is_separable_from_pixels() {
    let d = gen_domain("sep", 4, 4, 800, 32).unwrap();
    let train_split = d.split(Split::Train).unwrap();
    let val = d.split(Split::Val).unwrap();
    let flat = |t: &Tensor<f32>| {
        let n = t.shape()[0];
        Tensor::<f64>::from_f64_slice(&[n, t.len() / n], &t.to_f64_vec()).unwrap()
    };
    let index = build_index(&flat(&train_split.images), &train_split.labels).unwrap();
    let pred = index.predict(&flat(&val.images), 10).unwrap();
    let acc = top1_accuracy(&pred, &val.labels).unwrap();
    assert!(acc >= 0.5, "pixel K-NN accuracy {acc}");
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    // small enough to memorize within the budget
    let data = gen_domain("fit", 2, 4, 40, 32).unwrap();
    let base = build_vit::<f32>(&ViTConfig::tiny(4), 3).unwrap();
    let mask = build_freeze_mask(&base, MaskStrategy::Full).unwrap();
    let config = TrainConfig {
        lr: 0.01,
        momentum: 0.9,
        steps: 150,
        eval_every: 50,
        batch_size: 8,
        seed: 5,
    };
    let mut a = base.clone();
    let ha = train(&mut a, &mask, &data, &config, None).unwrap();
    let first = ha.points.first().unwrap().loss;
    let last = ha.points.last().unwrap().loss;
    assert!(last < first, "window losses {first} -> {last}");

    let mut b = base.clone();
    let hb = train(&mut b, &mask, &data, &config, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.losses, hb.losses);
    assert_eq!(ha.points, hb.points);

    let best = ha.best_point().unwrap();
    assert_eq!(
        best.val_acc,
        ha.points.iter().map(|p| p.val_acc).fold(f64::MIN, f64::max)
    );
    let snap = ha.best_snapshot.as_ref().unwrap();
    assert_eq!(
        evaluate(snap, &data.split(Split::Val).unwrap()).unwrap(),
        best.val_acc
    );
}

#[test]
fn features_have_model_width() {
    let data = gen_domain("w", 1, 3, 30, 32).unwrap();
    let m = build_vit::<f32>(&ViTConfig::tiny(3), 0).unwrap();
    let f = split_features(&m, &data.split(Split::Val).unwrap()).unwrap();
    assert_eq!(f.shape(), &[6, 64]);
}
