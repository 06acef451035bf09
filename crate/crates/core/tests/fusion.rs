use lesionfuse_core::backbones::BackboneName;
use lesionfuse_core::data::{ClinicalVector, WeightVector, N_CLI};
use lesionfuse_core::fusion::{
    build_head, fuse_forward, reduced_image_features, total_features, FusionConfig, FusionHead, HeadSpec, Scenario,
};
use lesionfuse_core::nn::{Param, Parameterized, Pass};
use lesionfuse_core::trainer::{weighted_cross_entropy, weighted_loss_and_grad};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_head(scenario: Scenario, dim: usize, dropout: f64, seed: u64) -> FusionHead<f64> {
    let cfg = FusionConfig {
        c_f: 0.6,
        n_cli: N_CLI,
        backbone_dim: dim,
        scenario,
        dropout,
        vgg_intermediate: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FusionHead::new(build_head(&cfg).unwrap(), &mut rng).unwrap()
}

fn clinical(rng: &mut ChaCha8Rng) -> ClinicalVector<f64> {
    let mut v = [0.0; N_CLI];
    v[0] = rng.random_range(0.0..1.0);
    v[1 + rng.random_range(0..15)] = 1.0;
    for k in 0..6 {
        let on = rng.random_bool(0.5) as usize;
        v[16 + 2 * k + on] = 1.0;
    }
    ClinicalVector(v)
}

#[test]
fn table_of_reduced_and_total_widths() {
    let rows = [(0.5, 28, 56), (0.6, 42, 70), (0.7, 66, 94), (0.8, 112, 140), (0.9, 252, 280)];
    for (c_f, n_img, total) in rows {
        assert_eq!(reduced_image_features(28, c_f).unwrap(), n_img);
        assert_eq!(total_features(28, c_f).unwrap(), total);
    }
}

#[test]
fn vgg_head_has_intermediate_layer() {
    let spec = build_head(&FusionConfig::for_backbone(BackboneName::Vgg19bn, Scenario::ImageOnly, 0.9)).unwrap();
    assert_eq!(spec.reducer_layers, vec![(25088, 1024), (1024, 252)]);
    assert_eq!(spec.concat_width, 252);
}

#[test]
fn inconsistent_head_spec_is_rejected() {
    let mut spec = build_head(&FusionConfig::for_backbone(BackboneName::Tiny, Scenario::Fused, 0.8)).unwrap();
    spec.concat_width = 112;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(FusionHead::<f32>::new(spec.clone(), &mut rng).is_err());
    spec.concat_width = 140;
    spec.reducer_layers = vec![(64, 50), (60, 112)];
    assert!(FusionHead::<f32>::new(spec, &mut rng).is_err());
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let mut head = small_head(Scenario::Fused, 16, 0.5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = Array1::zeros(15);
    assert!(fuse_forward(f.view(), Some(&ClinicalVector([0.0; N_CLI])), &mut head, Pass::Infer, &mut rng).is_err());
    let f = Array1::zeros(16);
    assert!(fuse_forward(f.view(), None, &mut head, Pass::Infer, &mut rng).is_err());
    let mut img = small_head(Scenario::ImageOnly, 16, 0.5, 1);
    assert!(fuse_forward(f.view(), Some(&ClinicalVector([0.0; N_CLI])), &mut img, Pass::Infer, &mut rng).is_err());
}

#[test]
fn eval_mode_is_deterministic() {
    let mut head = small_head(Scenario::Fused, 16, 0.5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Array1::from_shape_fn(16, |_| rng.random_range(-1.0..1.0));
    let c = clinical(&mut rng);
    let a = fuse_forward(f.view(), Some(&c), &mut head, Pass::Infer, &mut rng).unwrap();
    let b = fuse_forward(f.view(), Some(&c), &mut head, Pass::Infer, &mut rng).unwrap();
    assert_eq!(a, b);
}

/// Batch loss (weighted mean) of a one-sample batch through the head, with
/// dropout masks replayed from a fixed generator state.
fn sample_loss(head: &mut FusionHead<f64>, f: &Array1<f64>, c: &ClinicalVector<f64>, y: usize, w: &WeightVector, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = fuse_forward(f.view(), Some(c), head, Pass::Train, &mut rng).unwrap();
    weighted_cross_entropy(&p, y, w) / w.weights[y]
}

#[test]
fn reducer_gradients_match_central_differences() {
    let mut head = small_head(Scenario::Fused, 12, 0.5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = Array1::from_shape_fn(12, |_| rng.random_range(-2.0..2.0));
    let c = clinical(&mut rng);
    let y = 4;
    let w = WeightVector {
        weights: [2.9, 3.6, 24.1, 8.2, 10.8, 7.5],
    };
    let dropout_seed = 99;

    let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let fm = f.clone().insert_axis(ndarray::Axis(0));
    let cm = Array2::from_shape_vec((1, N_CLI), c.0.to_vec()).unwrap();
    let out = head.forward(&fm, Some(&cm), Pass::Train, &mut drng).unwrap();
    let (_, g) = weighted_loss_and_grad(&out.probs, &[y], &w);
    head.backward(&g);

    let mut analytic = Vec::new();
    head.visit("", &mut |name, p: &mut Param<f64>| {
        if name == "reducer.0.weight" {
            analytic = p.grad.clone().unwrap().iter().copied().collect();
        }
    });
    let n_weights = analytic.len();
    let picks: Vec<usize> = (0..20).map(|_| rng.random_range(0..n_weights)).collect();
    let h = 1e-6;
    let mut checked = 0;
    for &k in &picks {
        let set = |head: &mut FusionHead<f64>, delta: f64| {
            head.visit("", &mut |name, p| {
                if name == "reducer.0.weight" {
                    p.value.as_slice_mut().unwrap()[k] += delta;
                }
            });
        };
        set(&mut head, h);
        let lp = sample_loss(&mut head, &f, &c, y, &w, dropout_seed);
        set(&mut head, -2.0 * h);
        let lm = sample_loss(&mut head, &f, &c, y, &w, dropout_seed);
        set(&mut head, h);
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[k];
        let scale = fd.abs().max(a.abs());
        if scale < 1e-8 {
            // Weight feeds a dropped or inactive unit: both sides are zero.
            assert!(fd.abs() < 1e-8 && a.abs() < 1e-12);
            continue;
        }
        assert!((fd - a).abs() / scale < 1e-4, "weight {k}: fd {fd} vs backprop {a}");
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn clinical_block_influences_fused_output_only() {
    let mut head = small_head(Scenario::Fused, 8, 0.0, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
    let c = clinical(&mut rng);
    let with = fuse_forward(f.view(), Some(&c), &mut head, Pass::Infer, &mut rng).unwrap();
    let zero = fuse_forward(f.view(), Some(&ClinicalVector([0.0; N_CLI])), &mut head, Pass::Infer, &mut rng).unwrap();
    assert_ne!(with, zero);
    let img: HeadSpec = small_head(Scenario::ImageOnly, 8, 0.0, 7).spec().clone();
    assert_eq!(img.concat_width, img.n_img());
}

proptest! {
    #[test]
    fn reduced_width_is_monotone(n_cli in 1usize..64, a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if let (Ok(x), Ok(y)) = (reduced_image_features(n_cli, lo), reduced_image_features(n_cli, hi)) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn image_share_tracks_combination_factor(n_cli in 1usize..64, c_f in 0.05f64..0.98) {
        if let Ok(n_img) = reduced_image_features(n_cli, c_f) {
            let t = total_features(n_cli, c_f).unwrap() as f64;
            let share = n_img as f64 / t;
            prop_assert!(share >= c_f - 1e-9 && share <= c_f + 1.0 / t + 1e-9);
        }
    }

    #[test]
    fn probabilities_form_a_distribution(seed in 0u64..500, train in any::<bool>()) {
        let mut head = small_head(Scenario::Fused, 10, 0.5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array1::from_shape_fn(10, |_| rng.random_range(-50.0..50.0));
        let c = clinical(&mut rng);
        let pass = if train { Pass::Train } else { Pass::Infer };
        let p = fuse_forward(f.view(), Some(&c), &mut head, pass, &mut rng).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
