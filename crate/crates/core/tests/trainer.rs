use lesionfuse_core::backbones::{BackboneName, Extractor};
use lesionfuse_core::data::{ClinicalVector, Diagnosis, FoldAssignment, FoldEntry, WeightVector, N_CLI};
use lesionfuse_core::fusion::{build_head, FusionConfig, FusionHead, Scenario};
use lesionfuse_core::nn;
use lesionfuse_core::trainer::{
    batch_loss_terms, load_checkpoint, save_checkpoint, train_two_phase, CheckpointMeta, Model, SampleSource,
    TrainConfig,
};
use lesionfuse_core::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small labelled image set: each class tints a square differently.
struct Tinted {
    labels: Vec<usize>,
    noise_seed: u64,
    side: usize,
    poison: bool,
}

impl Tinted {
    fn new(n: usize, side: usize) -> Self {
        Tinted {
            labels: (0..n).map(|i| i % 6).collect(),
            noise_seed: 17,
            side,
            poison: false,
        }
    }
}

impl SampleSource<f64> for Tinted {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn clinical(&self, i: usize) -> ClinicalVector<f64> {
        let mut v = [0.0; N_CLI];
        v[0] = 0.5;
        v[1 + self.labels[i]] = 1.0;
        for k in 0..6 {
            v[16 + 2 * k] = 1.0;
        }
        ClinicalVector(v)
    }

    fn input(&self, i: usize, _augment: Option<(u64, u64)>) -> Result<Array3<f64>> {
        if self.poison {
            return Ok(Array3::from_elem((3, self.side, self.side), f64::NAN));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ i as u64);
        let y = self.labels[i] as f64;
        Ok(Array3::from_shape_fn((3, self.side, self.side), |(c, _, _)| {
            (y - 2.5) * 0.3 * (c as f64 - 1.0) + rng.random_range(-0.5..0.5)
        }))
    }
}

/// 2-d points in six well separated clusters; the "image" is the point itself.
struct Clusters {
    points: Vec<[f64; 2]>,
    labels: Vec<usize>,
}

impl Clusters {
    fn new(n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..n).map(|i| i % 6).collect();
        let points = labels
            .iter()
            .map(|&y| {
                let a = y as f64 * std::f64::consts::PI / 3.0;
                [3.0 * a.cos() + rng.random_range(-0.3..0.3), 3.0 * a.sin() + rng.random_range(-0.3..0.3)]
            })
            .collect();
        Clusters { points, labels }
    }
}

impl SampleSource<f64> for Clusters {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn clinical(&self, _: usize) -> ClinicalVector<f64> {
        ClinicalVector([0.0; N_CLI])
    }

    fn input(&self, i: usize, _: Option<(u64, u64)>) -> Result<Array3<f64>> {
        Ok(Array3::from_shape_vec((2, 1, 1), self.points[i].to_vec()).unwrap())
    }
}

fn folds_for(n: usize, k: usize) -> FoldAssignment {
    FoldAssignment {
        k,
        seed: 0,
        grouped: false,
        entries: (0..n)
            .map(|i| FoldEntry {
                lesion_id: format!("L{i}"),
                fold: (i / 6) % k,
            })
            .collect(),
    }
}

fn tiny_model(scenario: Scenario, seed: u64) -> Model<f64> {
    let spec = build_head(&FusionConfig::for_backbone(BackboneName::Tiny, scenario, 0.8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model {
        backbone: Some(Extractor::random(BackboneName::Tiny, seed)),
        head: FusionHead::new(spec, &mut rng).unwrap(),
    }
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        phase1_epochs: 4,
        phase2_epochs: 2,
        lr_phase1: 1e-3,
        lr_phase2: 1e-4,
        batch_size: 16,
        seed: 3,
        validation_fraction: 0.2,
        augment: false,
        ..Default::default()
    }
}

fn params_with_prefix(model: &mut Model<f64>, prefix: &str) -> Vec<(String, ndarray::ArrayD<f64>)> {
    nn::snapshot(model, "").into_iter().filter(|(n, _)| n.starts_with(prefix)).collect()
}

#[test]
fn constant_monitor_ends_phase_after_patience() {
    let data = Tinted::new(60, 8);
    let mut model = tiny_model(Scenario::Fused, 1);
    // An unreachable improvement threshold makes every epoch after the first "flat".
    let cfg = TrainConfig {
        phase1_epochs: 20,
        phase2_epochs: 0,
        plateau_patience: 2,
        early_stop_patience: 3,
        min_delta: 1e9,
        lr_phase1: 1e-4,
        lr_phase2: 1e-5,
        ..quick_config()
    };
    let out = train_two_phase(&mut model, &data, &folds_for(60, 5), 0, &cfg).unwrap();
    let lrs: Vec<f64> = out.history.records.iter().map(|r| r.lr).collect();
    assert_eq!(out.history.epochs_in_phase(1), 4);
    // Plateau fires after epoch 3 (two flat epochs), so epoch 4 runs at 1e-5.
    assert_eq!(lrs, vec![1e-4, 1e-4, 1e-4, 1e-4 * 0.1]);
}

#[test]
fn phase_one_freezes_backbone_and_moves_head() {
    let data = Tinted::new(60, 8);
    let mut model = tiny_model(Scenario::Fused, 2);
    let bb0 = params_with_prefix(&mut model, "backbone.");
    let head0 = params_with_prefix(&mut model, "head.");
    let cfg = TrainConfig {
        phase2_epochs: 0,
        ..quick_config()
    };
    train_two_phase(&mut model, &data, &folds_for(60, 5), 1, &cfg).unwrap();
    assert_eq!(bb0, params_with_prefix(&mut model, "backbone."));
    let head1 = params_with_prefix(&mut model, "head.");
    assert!(head0.iter().zip(&head1).any(|(a, b)| a.1 != b.1));
}

#[test]
fn phase_two_fine_tunes_backbone() {
    let data = Tinted::new(60, 8);
    let mut model = tiny_model(Scenario::ImageOnly, 2);
    let bb0 = params_with_prefix(&mut model, "backbone.");
    let cfg = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 3,
        monitor: lesionfuse_core::trainer::Monitor::ValBacc,
        ..quick_config()
    };
    let out = train_two_phase(&mut model, &data, &folds_for(60, 5), 0, &cfg).unwrap();
    assert!(out.history.epochs_in_phase(2) >= 1);
    if out.best_phase == 2 {
        assert_ne!(bb0, params_with_prefix(&mut model, "backbone."));
    }
}

#[test]
fn returned_model_matches_best_monitored_epoch() {
    let data = Tinted::new(72, 8);
    let mut model = tiny_model(Scenario::Fused, 4);
    let out = train_two_phase(&mut model, &data, &folds_for(72, 4), 2, &quick_config()).unwrap();
    let min = out.history.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_monitor, min);
    let probs = model.predict(&data, &out.val_indices, 16).unwrap();
    let p = Array2::from_shape_fn((probs.len(), 6), |(i, j)| probs[i][j]);
    let labels: Vec<usize> = out.val_indices.iter().map(|&i| data.labels[i]).collect();
    let (l, w) = batch_loss_terms(&p, &labels, &out.weights);
    assert!((l / w - min).abs() < 1e-9, "{} vs {min}", l / w);
    assert!(out.history.records.len() <= 6);
}

#[test]
fn identity_features_loss_decreases_on_separable_toy() {
    let data = Clusters::new(240);
    let cfg = FusionConfig {
        c_f: 0.8,
        n_cli: N_CLI,
        backbone_dim: 2,
        scenario: Scenario::ImageOnly,
        dropout: 0.0,
        vgg_intermediate: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model {
        backbone: None,
        head: FusionHead::new(build_head(&cfg).unwrap(), &mut rng).unwrap(),
    };
    let tc = TrainConfig {
        phase1_epochs: 5,
        phase2_epochs: 0,
        lr_phase1: 1e-2,
        lr_phase2: 1e-2,
        batch_size: 16,
        ..quick_config()
    };
    let out = train_two_phase(&mut model, &data, &folds_for(240, 4), 0, &tc).unwrap();
    let losses: Vec<f64> = out.history.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn weighted_loss_penalizes_prior_predictor_more_than_uniform() {
    let counts = [543usize, 442, 67, 196, 149, 215];
    let n: usize = counts.iter().sum();
    let w = lesionfuse_core::data::class_weights_from_counts(&counts).unwrap();
    let weights = WeightVector {
        weights: w.try_into().unwrap(),
    };
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    let prior: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();
    let p_prior = Array2::from_shape_fn((n, 6), |(_, j)| prior[j]);
    let p_uniform = Array2::from_elem((n, 6), 1.0 / 6.0);
    let (lp, wp) = batch_loss_terms(&p_prior, &labels, &weights);
    let (lu, wu) = batch_loss_terms(&p_uniform, &labels, &weights);
    assert!(lp / wp > lu / wu);
    // Without weights the prior is the better constant predictor.
    let ones = WeightVector::uniform(1.0);
    let (lp1, _) = batch_loss_terms(&p_prior, &labels, &ones);
    let (lu1, _) = batch_loss_terms(&p_uniform, &labels, &ones);
    assert!(lp1 < lu1);
}

#[test]
fn empty_class_and_non_finite_loss_are_errors() {
    let mut data = Tinted::new(60, 8);
    for l in data.labels.iter_mut() {
        if *l == Diagnosis::Mel.index() {
            *l = 0;
        }
    }
    let mut model = tiny_model(Scenario::Fused, 1);
    let err = train_two_phase(&mut model, &data, &folds_for(60, 5), 0, &quick_config()).unwrap_err();
    assert!(matches!(err, Error::EmptyClass(ref c) if c == "MEL"), "{err}");

    let mut data = Tinted::new(60, 8);
    data.poison = true;
    let err = train_two_phase(&mut model, &data, &folds_for(60, 5), 0, &quick_config()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { phase: 1, epoch: 1, .. }), "{err}");
}

#[test]
fn checkpoint_roundtrip_reproduces_predictions() {
    let data = Tinted::new(60, 8);
    let mut model = tiny_model(Scenario::Fused, 6);
    let cfg = quick_config();
    train_two_phase(&mut model, &data, &folds_for(60, 5), 0, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold0").join("model.safetensors");
    let meta = CheckpointMeta {
        backbone: model.backbone.as_ref().map(|b| b.spec().clone()),
        c_f: 0.8,
        head: model.head.spec().clone(),
        train: cfg.clone(),
        fold: 0,
        seed: cfg.seed,
    };
    save_checkpoint(&path, &mut model, &meta).unwrap();
    let (meta2, mut restored) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(meta, meta2);
    let idx: Vec<usize> = (0..12).collect();
    assert_eq!(model.predict(&data, &idx, 5).unwrap(), restored.predict(&data, &idx, 5).unwrap());
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data = Tinted::new(60, 8);
    let run = || {
        let mut model = tiny_model(Scenario::Fused, 8);
        let out = train_two_phase(&mut model, &data, &folds_for(60, 5), 3, &quick_config()).unwrap();
        (out.history, nn::snapshot(&mut model, ""))
    };
    assert_eq!(run(), run());
}
