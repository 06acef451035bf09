use std::collections::HashMap;

use lesionfuse_core::backbones::{create_extractor, BackboneName, Extractor, CACHE_ENV};
use lesionfuse_core::nn::{self, Adam, AdamConfig, Pass};
use lesionfuse_core::Error;
use ndarray::{Array2, Array4};

#[test]
fn every_registry_entry_emits_declared_width_at_224() {
    for name in BackboneName::ALL {
        let mut ex = Extractor::<f32>::random(name, 0);
        let x = Array4::from_shape_fn((1, 3, 224, 224), |(_, c, y, x)| ((c + y + x) % 7) as f32 * 0.1 - 0.3);
        let f = ex.features(x, Pass::Infer);
        assert_eq!(f.dim(), (1, name.feature_dim()), "{name}");
        assert!(f.iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn declared_widths() {
    let dims: Vec<_> = BackboneName::ALL.iter().map(|b| (b.as_str(), b.feature_dim())).collect();
    assert_eq!(
        dims,
        [
            ("resnet50", 2048),
            ("resnet101", 2048),
            ("googlenet", 1024),
            ("vgg13bn", 25088),
            ("vgg19bn", 25088),
            ("mobilenet", 1024),
            ("tiny", 64)
        ]
    );
}

fn one_step(ex: &mut Extractor<f64>) {
    let x = Array4::from_shape_fn((4, 3, 16, 16), |(n, c, y, x)| ((n * 3 + c + y * x) % 5) as f64 - 2.0);
    let f = ex.features(x, Pass::Train);
    let r = Array2::from_shape_fn(f.raw_dim(), |(i, j)| ((i + j) % 3) as f64 - 1.0);
    ex.backward(r);
    Adam::new(AdamConfig::default()).step(ex);
}

#[test]
fn frozen_extractor_is_bit_identical_after_a_step() {
    let mut ex = Extractor::<f64>::random(BackboneName::Tiny, 3);
    ex.set_trainable(false);
    let before = nn::snapshot(&mut ex, "");
    one_step(&mut ex);
    assert_eq!(before, nn::snapshot(&mut ex, ""));
}

#[test]
fn trainable_extractor_changes_and_toggle_keeps_values() {
    let mut ex = Extractor::<f64>::random(BackboneName::Tiny, 3);
    ex.set_trainable(false);
    let frozen = nn::snapshot(&mut ex, "");
    ex.set_trainable(true);
    assert_eq!(frozen, nn::snapshot(&mut ex, ""));
    one_step(&mut ex);
    let after = nn::snapshot(&mut ex, "");
    assert!(frozen.iter().zip(&after).any(|(a, b)| a.1 != b.1));
}

#[test]
fn pretrained_weights_load_from_cache_or_fail_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(CACHE_ENV, dir.path());
    match create_extractor::<f32>("tiny", true, 0) {
        Err(Error::WeightsUnavailable { hint, path, .. }) => {
            assert!(hint.contains(CACHE_ENV));
            assert_eq!(path, dir.path().join("tiny.safetensors"));
        }
        other => panic!("expected missing-weights error, got {:?}", other.err()),
    }

    let mut src = Extractor::<f32>::random(BackboneName::Tiny, 42);
    let mut tensors = nn::snapshot(&mut src, "");
    tensors.push(("fc.weight".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[6, 64]))));
    nn::write_tensors(&dir.path().join("tiny.safetensors"), &tensors, HashMap::new()).unwrap();
    let mut ex = create_extractor::<f32>("tiny", true, 7).unwrap();
    assert!(ex.spec().pretrained);
    tensors.pop();
    assert_eq!(nn::snapshot(&mut ex, ""), tensors);
}
