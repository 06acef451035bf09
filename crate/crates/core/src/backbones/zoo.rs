//! Layer graphs of the supported extractors. Parameter names follow the
//! widely used reference implementations so published weights load by name.

use rand::Rng;

use super::blocks::{basic_conv, Bottleneck, Inception};
use crate::nn::{AdaptiveAvgPool2d, BatchNorm2d, ChannelAffine, Conv2d, MaxPool2d, Relu, Sequential};
use crate::preprocess::{IMAGENET_MEAN, IMAGENET_STD};
use crate::scalar::Scalar;

pub(crate) fn resnet<T: Scalar, R: Rng + ?Sized>(blocks: [usize; 4], rng: &mut R) -> Sequential<T> {
    let mut net = Sequential::new()
        .push("conv1", Conv2d::new(3, 64, 7, 2, 3, 1, false, rng))
        .push("bn1", BatchNorm2d::new(64, 1e-5))
        .push("relu", Relu::new())
        .push("maxpool", MaxPool2d::new(3, 2, 1, false));
    let mut cin = 64;
    for (stage, &count) in blocks.iter().enumerate() {
        let width = 64 << stage;
        let mut layer = Sequential::new();
        for i in 0..count {
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            layer.push_boxed(i.to_string(), Box::new(Bottleneck::<T>::new(cin, width, stride, rng)));
            cin = width * 4;
        }
        net.push_boxed(format!("layer{}", stage + 1), Box::new(layer));
    }
    net.push("avgpool", AdaptiveAvgPool2d::global())
}

pub(crate) fn vgg_bn<T: Scalar, R: Rng + ?Sized>(cfg: &[Option<usize>], rng: &mut R) -> Sequential<T> {
    let mut features = Sequential::new();
    let mut idx = 0;
    let mut cin = 3;
    for c in cfg {
        match *c {
            Some(cout) => {
                features.push_boxed(idx.to_string(), Box::new(Conv2d::<T>::new(cin, cout, 3, 1, 1, 1, true, rng)));
                features.push_boxed((idx + 1).to_string(), Box::new(BatchNorm2d::<T>::new(cout, 1e-5)));
                features.push_boxed((idx + 2).to_string(), Box::new(Relu::<T>::new()));
                idx += 3;
                cin = cout;
            }
            None => {
                features.push_boxed(idx.to_string(), Box::new(MaxPool2d::new(2, 2, 0, false)));
                idx += 1;
            }
        }
    }
    let mut net = Sequential::new();
    net.push_boxed("features", Box::new(features));
    net.push("avgpool", AdaptiveAvgPool2d::new(7, 7))
}

const M: Option<usize> = None;

pub(crate) fn vgg13_cfg() -> Vec<Option<usize>> {
    [64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0]
        .iter()
        .map(|&c| if c == 0 { M } else { Some(c) })
        .collect()
}

pub(crate) fn vgg19_cfg() -> Vec<Option<usize>> {
    [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
    ]
    .iter()
    .map(|&c| if c == 0 { M } else { Some(c) })
    .collect()
}

pub(crate) fn googlenet<T: Scalar, R: Rng + ?Sized>(transform_input: bool, rng: &mut R) -> Sequential<T> {
    let mut net = Sequential::new();
    if transform_input {
        // Published weights expect inputs normalized with mean = std = 0.5.
        let scale = [0, 1, 2].map(|c| IMAGENET_STD[c] / 0.5);
        let shift = [0, 1, 2].map(|c| (IMAGENET_MEAN[c] - 0.5) / 0.5);
        net = net.push("transform_input", ChannelAffine::new(scale, shift));
    }
    let eps = 1e-3;
    net.push_boxed("conv1", Box::new(basic_conv::<T, R>(3, 64, 7, 2, 3, eps, rng)));
    net = net.push("maxpool1", MaxPool2d::new(3, 2, 0, true));
    net.push_boxed("conv2", Box::new(basic_conv::<T, R>(64, 64, 1, 1, 0, eps, rng)));
    net.push_boxed("conv3", Box::new(basic_conv::<T, R>(64, 192, 3, 1, 1, eps, rng)));
    net = net.push("maxpool2", MaxPool2d::new(3, 2, 0, true));
    let stages: [(&str, [usize; 7]); 9] = [
        ("inception3a", [192, 64, 96, 128, 16, 32, 32]),
        ("inception3b", [256, 128, 128, 192, 32, 96, 64]),
        ("inception4a", [480, 192, 96, 208, 16, 48, 64]),
        ("inception4b", [512, 160, 112, 224, 24, 64, 64]),
        ("inception4c", [512, 128, 128, 256, 24, 64, 64]),
        ("inception4d", [512, 112, 144, 288, 32, 64, 64]),
        ("inception4e", [528, 256, 160, 320, 32, 128, 128]),
        ("inception5a", [832, 256, 160, 320, 32, 128, 128]),
        ("inception5b", [832, 384, 192, 384, 48, 128, 128]),
    ];
    for (name, c) in stages {
        let block = Inception::<T>::new(c[0], c[1], c[2], c[3], c[4], c[5], c[6], rng);
        net.push_boxed(name, Box::new(block));
        match name {
            "inception3b" => net = net.push("maxpool3", MaxPool2d::new(3, 2, 0, true)),
            "inception4e" => net = net.push("maxpool4", MaxPool2d::new(2, 2, 0, true)),
            _ => {}
        }
    }
    net.push("avgpool", AdaptiveAvgPool2d::global())
}

/// MobileNet v1 at width multiplier 1.0: a strided stem followed by 13
/// depthwise-separable blocks, named `model.<i>.<j>`.
pub(crate) fn mobilenet<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Sequential<T> {
    let mut model = Sequential::new();
    let stem = Sequential::new()
        .push("0", Conv2d::new(3, 32, 3, 2, 1, 1, false, rng))
        .push("1", BatchNorm2d::new(32, 1e-5))
        .push("2", Relu::new());
    model.push_boxed("0", Box::new(stem));
    let blocks = [
        (32, 64, 1),
        (64, 128, 2),
        (128, 128, 1),
        (128, 256, 2),
        (256, 256, 1),
        (256, 512, 2),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 1024, 2),
        (1024, 1024, 1),
    ];
    for (i, &(cin, cout, stride)) in blocks.iter().enumerate() {
        let block = Sequential::new()
            .push("0", Conv2d::new(cin, cin, 3, stride, 1, cin, false, rng))
            .push("1", BatchNorm2d::new(cin, 1e-5))
            .push("2", Relu::new())
            .push("3", Conv2d::new(cin, cout, 1, 1, 0, 1, false, rng))
            .push("4", BatchNorm2d::new(cout, 1e-5))
            .push("5", Relu::new());
        model.push_boxed((i + 1).to_string(), Box::new(block));
    }
    let mut net = Sequential::new();
    net.push_boxed("model", Box::new(model));
    net.push("avgpool", AdaptiveAvgPool2d::global())
}

/// Three strided conv-bn-relu stages (16, 32, 64 channels) and a global pool.
pub(crate) fn tiny<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Sequential<T> {
    let mut features = Sequential::new();
    let mut cin = 3;
    for (i, cout) in [16, 32, 64].into_iter().enumerate() {
        features.push_boxed((3 * i).to_string(), Box::new(Conv2d::<T>::new(cin, cout, 3, 2, 1, 1, false, rng)));
        features.push_boxed((3 * i + 1).to_string(), Box::new(BatchNorm2d::<T>::new(cout, 1e-5)));
        features.push_boxed((3 * i + 2).to_string(), Box::new(Relu::<T>::new()));
        cin = cout;
    }
    let mut net = Sequential::new();
    net.push_boxed("features", Box::new(features));
    net.push("avgpool", AdaptiveAvgPool2d::global())
}
