//! Every layer kind and both networks through the finite-difference checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyasc::model::{ArchConfig, ModelGraph};
use tinyasc::nn::gradcheck::{check_gradients, random_tensor, randomize, TOLERANCE};
use tinyasc::nn::{ConvGeometry, GeluMode, LayerKind, LayerSpec, Op, Padding, Sequential};
use tinyasc::Tensor;

fn instances(make: impl Fn(&mut ChaCha8Rng) -> (Sequential<f64>, Vec<usize>), kind: &str) {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (mut net, shape) = make(&mut rng);
        randomize(&mut net, &mut rng);
        let x = random_tensor(shape, &mut rng, -1.5, 1.5);
        let err = check_gradients(&net, &x, seed).unwrap();
        println!("{kind:<18} instance {seed}: relative error {err:.3e}");
        assert!(err < TOLERANCE, "{kind} instance {seed}: relative error {err:e}");
    }
}

fn single(layer: LayerSpec<f64>) -> Sequential<f64> {
    Sequential::new(vec![layer])
}

#[test]
fn conv2d_same() {
    instances(
        |rng| {
            let k = [1, 3, 5][rng.random_range(0..3)];
            (single(LayerSpec::conv2d("c", k, 2, 3, true)), vec![2, 5, 6, 2])
        },
        "conv2d",
    );
}

#[test]
fn conv2d_strided_patch() {
    instances(
        |_| {
            let layer = LayerSpec::new(
                "p",
                Op::Conv2d {
                    geometry: ConvGeometry {
                        kh: 2,
                        kw: 2,
                        stride: 2,
                        padding: Padding::Valid,
                    },
                    weight: Tensor::zeros(vec![2, 2, 1, 3]),
                    bias: Some(Tensor::zeros(vec![3])),
                },
            );
            (single(layer), vec![2, 5, 6, 1])
        },
        "conv2d_patch",
    );
}

#[test]
fn depthwise() {
    instances(|_| (single(LayerSpec::depthwise("d", 3, 3, true)), vec![2, 5, 4, 3]), "depthwise_conv2d");
}

#[test]
fn pointwise() {
    instances(|_| (single(LayerSpec::pointwise("p", 3, 4, true)), vec![2, 3, 4, 3]), "pointwise_conv2d");
}

#[test]
fn dense() {
    instances(|_| (single(LayerSpec::dense("f", 5, 4, true)), vec![3, 5]), "dense");
}

#[test]
fn batch_norm() {
    instances(|_| (single(LayerSpec::batch_norm("b", 3)), vec![2, 3, 4, 3]), "batch_norm");
}

#[test]
fn activations() {
    instances(|_| (single(LayerSpec::simple("e", Op::Elu)), vec![2, 3, 3, 2]), "elu");
    instances(|_| (single(LayerSpec::simple("g", Op::Gelu(GeluMode::Tanh))), vec![2, 3, 3, 2]), "gelu_tanh");
    instances(|_| (single(LayerSpec::simple("g", Op::Gelu(GeluMode::Erf))), vec![2, 3, 3, 2]), "gelu_erf");
    instances(|_| (single(LayerSpec::simple("s", Op::Softmax)), vec![3, 6]), "softmax");
}

#[test]
fn pooling_and_dropout() {
    instances(|_| (single(LayerSpec::simple("m", Op::MaxPool { pool: (1, 4) })), vec![2, 3, 9, 2]), "max_pool");
    instances(|_| (single(LayerSpec::simple("m", Op::MaxPool { pool: (2, 2) })), vec![2, 4, 5, 2]), "max_pool_2x2");
    instances(|_| (single(LayerSpec::simple("a", Op::GlobalAvgPool)), vec![2, 3, 4, 3]), "global_avg_pool");
    instances(|_| (single(LayerSpec::simple("d", Op::Dropout { rate: 0.3 })), vec![2, 3, 4, 3]), "dropout");
}

#[test]
fn residual_pair() {
    instances(
        |_| {
            let net = Sequential::new(vec![
                LayerSpec::simple("rb", Op::ResidualBegin),
                LayerSpec::depthwise("d", 3, 2, true),
                LayerSpec::simple("g", Op::Gelu(GeluMode::Tanh)),
                LayerSpec::simple("re", Op::ResidualEnd),
            ]);
            (net, vec![2, 4, 4, 2])
        },
        "residual_add",
    );
}

#[test]
fn whole_networks() {
    for arch in ["conv_sep", "conv_mixer"] {
        instances(
            |_| {
                let cfg = ArchConfig::new(arch.parse().unwrap(), 3, 4, 3, 1).with_input_shape([6, 16, 1]);
                let m: ModelGraph<f64> = ModelGraph::build(cfg).unwrap();
                (m.net, vec![3, 6, 16, 1])
            },
            arch,
        );
    }
}

#[test]
fn every_layer_kind_is_covered() {
    // kinds exercised above; a new kind without a gradient test fails here
    let covered = [
        LayerKind::Conv2d,
        LayerKind::DepthwiseConv2d,
        LayerKind::PointwiseConv2d,
        LayerKind::BatchNorm,
        LayerKind::Elu,
        LayerKind::Gelu,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Dense,
        LayerKind::Dropout,
        LayerKind::Softmax,
        LayerKind::ResidualBegin,
        LayerKind::ResidualEnd,
    ];
    assert_eq!(covered.to_vec(), LayerKind::ALL.to_vec());
}
