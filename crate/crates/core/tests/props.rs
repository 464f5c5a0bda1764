//! Property tests for the operator invariants: shape preservation under
//! "same" padding, linearity, depthwise channel isolation, the rank-1
//! factorization identity, SE contraction, softmax simplex membership, and
//! receptive-field monotonicity.

mod common;

use common::{max_abs_diff, random_tensor};
use ds_resnet::cost;
use ds_resnet::model::{ArchitectureSpec, LayerConfig, SePlacement, INPUT_SHAPE};
use ds_resnet::nn::{self, ConvSpec};
use ds_resnet::rng::Rng;
use ds_resnet::se;
use ds_resnet::tensor::Tensor;
use proptest::prelude::*;

fn kernel_size() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(3), Just(5)]
}

fn dilation() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(2), Just(4), Just(8), Just(16)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_padding_preserves_spatial_dims(
        m in kernel_size(),
        r in kernel_size(),
        d_h in dilation(),
        d_w in dilation(),
        c_in in 1usize..4,
        n in 1usize..5,
        h in 1usize..12,
        w in 1usize..12,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&[c_in, h, w], &mut rng);
        let weights = random_tensor(&[n, c_in, m, r], &mut rng);
        let spec = ConvSpec::standard(m, r, n).with_dilation(d_h, d_w);
        let y = nn::conv2d_standard(&x, &weights, &spec).unwrap();
        prop_assert_eq!(y.shape(), &[n, h, w]);

        let dw_weights = random_tensor(&[c_in, m, r], &mut rng);
        let dw_spec = ConvSpec::depthwise(m, r, c_in).with_dilation(d_h, d_w);
        let y = nn::conv2d_depthwise(&x, &dw_weights, &dw_spec).unwrap();
        prop_assert_eq!(y.shape(), &[c_in, h, w]);
    }

    #[test]
    fn conv_pool_fc_are_linear(
        seed in 0u64..1000,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&[3, 8, 6], &mut rng);
        let y = random_tensor(&[3, 8, 6], &mut rng);
        let combo = Tensor::from_vec(
            &[3, 8, 6],
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();

        let weights = random_tensor(&[4, 3, 3, 3], &mut rng);
        let spec = ConvSpec::standard(3, 3, 4).with_dilation(2, 2);
        let f = |t: &Tensor| nn::conv2d_standard(t, &weights, &spec).unwrap();
        let lhs = f(&combo);
        let rhs = Tensor::from_vec(
            lhs.shape(),
            f(&x).data().iter().zip(f(&y).data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);

        let g = |t: &Tensor| nn::avg_pool2d(t, 2, 3).unwrap();
        let lhs = g(&combo);
        let rhs = Tensor::from_vec(
            lhs.shape(),
            g(&x).data().iter().zip(g(&y).data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);

        let fc = random_tensor(&[5, 3], &mut rng);
        let h = |t: &Tensor| nn::fully_connected(&nn::global_avg_pool(t).unwrap(), &fc).unwrap();
        let lhs = h(&combo);
        let rhs = Tensor::from_vec(
            lhs.shape(),
            h(&x).data().iter().zip(h(&y).data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn depthwise_channels_are_isolated(
        seed in 0u64..1000,
        target in 0usize..3,
        bump in -2.0f64..2.0,
    ) {
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&[3, 6, 5], &mut rng);
        let weights = random_tensor(&[3, 3, 3], &mut rng);
        let spec = ConvSpec::depthwise(3, 3, 3).with_dilation(2, 2);
        let base = nn::conv2d_depthwise(&x, &weights, &spec).unwrap();

        // perturb every channel except `target`
        let mut x2 = x.clone();
        for c in 0..3 {
            if c == target { continue; }
            for v in &mut x2.data_mut()[c * 30..(c + 1) * 30] {
                *v += bump;
            }
        }
        let out2 = nn::conv2d_depthwise(&x2, &weights, &spec).unwrap();
        let plane = 30;
        for i in 0..plane {
            prop_assert_eq!(
                base.data()[target * plane + i],
                out2.data()[target * plane + i]
            );
        }
    }

    #[test]
    fn depthwise_then_pointwise_equals_rank1_standard(
        seed in 0u64..1000,
        m in kernel_size(),
        d in prop_oneof![Just(1usize), Just(2), Just(4)],
    ) {
        let (c_in, c_out, h, w) = (3usize, 4usize, 7usize, 6usize);
        let mut rng = Rng::from_seed(seed);
        let x = random_tensor(&[c_in, h, w], &mut rng);
        let depth = random_tensor(&[c_in, m, m], &mut rng);
        let point = random_tensor(&[c_out, c_in], &mut rng);

        let dw_spec = ConvSpec::depthwise(m, m, c_in).with_dilation(d, d);
        let separable = nn::conv2d_pointwise(
            &nn::conv2d_depthwise(&x, &depth, &dw_spec).unwrap(),
            &point,
        ).unwrap();

        // standard kernel W[o,c,i,j] = P[o,c] * D[c,i,j]
        let mut fused = Tensor::zeros(&[c_out, c_in, m, m]);
        for o in 0..c_out {
            for c in 0..c_in {
                for ij in 0..m * m {
                    fused.data_mut()[(o * c_in + c) * m * m + ij] =
                        point.data()[o * c_in + c] * depth.data()[c * m * m + ij];
                }
            }
        }
        let std_spec = ConvSpec::standard(m, m, c_out).with_dilation(d, d);
        let direct = nn::conv2d_standard(&x, &fused, &std_spec).unwrap();
        prop_assert!(max_abs_diff(&separable, &direct) < 1e-9);
    }

    #[test]
    fn softmax_is_a_probability_vector(values in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let s = nn::softmax(&Tensor::vector(values));
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn se_gate_contracts_every_channel(seed in 0u64..1000, c in 2usize..9) {
        let mut rng = Rng::from_seed(seed);
        let b = (c / 4).max(1);
        let x = random_tensor(&[c, 4, 3], &mut rng);
        let w1 = random_tensor(&[b, c], &mut rng);
        let w2 = random_tensor(&[c, b], &mut rng);
        let y = se::se_forward(&x, &w1, &w2).unwrap();
        for (a, o) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= o.abs());
        }
        let gate = se::excitation_weights(&x, &w1, &w2).unwrap();
        prop_assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn receptive_field_grows_with_depth_and_dilation(
        layers in 1usize..12,
        explicit_d in 0usize..5,
    ) {
        let spec_of = |n: usize, d: usize| ArchitectureSpec {
            name: "rf".into(),
            input_shape: INPUT_SHAPE,
            num_classes: 12,
            layers: vec![
                LayerConfig::ds_conv(3, 3, 1, n).with_dilation(d, d),
                LayerConfig::global_avg_pool(),
                LayerConfig::softmax_fc(12),
            ],
            se_in_ds: SePlacement::Off,
        };
        // deeper stacks never shrink the field
        let (a, _) = spec_of(layers, explicit_d).receptive_field();
        let (b, _) = spec_of(layers + 1, explicit_d).receptive_field();
        prop_assert!(b >= a);
        // larger dilation never shrinks it either
        let (c, _) = spec_of(layers, explicit_d + 1).receptive_field();
        prop_assert!(c >= a || explicit_d == 0);
    }

    #[test]
    fn analytic_cost_matches_constructed_parameter_count(
        channels in prop_oneof![Just(8usize), Just(16), Just(32)],
        blocks in 1usize..4,
        tail in 0usize..3,
        pool in prop_oneof![Just((1usize, 1usize)), Just((2, 2)), Just((4, 2))],
    ) {
        let mut layers = vec![
            LayerConfig::standard_conv(3, 3, channels),
            LayerConfig::se(channels),
        ];
        if pool != (1, 1) {
            layers.push(LayerConfig::avg_pool(pool.0, pool.1));
        }
        layers.push(LayerConfig::residual_group(3, 3, channels, blocks));
        if tail > 0 {
            layers.push(LayerConfig::ds_conv(3, 3, channels, tail));
        }
        layers.push(LayerConfig::global_avg_pool());
        layers.push(LayerConfig::softmax_fc(12));
        let spec = ArchitectureSpec {
            name: "random-arch".into(),
            input_shape: INPUT_SHAPE,
            num_classes: 12,
            layers,
            se_in_ds: SePlacement::Off,
        };
        let report = cost::analyze(&spec).unwrap();
        let model = ds_resnet::model::Model::build(&spec, 1).unwrap();
        prop_assert_eq!(report.total_params, model.params.total_count());
    }
}
