use brau_tensor::kernels::{gelu, sigmoid};
use brau_tensor::{Conv2dSpec, SplitMix64, Tape, Tensor};

#[test]
fn softmax_rows_sum_to_one_and_ignore_shifts() {
    let mut rng = SplitMix64::new(1);
    let tape = Tape::<f64>::no_grad();
    let x = Tensor::<f64>::randn(&[5, 7], 3.0, &mut rng);
    let y = tape.constant(x.clone()).softmax(1.0);
    for row in y.value().data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let shifted = tape.constant(x.map(|v| v + 42.5)).softmax(1.0);
    assert!(y.value().max_abs_diff(shifted.value()).unwrap() < 1e-12);
}

#[test]
fn softmax_large_logits_match_extended_precision() {
    // exp(-1000) underflows f64, so the exact answer is [1, 0] to machine precision
    let tape = Tape::<f64>::no_grad();
    let y = tape
        .constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap())
        .softmax(1.0);
    assert_eq!(y.value().data(), &[1.0, 0.0]);
}

#[test]
fn layer_norm_standardizes_then_applies_affine() {
    let mut rng = SplitMix64::new(2);
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::randn(&[4, 6], 2.0, &mut rng));
    let one = tape.constant(Tensor::ones(&[6]));
    let zero = tape.constant(Tensor::zeros(&[6]));
    let y = x.layer_norm(&one, &zero, 1e-12).unwrap();
    for row in y.value().data().chunks(6) {
        let m = row.iter().sum::<f64>() / 6.0;
        let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
    }
    let beta = tape.constant(Tensor::from_fn(&[6], |i| i as f64));
    let y = x
        .layer_norm(&tape.constant(Tensor::zeros(&[6])), &beta, 1e-6)
        .unwrap();
    for row in y.value().data().chunks(6) {
        assert_eq!(row, beta.value().data());
    }
}

#[test]
fn batch_norm_infer_identity_and_mean_input() {
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let one = tape.constant(Tensor::ones(&[3]));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let y = x
        .batch_norm_infer(&Tensor::zeros(&[3]), &Tensor::ones(&[3]), &one, &zero, 0.0)
        .unwrap();
    assert!(y.value().bit_eq(x.value()));
    let mean = Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap();
    let beta = tape.constant(Tensor::from_f64(&[3], &[0.5, -1., 2.]).unwrap());
    let first = tape.constant(Tensor::from_f64(&[1, 3], &[1., 2., 3.]).unwrap());
    let y = first
        .batch_norm_infer(&mean, &Tensor::full(&[3], 4.0), &one, &beta, 1e-5)
        .unwrap();
    assert_eq!(y.value().data(), beta.value().data());
}

#[test]
fn batch_norm_batch_stats_match_scalar_recomputation() {
    let vals = [1.0, 10.0, 3.0, 20.0, 8.0, 60.0];
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64(&[3, 2], &vals).unwrap());
    let (_, stats) = x
        .batch_norm(
            &tape.constant(Tensor::ones(&[2])),
            &tape.constant(Tensor::zeros(&[2])),
            1e-5,
        )
        .unwrap();
    assert_eq!(stats.count, 3);
    assert!((stats.mean[0] - 4.0).abs() < 1e-12);
    assert!((stats.mean[1] - 30.0).abs() < 1e-12);
    assert!((stats.var[0] - 26.0 / 3.0).abs() < 1e-12);
    assert!((stats.var[1] - 1400.0 / 3.0).abs() < 1e-12);
}

#[test]
fn activation_points_and_gelu_monotone_grid() {
    let tape = Tape::<f64>::no_grad();
    let r = tape
        .constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap())
        .relu();
    assert_eq!(r.value().data(), &[0.0, 2.0]);
    assert_eq!(sigmoid(0.0f64), 0.5);
    assert_eq!(gelu(0.0f64), 0.0);
    // tanh-GELU has its minimum near -0.75; increasing from there on
    let mut prev = gelu(-0.75f64);
    for i in 1..=2000 {
        let x = -0.75 + i as f64 * 0.005;
        let y = gelu(x);
        assert!(y > prev, "gelu not increasing at {x}");
        prev = y;
    }
}

#[test]
fn conv_hand_values_and_identity() {
    let tape = Tape::<f32>::no_grad();
    let x = tape.constant(Tensor::ones(&[1, 3, 3, 1]));
    let w = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = x.conv2d(&w, Conv2dSpec::same(3)).unwrap();
    assert_eq!(y.value().at(&[0, 1, 1, 0]), 9.0);
    assert_eq!(y.value().at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(y.value().at(&[0, 2, 2, 0]), 4.0);

    let mut rng = SplitMix64::new(3);
    let x = tape.constant(Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng));
    let mut k = vec![0.0f32; 9 * 2 * 2];
    k[(4 * 2) * 2] = 1.0;
    k[(4 * 2 + 1) * 2 + 1] = 1.0;
    let w = tape.constant(Tensor::new(&[3, 3, 2, 2], k).unwrap());
    assert!(x
        .conv2d(&w, Conv2dSpec::same(3))
        .unwrap()
        .value()
        .bit_eq(x.value()));
}

#[test]
fn conv_rejects_indivisible_groups() {
    let tape = Tape::<f32>::no_grad();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 3]));
    let w = tape.constant(Tensor::zeros(&[3, 3, 1, 3]));
    assert!(x.conv2d(&w, Conv2dSpec::new(1, 1, 2)).is_err());
}

#[test]
fn matmul_broadcast_weight_matches_per_batch() {
    let mut rng = SplitMix64::new(4);
    let tape = Tape::<f64>::no_grad();
    let a = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
    let shared = tape
        .constant(a.clone())
        .matmul(&tape.constant(w.clone()))
        .unwrap();
    for i in 0..3 {
        let ai = Tensor::from_fn(&[2, 4], |j| a.data()[i * 8 + j]);
        let yi = tape.constant(ai).matmul(&tape.constant(w.clone())).unwrap();
        for j in 0..10 {
            assert!((yi.value().data()[j] - shared.value().data()[i * 10 + j]).abs() < 1e-12);
        }
    }
}
