use brau_tensor::gradcheck::{check_op, op_suite, scaled_square_check};
use brau_tensor::{grad_check, GradCheckOptions, OpKind, SplitMix64, Tape, Tensor, Var};

#[test]
fn every_differentiable_op_passes() {
    for seed in [1u64, 2, 3] {
        let reports = op_suite(seed).unwrap();
        assert_eq!(reports.len(), OpKind::DIFFERENTIABLE.len());
        for r in &reports {
            assert!(r.passed(), "seed {seed}: {r}");
        }
    }
}

#[test]
fn suite_covers_every_recordable_kind() {
    let mut kinds: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
    kinds.sort_unstable();
    kinds.dedup();
    assert_eq!(kinds.len(), OpKind::DIFFERENTIABLE.len());
    assert!(check_op(OpKind::Custom, 0).is_err());
}

#[test]
fn sum_of_product_gradient_matches_differences() {
    let mut rng = SplitMix64::new(11);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
    let r = grad_check("sum_ab", &[a, b], GradCheckOptions::default(), |v| {
        Ok(v[0].matmul(&v[1])?.sum_all())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r}");
}

#[test]
fn negative_control_is_caught() {
    assert!(!scaled_square_check(1.01, 4).unwrap().passed());
}

#[test]
fn composite_attention_like_graph() {
    // q·kᵀ softmax · v with a residual, all inputs trainable
    let mut rng = SplitMix64::new(5);
    let q = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
    let v = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
    let r = grad_check("attention", &[q, k, v], GradCheckOptions::default(), |x| {
        let a = x[0].matmul_t(&x[1])?.softmax(0.5);
        a.matmul(&x[2])?.add(&x[0])
    })
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn sampled_coordinates_are_bounded() {
    let mut rng = SplitMix64::new(6);
    let x = Tensor::<f64>::randn(&[10, 10], 1.0, &mut rng);
    let opts = GradCheckOptions {
        max_coords: Some(7),
        ..Default::default()
    };
    let r = grad_check("square", &[x], opts, |v| Ok(v[0].square().sum_all())).unwrap();
    assert!(r.passed());
    assert!(r.worst[0].unwrap().coord < 100);
}

#[test]
fn fan_out_accumulates_through_shared_leaf() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, -3.0]).unwrap());
    let l = x.sum_all().add(&x.mul(&x).unwrap().sum_all()).unwrap();
    let g = tape.backward(&l).unwrap();
    assert_eq!(g.wrt(&x).data(), &[3.0, 5.0, -5.0]);
}

#[test]
fn concat_of_constant_and_leaf_routes_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[2, 2]));
    let c = tape.constant(Tensor::ones(&[2, 3]));
    let y = Var::concat(&[&c, &x]).unwrap().square().sum_all();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.wrt(&x).data(), &[2.0; 4]);
}
