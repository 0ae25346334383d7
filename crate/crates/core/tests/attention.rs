use brau_net::bra::reference::{dense_attention, layer, routed_attention};
use brau_net::bra::{region_merge, region_partition, route_regions, PartitionSpec};
use brau_net::config::{ModelConfig, ScaleMode, TopK};
use brau_net::nn::Ctx;
use brau_tensor::{SplitMix64, Tape, Tensor};
use proptest::prelude::*;

fn run(
    cfg: &ModelConfig,
    shape: [usize; 4],
    top_k: TopK,
    seed: u64,
) -> (Tensor<f32>, Tensor<f64>, Tensor<f64>) {
    let c = shape[3];
    let (store, bra) = layer::<f32>(cfg, c, top_k, 0.5 / (c as f64).sqrt(), seed);
    let x = Tensor::<f32>::randn(&shape, 1.0, &mut SplitMix64::new(seed ^ 0xA5));
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let y = bra
        .forward(&ctx, &tape.constant(x.clone()))
        .unwrap()
        .into_value();
    (
        y,
        dense_attention(&x, &store, &bra),
        routed_attention(&x, &store, &bra).unwrap(),
    )
}

fn gap(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

fn cfg(s: usize) -> ModelConfig {
    ModelConfig {
        partition: s,
        ..ModelConfig::default()
    }
}

#[test]
fn full_routing_equals_dense_attention() {
    let cases: [([usize; 4], usize); 6] = [
        ([2, 8, 8, 8], 2),
        ([1, 8, 8, 16], 4),
        ([1, 12, 12, 8], 3),
        ([1, 16, 16, 64], 4),
        ([2, 4, 4, 16], 4),
        ([1, 1, 1, 32], 7),
    ];
    for (i, (shape, s)) in cases.into_iter().enumerate() {
        let (y, dense, _) = run(&cfg(s), shape, TopK::Full, i as u64);
        let g = gap(&y, &dense);
        assert!(g <= 1e-5, "{shape:?} S={s}: {g:e}");
    }
}

#[test]
fn one_pixel_regions_match_dense() {
    // every region holds a single token, as in the bottleneck at S = map side
    let (y, dense, _) = run(&cfg(2), [3, 2, 2, 32], TopK::Full, 11);
    assert!(gap(&y, &dense) <= 1e-5);
}

#[test]
fn scale_and_bias_variants_match_dense() {
    let mut c = cfg(2);
    c.scale_mode = ScaleMode::PerChannel;
    c.qkv_bias = false;
    let (y, dense, _) = run(&c, [1, 8, 8, 64], TopK::Count(4), 3);
    assert!(gap(&y, &dense) <= 1e-5);
}

#[test]
fn sparse_routing_matches_routed_oracle() {
    for (shape, s, k) in [
        ([2, 8, 8, 8], 2, 1),
        ([1, 8, 8, 16], 4, 3),
        ([1, 12, 12, 32], 3, 2),
        ([1, 16, 16, 64], 4, 5),
    ] {
        let (y, dense, routed) = run(&cfg(s), shape, TopK::Count(k), 5);
        assert!(gap(&y, &routed) <= 1e-5, "{shape:?} S={s} k={k}");
        assert!(
            gap(&y, &dense) > 1e-4,
            "sparse routing should differ from dense"
        );
    }
}

#[test]
fn top_k_above_region_count_is_rejected() {
    let (store, bra) = layer::<f32>(&cfg(2), 8, TopK::Count(5), 0.1, 0);
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store, false);
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 8]));
    assert!(bra.forward(&ctx, &x).is_err());
}

#[test]
fn routing_prefers_matching_regions() {
    // region means are one-hot; region i's query matches key region 3 - i
    let spec = PartitionSpec::new(2, 2, 2).unwrap();
    let mut q = vec![0.0f64; 16];
    let mut k = vec![0.0f64; 16];
    for i in 0..4 {
        q[i * 4 + i] = 1.0;
        k[(3 - i) * 4 + i] = 1.0;
    }
    let q = Tensor::new(&[1, 4, 1, 4], q).unwrap();
    let k = Tensor::new(&[1, 4, 1, 4], k).unwrap();
    let r = route_regions(&q, &k, 1).unwrap();
    assert_eq!(r.index, vec![3, 2, 1, 0]);
    assert_eq!(spec.regions(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_then_merge_is_identity(s in 1usize..4, rh in 1usize..4, rw in 1usize..4, c in 1usize..5, seed in 0u64..1000) {
        let (h, w) = (s * rh, s * rw);
        let spec = PartitionSpec::new(h, w, s).unwrap();
        let x = Tensor::<f64>::randn(&[2, h, w, c], 1.0, &mut SplitMix64::new(seed));
        let tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let p = region_partition(&v, &spec).unwrap();
        prop_assert_eq!(p.shape(), &[2, s * s, rh * rw, c]);
        // token (y, x) lands at (region, slot) given by locate
        for y in 0..h {
            for xx in 0..w {
                let (g, t) = spec.locate(y, xx);
                prop_assert_eq!(p.value().at(&[1, g, t, c - 1]), x.at(&[1, y, xx, c - 1]));
            }
        }
        let m = region_merge(&p, &spec).unwrap();
        prop_assert!(m.value().bit_eq(&x));
    }
}
