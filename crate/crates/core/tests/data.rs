use std::collections::BTreeSet;

use brau_net::config::{AugmentConfig, DataConfig, SplitMode};
use brau_net::data::{
    augment, collate, cutout, hflip, kfold_indices, load_dataset, make_splits, rot90, save_dataset,
    synth_dataset, vflip, Assignment, SegSample, Split,
};
use brau_net::labels::LabelMap;
use brau_net::pnm::{self, Image};
use brau_net::BrauError;
use brau_tensor::{SplitMix64, Tensor};

fn quantized(id: &str, h: usize, w: usize, c: usize, seed: u64) -> SegSample {
    let mut rng = SplitMix64::new(seed);
    SegSample {
        id: id.into(),
        image: Tensor::from_fn(&[h, w, c], |_| rng.below(256) as f32 / 255.0),
        mask: LabelMap::new(&[h, w], (0..h * w).map(|_| rng.below(3) as u8).collect()).unwrap(),
    }
}

fn histogram(m: &LabelMap) -> [usize; 256] {
    let mut h = [0; 256];
    m.data().iter().for_each(|&v| h[v as usize] += 1);
    h
}

#[test]
fn empty_directory_loads_nothing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    assert!(load_dataset(dir.path(), 3, 3).unwrap().is_empty());
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![quantized("b", 8, 8, 3, 1), quantized("a", 8, 8, 3, 2)];
    save_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path(), 3, 3).unwrap();
    assert_eq!(back.len(), 2);
    // lexicographic order
    assert_eq!(back[0].id, "a");
    assert!(back[0].image.bit_eq(&samples[1].image));
    assert_eq!(back[1].mask, samples[0].mask);
}

#[test]
fn gray_images_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = quantized("g", 8, 8, 1, 4);
    save_dataset(dir.path(), std::slice::from_ref(&s)).unwrap();
    assert!(dir.path().join("images/g.pgm").exists());
    let back = load_dataset(dir.path(), 1, 3).unwrap();
    assert!(back[0].image.bit_eq(&s.image));
}

#[test]
fn bad_mask_class_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &[quantized("x", 8, 8, 3, 3)]).unwrap();
    let err = load_dataset(dir.path(), 3, 2).unwrap_err();
    match &err {
        BrauError::Data { path, msg } => {
            assert!(path.ends_with("masks/x.pgm"));
            assert!(msg.contains("class index"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn missing_pair_and_size_mismatch_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &[quantized("x", 8, 8, 3, 3)]).unwrap();
    pnm::write(
        &dir.path().join("images/y.ppm"),
        &Image::rgb(8, 8, vec![0; 192]),
    )
    .unwrap();
    let err = load_dataset(dir.path(), 3, 3).unwrap_err().to_string();
    assert!(err.contains("y.ppm") && err.contains("no mask"), "{err}");

    pnm::write(
        &dir.path().join("masks/y.pgm"),
        &Image::gray(4, 8, vec![0; 32]),
    )
    .unwrap();
    let err = load_dataset(dir.path(), 3, 3).unwrap_err().to_string();
    assert!(err.contains("y.pgm") && err.contains("4x8"), "{err}");
}

#[test]
fn pnm_rejects_garbage() {
    assert!(pnm::decode(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(pnm::decode(b"P5\n2 2\n255\n\x00").is_err());
    let img = pnm::decode(b"P5\n# comment\n2 1\n255\n\x07\x09").unwrap();
    assert_eq!(img.data, vec![7, 9]);
}

#[test]
fn synthetic_data_is_deterministic() {
    let a = synth_dataset(6, 32, 3, 4, 11).unwrap();
    let b = synth_dataset(6, 32, 3, 4, 11).unwrap();
    let c = synth_dataset(6, 32, 3, 4, 12).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.image.bit_eq(&y.image));
        assert_eq!(x.mask, y.mask);
    }
    assert!(a.iter().zip(&c).any(|(x, y)| x.mask != y.mask));
}

#[test]
fn synthetic_masks_and_foreground_fraction() {
    let s = synth_dataset(100, 64, 3, 4, 0).unwrap();
    let mut fg = 0.0;
    for x in &s {
        assert!(x.mask.max_label().unwrap() < 4);
        assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        fg += x.mask.data().iter().filter(|&&v| v > 0).count() as f64 / x.mask.len() as f64;
    }
    let mean = fg / 100.0;
    assert!((0.05..=0.5).contains(&mean), "foreground fraction {mean}");
}

#[test]
fn flips_and_rotations() {
    let s = quantized("s", 4, 6, 2, 9);
    let h2 = hflip(&hflip(&s));
    assert!(h2.image.bit_eq(&s.image) && h2.mask == s.mask);
    let v2 = vflip(&vflip(&s));
    assert!(v2.image.bit_eq(&s.image) && v2.mask == s.mask);
    let r = rot90(&s, 1);
    assert_eq!((r.height(), r.width()), (6, 4));
    let r4 = rot90(&rot90(&r, 2), 1);
    assert!(r4.image.bit_eq(&s.image) && r4.mask == s.mask);
    // counter-clockwise: the top-right pixel moves to the top-left
    assert_eq!(r.mask.data()[0], s.mask.data()[5]);
    // 180° equals both flips
    let both = vflip(&hflip(&s));
    assert!(rot90(&s, 2).image.bit_eq(&both.image));
}

#[test]
fn cutout_touches_image_only() {
    let s = quantized("s", 8, 8, 3, 1);
    let c = cutout(&s, 2, 3, 4);
    assert_eq!(c.mask, s.mask);
    assert_eq!(c.image.at(&[2, 3, 0]), 0.0);
    assert_eq!(c.image.at(&[5, 6, 2]), 0.0);
    assert_eq!(c.image.at(&[6, 6, 0]), s.image.at(&[6, 6, 0]));
}

#[test]
fn augment_invariants() {
    let s = quantized("s", 8, 8, 3, 5);
    let mut rng = SplitMix64::new(1);
    let same = augment(&s, &AugmentConfig::none(), &mut rng);
    assert!(same.image.bit_eq(&s.image) && same.mask == s.mask);
    let rot = AugmentConfig {
        p_rot: 1.0,
        ..AugmentConfig::none()
    };
    let all = AugmentConfig {
        p_hflip: 1.0,
        p_vflip: 1.0,
        p_rot: 1.0,
        p_cutout: 1.0,
        ..AugmentConfig::default()
    };
    for seed in 0..20 {
        let r = augment(&s, &rot, &mut SplitMix64::new(seed));
        assert_eq!(histogram(&r.mask), histogram(&s.mask));
        assert!(!r.image.bit_eq(&s.image));
        let a = augment(&s, &all, &mut SplitMix64::new(seed));
        let b = augment(&s, &all, &mut SplitMix64::new(seed));
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(histogram(&a.mask), histogram(&s.mask));
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case{i:04}")).collect()
}

#[test]
fn fixed_split_counts() {
    let cfg = DataConfig {
        split_fractions: [490.0 / 612.0, 61.0 / 612.0, 61.0 / 612.0],
        ..DataConfig::default()
    };
    let a = make_splits(&ids(612), &cfg).unwrap();
    assert_eq!(a.indices(Split::Train).len(), 490);
    assert_eq!(a.indices(Split::Valid).len(), 61);
    assert_eq!(a.indices(Split::Test).len(), 61);
    let cfg = DataConfig {
        split_fractions: [0.8, 0.1, 0.1],
        ..DataConfig::default()
    };
    let b = make_splits(&ids(612), &cfg).unwrap();
    assert_eq!(b.indices(Split::Train).len(), 490);
    assert_eq!(b, make_splits(&ids(612), &cfg).unwrap());
    let other = DataConfig {
        seed: 1,
        ..cfg.clone()
    };
    assert_ne!(b, make_splits(&ids(612), &other).unwrap());
    assert!(make_splits(
        &ids(10),
        &DataConfig {
            split_fractions: [0.5, 0.5, 0.5],
            ..cfg
        }
    )
    .is_err());
}

#[test]
fn split_file_round_trip() {
    let a = make_splits(&ids(20), &DataConfig::default()).unwrap();
    assert_eq!(Assignment::from_text(&a.to_text()).unwrap(), a);
    assert!(Assignment::from_text("x\tbogus\n").is_err());
}

#[test]
fn kfold_covers_everything_once() {
    let folds = kfold_indices(10, 5, 3).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = BTreeSet::new();
    for f in &folds {
        assert_eq!(f.len(), 2);
        for &i in f {
            assert!(seen.insert(i));
        }
    }
    assert_eq!(seen.len(), 10);
    assert!(kfold_indices(3, 5, 0).is_err());

    let cfg = DataConfig {
        split_mode: SplitMode::Kfold,
        folds: 5,
        fold: 2,
        seed: 3,
        ..DataConfig::default()
    };
    let a = make_splits(&ids(10), &cfg).unwrap();
    assert_eq!(a.indices(Split::Valid), {
        let mut v = folds[2].clone();
        v.sort();
        v
    });
}

#[test]
fn collate_stacks_in_order() {
    let a = quantized("a", 4, 4, 3, 1);
    let b = quantized("b", 4, 4, 3, 2);
    let (x, y) = collate(&[&a, &b]).unwrap();
    assert_eq!(x.shape(), &[2, 4, 4, 3]);
    assert_eq!(y.dims(), &[2, 4, 4]);
    assert_eq!(&x.data()[48..], b.image.data());
    assert_eq!(y.sample(1), b.mask);
    let c = quantized("c", 8, 4, 3, 3);
    assert!(collate(&[&a, &c]).is_err());
    assert!(collate(&[]).is_err());
}
