//! Randomized property suites over the pipeline and metrics invariants.

use proptest::prelude::*;

use defacer_core::metrics::{dice, precision_recall, ConfusionCounts};
use defacer_core::pipeline::{
    augment, deface, normalize_intensity, resample_nearest_mask, resample_trilinear,
    threshold_mask, MaskVolume, RigidAugmentation, Volume,
};

fn small_dims() -> impl Strategy<Value = [usize; 3]> {
    (1usize..6, 1usize..6, 1usize..8).prop_map(|(d, h, w)| [d, h, w])
}

fn volume_and_mask() -> impl Strategy<Value = (Volume, MaskVolume)> {
    small_dims().prop_flat_map(|dims| {
        let n = dims[0] * dims[1] * dims[2];
        (
            prop::collection::vec(-10.0f32..10.0, n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(move |(vals, bits)| {
                (
                    Volume::new(dims, [1.0; 3], vals).unwrap(),
                    MaskVolume::new(dims, [1.0; 3], bits).unwrap(),
                )
            })
    })
}

fn mask_pair() -> impl Strategy<Value = (MaskVolume, MaskVolume)> {
    small_dims().prop_flat_map(|dims| {
        let n = dims[0] * dims[1] * dims[2];
        (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(move |(a, b)| {
                (
                    MaskVolume::new(dims, [1.0; 3], a).unwrap(),
                    MaskVolume::new(dims, [1.0; 3], b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn deface_is_idempotent((v, m) in volume_and_mask()) {
        let once = deface(&v, &m).unwrap();
        let twice = deface(&once, &m).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deface_never_touches_kept_voxels((v, m) in volume_and_mask()) {
        let out = deface(&v, &m).unwrap();
        for i in 0..v.data.len() {
            if m.data[i] == 1 {
                prop_assert_eq!(out.data[i].to_bits(), v.data[i].to_bits());
            } else {
                prop_assert_eq!(out.data[i], 0.0);
            }
        }
    }

    #[test]
    fn threshold_is_idempotent_on_binary((_, m) in volume_and_mask(), tau in 0.05f64..0.95) {
        // a binary-valued probability volume thresholds to itself at any
        // interior tau, and re-thresholding changes nothing
        let as_probs = Volume::new(
            m.dims,
            m.spacing,
            m.data.iter().map(|&b| b as f32).collect(),
        ).unwrap();
        let once = threshold_mask(&as_probs, tau).unwrap();
        let again_probs = Volume::new(
            once.dims,
            once.spacing,
            once.data.iter().map(|&b| b as f32).collect(),
        ).unwrap();
        let twice = threshold_mask(&again_probs, tau).unwrap();
        prop_assert_eq!(&once.data, &twice.data);
        prop_assert_eq!(&once.data, &m.data);
    }

    #[test]
    fn masks_stay_binary_through_stages(
        (v, m) in volume_and_mask(),
        rot in -10.0f64..10.0,
        scale in 0.9f64..1.1,
        td in 1usize..8,
        th in 1usize..8,
        tw in 1usize..8,
    ) {
        let aug = RigidAugmentation { rotation_deg: [rot, -rot, rot / 2.0], scale };
        let (_, am) = augment(&v, &m, &aug).unwrap();
        prop_assert!(am.is_binary());
        let rm = resample_nearest_mask(&am, [td, th, tw]).unwrap();
        prop_assert!(rm.is_binary());
        let probs = Volume::new(
            rm.dims,
            rm.spacing,
            rm.data.iter().map(|&b| b as f32).collect(),
        ).unwrap();
        let tm = threshold_mask(&probs, 0.5).unwrap();
        prop_assert!(tm.is_binary());
    }

    #[test]
    fn trilinear_resampling_never_overshoots(
        (v, _) in volume_and_mask(),
        td in 1usize..9,
        th in 1usize..9,
        tw in 1usize..9,
    ) {
        let lo = v.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = v.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let r = resample_trilinear(&v, [td, th, tw]).unwrap();
        for &x in &r.data {
            prop_assert!(x >= lo && x <= hi, "{x} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn normalize_lands_in_unit_range((v, _) in volume_and_mask()) {
        let n = normalize_intensity(&v);
        for &x in &n.data {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let d_ab = dice(&a, &b).unwrap();
        let d_ba = dice(&b, &a).unwrap();
        prop_assert_eq!(d_ab, d_ba);
        prop_assert!((0.0..=1.0).contains(&d_ab));
        let (p, r) = precision_recall(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&r));
        // F1 identity whenever precision + recall > 0
        if p + r > 0.0 {
            let f1 = 2.0 * p * r / (p + r);
            prop_assert!((d_ab - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_shared_permutation((a, b) in mask_pair(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..a.data.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let n = a.data.len();
        let permuted = |m: &MaskVolume| {
            let data: Vec<u8> = order.iter().map(|&i| m.data[i]).collect();
            MaskVolume::new([1, 1, n], [1.0; 3], data).unwrap()
        };
        let flat = |m: &MaskVolume| {
            MaskVolume::new([1, 1, n], [1.0; 3], m.data.clone()).unwrap()
        };
        let c0 = ConfusionCounts::from_masks(&flat(&a), &flat(&b)).unwrap();
        let c1 = ConfusionCounts::from_masks(&permuted(&a), &permuted(&b)).unwrap();
        prop_assert_eq!(c0, c1);
    }

    #[test]
    fn augmentation_replays_exactly(
        (v, m) in volume_and_mask(),
        rot0 in -10.0f64..10.0,
        rot1 in -10.0f64..10.0,
        rot2 in -10.0f64..10.0,
        scale in 0.9f64..1.1,
    ) {
        let aug = RigidAugmentation { rotation_deg: [rot0, rot1, rot2], scale };
        let (v1, m1) = augment(&v, &m, &aug).unwrap();
        let (v2, m2) = augment(&v, &m, &aug).unwrap();
        prop_assert_eq!(&v1.data, &v2.data);
        prop_assert_eq!(&m1.data, &m2.data);
    }
}
