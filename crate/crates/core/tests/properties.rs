use hydra_core::checkpoint::{Checkpoint, ModelCheckpoint};
use hydra_core::data::{cube_from_bytes, cube_to_bytes, split_indices, HsiCube};
use hydra_core::student::check_input_size;
use hydra_core::teacher::{Teacher, TeacherConfig};
use hydra_core::training::{Stage, StageConfig};
use proptest::prelude::*;

fn cube_strategy() -> impl Strategy<Value = HsiCube> {
    (1usize..6, 1usize..6, 1usize..12).prop_flat_map(|(h, w, b)| {
        prop::collection::vec(0.0f32..=1.0, h * w * b)
            .prop_map(move |v| HsiCube::new(h, w, b, v.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hsic_round_trip_is_exact(cube in cube_strategy()) {
        let back = cube_from_bytes(&cube_to_bytes(&cube).unwrap()).unwrap();
        prop_assert_eq!(back, cube);
    }

    #[test]
    fn truncated_hsic_is_rejected(cube in cube_strategy(), cut in 1usize..16) {
        let bytes = cube_to_bytes(&cube).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(cube_from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn band_drop_keeps_the_other_bands(cube in cube_strategy(), a in 0usize..12, len in 1usize..4) {
        let b = cube.bands();
        let range = a.min(b - 1)..(a + len).min(b);
        let dropped = range.len();
        match cube.drop_bands(std::slice::from_ref(&range)) {
            Ok(out) => {
                prop_assert_eq!(out.bands(), b - dropped);
                let kept: Vec<usize> = (0..b).filter(|k| !range.contains(k)).collect();
                for (i, j) in [(0, 0), (cube.height() - 1, cube.width() - 1)] {
                    let want: Vec<f64> = kept.iter().map(|&k| cube.pixel(i, j)[k]).collect();
                    prop_assert_eq!(out.pixel(i, j), &want[..]);
                }
            }
            Err(_) => prop_assert_eq!(dropped, b),
        }
    }

    #[test]
    fn split_is_a_seeded_partition(n in 2usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
        if let Ok((train, val)) = split_indices(n, (1.0 - frac, frac), seed) {
            prop_assert!(!train.is_empty() && !val.is_empty());
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(split_indices(n, (1.0 - frac, frac), seed).unwrap(), (train, val));
        }
    }

    #[test]
    fn cosine_schedule_stays_in_range(epochs in 0usize..200, lr in 1e-5f64..1.0, ratio in 0.0f64..1.0) {
        let mut cfg = StageConfig::new(Stage::Distill);
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.min_learning_rate = lr * ratio;
        let tol = 1e-12 * lr;
        prop_assert!((cfg.learning_rate_at(0) - lr).abs() <= tol);
        for e in 0..epochs {
            let v = cfg.learning_rate_at(e);
            prop_assert!(v <= lr + tol && v >= cfg.min_learning_rate - tol);
            if e > 0 {
                prop_assert!(v <= cfg.learning_rate_at(e - 1));
            }
        }
    }

    #[test]
    fn stage_config_text_round_trips(stage in 1u64..4, epochs in 0usize..500, batch in 1usize..64, seed in any::<u64>()) {
        let mut cfg = StageConfig::new(Stage::from_number(stage).unwrap());
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.seed = seed;
        let back = StageConfig::parse(&cfg.to_config_string(), Stage::Autoencode).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn input_size_law(h in 0usize..100, w in 0usize..100) {
        let ok = h > 0 && w > 0 && h % 8 == 0 && w % 8 == 0;
        prop_assert_eq!(check_input_size(h, w).is_ok(), ok);
    }

    #[test]
    fn teacher_levels_follow_the_compression_ratio(b in 4usize..80, l in 1usize..80) {
        prop_assume!(l < b);
        let cfg = TeacherConfig::new(b, l).unwrap();
        let n = cfg.levels();
        prop_assert!(l << n <= b && l << (n + 1) > b);
        prop_assert_eq!(cfg.widths().len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn truncated_checkpoint_is_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let teacher = Teacher::new(TeacherConfig::new(8, 2).unwrap(), seed).unwrap();
        let ck = ModelCheckpoint { stage: Stage::Autoencode, teacher, student: None, train_state: None };
        let bytes = ck.to_checkpoint().to_bytes().unwrap();
        prop_assert_eq!(
            ModelCheckpoint::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap().to_checkpoint().to_bytes().unwrap(),
            bytes.clone()
        );
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }
}
