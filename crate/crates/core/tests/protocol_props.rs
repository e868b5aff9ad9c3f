use std::collections::BTreeSet;
use std::sync::Mutex;

use gazesynth::dataset::{build_dataset, EvalDataset, EvalSample, EvalSession, EvalUser};
use gazesynth::estimator::{ArchitectureSpec, FeatureMode, Hyperparams, Provenance};
use gazesynth::preprocess::PreprocessConfig;
use gazesynth::protocol::*;
use gazesynth::scene::{generate_cohort, GridLayout, ProfileConfig};
use nalgebra::{Point2, Vector3};
use proptest::prelude::*;

fn session(id: usize, grid_points: usize) -> EvalSession {
    EvalSession {
        session_id: id,
        grid_points,
        samples: (0..grid_points)
            .map(|p| EvalSample { point_index: p, features: vec![0.0], true_mm: Point2::new(p as f64, 0.0), distance_mm: 550.0 })
            .collect(),
    }
}

fn synthetic_dataset(ids: &[usize]) -> EvalDataset {
    EvalDataset {
        name: "synthetic".into(),
        profile: None,
        mode: FeatureMode::Landmarks,
        screen_mm: (400.0, 300.0),
        users: ids.iter().map(|&user_id| EvalUser { user_id, sessions: vec![session(0, 3)] }).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn angular_error_is_a_monotone_metric(
        t in (0.0..400.0f64, 0.0..300.0f64),
        dir in 0.0..std::f64::consts::TAU,
        (r1, r2) in (0.0..200.0f64, 0.0..200.0f64),
        cam in (-50.0..50.0f64, -200.0..50.0f64, 300.0..800.0f64),
    ) {
        let true_mm = Point2::new(t.0, t.1);
        let t3 = Vector3::new(t.0 - 200.0, t.1 - 150.0, 0.0);
        let c = Vector3::new(cam.0, cam.1, cam.2);
        let at = |r: f64| angular_error(true_mm + nalgebra::Vector2::new(dir.cos(), dir.sin()) * r, true_mm, t3, c).unwrap();
        prop_assert_eq!(at(0.0), 0.0);
        let (e1, e2) = (at(r1), at(r2));
        prop_assert!(e1 >= 0.0 && e2 >= 0.0);
        if r1 > 0.0 {
            prop_assert!(e1 > 0.0);
        }
        if r1 < r2 {
            prop_assert!(e1 < e2);
        }
    }

    #[test]
    fn median_is_the_fiftieth_percentile(errors in prop::collection::vec(0.0..40.0f64, 1..300)) {
        let s = summarize(&errors).unwrap();
        let d = distribution_export(&errors).unwrap();
        prop_assert_eq!(d.percentiles[50], (50.0, s.median_deg));
        prop_assert_eq!(d.n, errors.len());
        prop_assert_eq!(d.bins.iter().map(|b| b.count).sum::<usize>(), errors.len());
        prop_assert!(s.percentiles.p25 <= s.median_deg && s.median_deg <= s.percentiles.p75);
    }

    #[test]
    fn calibration_split_partitions_with_grid_balance(order in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(), permute in any::<bool>()) {
        let layout = [65, 17, 65, 17];
        let sessions: Vec<EvalSession> = order.iter().map(|&i| session(10 + i, layout[i])).collect();
        let split = calibration_split(&sessions, permute).unwrap();
        let all: BTreeSet<usize> = split.train.iter().chain(&split.test).copied().collect();
        prop_assert_eq!(all, (10..14).collect::<BTreeSet<_>>());
        let points = |ids: &[usize]| -> Vec<usize> {
            let mut g: Vec<usize> = ids.iter().map(|id| sessions.iter().find(|s| s.session_id == *id).unwrap().grid_points).collect();
            g.sort_unstable();
            g
        };
        prop_assert_eq!(points(&split.train), vec![17, 65]);
        prop_assert_eq!(points(&split.test), vec![17, 65]);
        let flipped = calibration_split(&sessions, !permute).unwrap();
        prop_assert_eq!(flipped.train.iter().copied().collect::<BTreeSet<_>>(), split.test.iter().copied().collect::<BTreeSet<_>>());
    }
}

#[test]
fn leave_one_out_folds_are_disjoint_for_every_cohort_size() {
    for n in 2..=20 {
        let ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let ds = synthetic_dataset(&ids);
        let seen = Mutex::new(Vec::new());
        let folds = leave_one_out(
            &ds,
            |fold, users| {
                seen.lock().unwrap().push((fold, users.iter().map(|u| u.user_id).collect::<Vec<_>>()));
                Ok(((), Provenance::Random))
            },
            |_, _, user| {
                Ok(user
                    .samples()
                    .map(|(s, x)| SampleError {
                        user: user.user_id,
                        session: s.session_id,
                        point_index: x.point_index,
                        true_mm: [0.0; 2],
                        pred_mm: [0.0; 2],
                        error_deg: 1.0,
                    })
                    .collect())
            },
        )
        .unwrap();
        assert_eq!(folds.len(), n);
        let tests: BTreeSet<usize> = folds.iter().map(|f| f.test_user).collect();
        assert_eq!(tests, ids.iter().copied().collect());
        for f in &folds {
            assert!(!f.train_users.contains(&f.test_user));
            assert_eq!(f.train_users.len(), n - 1);
            assert!(f.samples.iter().all(|s| s.user == f.test_user));
            let train: BTreeSet<usize> = f.train_users.iter().copied().collect();
            let mut expected: BTreeSet<usize> = ids.iter().copied().collect();
            expected.remove(&f.test_user);
            assert_eq!(train, expected);
        }
        assert_eq!(seen.into_inner().unwrap().len(), n);
    }
    assert!(matches!(leave_one_out(&synthetic_dataset(&[4]), |_, _| Ok(((), Provenance::Random)), |_, _, _| Ok(vec![])), Err(ProtocolError::TooFewUsers(1))));
}

#[test]
fn profile_i_calibration_splits_are_82_82() {
    let cohort = generate_cohort(2, &ProfileConfig::profile_i(), 3).unwrap();
    for u in &cohort.users {
        let sessions: Vec<EvalSession> = u.sessions.iter().map(|s| session(s.session_id, s.grid_points)).collect();
        let split = calibration_split(&sessions, false).unwrap();
        let count = |ids: &[usize]| ids.iter().map(|id| sessions[*id].grid_points).sum::<usize>();
        assert_eq!((count(&split.train), count(&split.test)), (82, 82));
    }
}

fn micro_experiment() -> (EvalDataset, EvalDataset, ExperimentConfig) {
    let mut pu = ProfileConfig::profile_u();
    pu.sessions = gazesynth::scene::SessionSchedule::AllPoses { limit: Some(1) };
    let mut pi = ProfileConfig::profile_i();
    pi.grids = vec![GridLayout::Lattice { rows: 2, cols: 3 }, GridLayout::LatticeWithCenter { rows: 2, cols: 2 }];
    let mode = FeatureMode::Landmarks;
    let du = build_dataset(&generate_cohort(3, &pu, 1).unwrap(), mode, &PreprocessConfig::default()).unwrap();
    let di = build_dataset(&generate_cohort(3, &pi, 1).unwrap(), mode, &PreprocessConfig::default()).unwrap();
    let short = |h: Hyperparams| Hyperparams { epochs: 3, ..h };
    let mut config = ExperimentConfig::desk();
    config.architecture = ArchitectureSpec::landmark_default();
    config.pretrain = short(config.pretrain);
    config.transfer = short(config.transfer);
    config.fine_tune = short(config.fine_tune);
    config.calibration = short(config.calibration);
    (du, di, config)
}

#[test]
fn run_case_is_deterministic_and_records_provenance() {
    let (du, di, config) = micro_experiment();
    let run = || {
        let mut e = Experiment::new(config.clone(), 9, Some(&du), Some(&di));
        (1..=5).map(|c| e.run_case(c).unwrap()).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
        assert_eq!(x.content_hash(), y.content_hash());
    }
    assert!(a[1].folds.iter().all(|f| matches!(f.init, Provenance::Pretrained(_))));
    assert!(a[2].folds.iter().all(|f| f.init == Provenance::Random));
    assert!(a[3].folds.iter().all(|f| f.train_users == vec![f.test_user] && f.samples.len() == 11));
    assert_eq!(a[0].folds.len(), 3);

    let mut stamped = a[0].clone();
    stamped.created_at = 1_700_000_000;
    assert_eq!(stamped.content_hash(), a[0].content_hash());

    let mut other = Experiment::new(config.clone(), 10, Some(&du), Some(&di));
    assert_ne!(other.run_case(3).unwrap().content_hash(), a[2].content_hash());

    let mut missing = Experiment::new(config, 9, None, Some(&di));
    assert!(matches!(missing.run_case(2), Err(ProtocolError::MissingCohort { case: 2, .. })));
}
