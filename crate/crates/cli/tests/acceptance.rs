//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use gazesynth::dataset::{build_dataset, EvalDataset};
use gazesynth::estimator::{gradients, loss, ArchitectureSpec, FeatureMode, ModelWeights, Provenance, TrainingSample};
use gazesynth::preprocess::{crop_eyes, normalize_roll, preprocess, LandmarkSet, PreprocessConfig};
use gazesynth::protocol::{angular_error, calibration_split, compare_cases, evaluate, leave_one_out, summarize, Experiment, RunReport, SampleError};
use gazesynth::raster::Raster;
use gazesynth::scene::{generate_cohort, ProfileConfig, ProfileId};
use gazesynth_cli::commands::read_report;
use gazesynth_cli::import::{ImportManifest, ImportRecord};
use gazesynth_cli::manifest::{dataset_dir, read_manifest};
use gazesynth_cli::WorkbenchConfig;
use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    println!("criterion {:>2} [{}]: {} - {}", o.id, o.name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn seeds_passing(flags: &[bool]) -> usize {
    flags.iter().filter(|&&f| f).count()
}

struct DeskRun {
    seed: u64,
    reports: Vec<RunReport>,
    /// Held-out error of the unadapted pretrained model per calibration user.
    unadapted_median: f64,
}

fn desk_runs() -> (Vec<DeskRun>, EvalDataset) {
    let config = WorkbenchConfig::default();
    let build = |id: ProfileId| {
        let cohort = generate_cohort(config.users(id), config.profile(id), config.master_seed).unwrap();
        build_dataset(&cohort, FeatureMode::Image, &config.preprocess).unwrap()
    };
    let du = build(ProfileId::U);
    let di = build(ProfileId::I);
    println!("desk cohort: profile U {} samples, profile I {} samples", du.sample_count(), di.sample_count());
    let mut runs = Vec::new();
    for seed in SEEDS {
        let t = Instant::now();
        let mut e = Experiment::new(config.experiment.clone(), seed, Some(&du), Some(&di));
        let reports: Vec<RunReport> = (1..=5).map(|c| e.run_case(c).unwrap()).collect();
        let pre = e.pretrained_weights()[&0].clone();
        let mut errors = Vec::new();
        for user in &di.users {
            let split = calibration_split(&user.sessions, config.experiment.permute_calibration).unwrap();
            let test = user.sessions.iter().filter(|s| split.test.contains(&s.session_id));
            let samples = evaluate(&pre, &di, user.user_id, test.flat_map(|s| s.samples.iter().map(move |x| (s, x)))).unwrap();
            errors.extend(samples.iter().map(|s| s.error_deg));
        }
        let unadapted_median = summarize(&errors).unwrap().median_deg;
        let line: Vec<String> = reports.iter().map(|r| format!("c{} {:.2}/{:.2}/{:.2}", r.case.id, r.pooled.mean_deg, r.pooled.std_deg, r.pooled.median_deg)).collect();
        println!("seed {seed} ({:.0} s): {}", t.elapsed().as_secs_f64(), line.join("  "));
        runs.push(DeskRun { seed, reports, unadapted_median });
    }
    (runs, di)
}

fn criteria_1_to_3(runs: &[DeskRun]) -> Vec<Outcome> {
    let mut gaps = Vec::new();
    let mut comparable = Vec::new();
    let mut compact = Vec::new();
    let (mut d1, mut d2, mut d3) = (Vec::new(), Vec::new(), Vec::new());
    for run in runs {
        let c = compare_cases(&run.reports).unwrap();
        let gap = c.calibration_gap.unwrap();
        gaps.push(gap >= 1.5);
        d1.push(format!("s{} {gap:.2}", run.seed));
        let (a, b) = (run.reports[1].pooled, run.reports[2].pooled);
        comparable.push(c.comparable_2_3.unwrap());
        d2.push(format!("s{} |{:.2}-{:.2}|<={:.2}", run.seed, a.mean_deg, b.mean_deg, 0.25 * a.std_deg.max(b.std_deg)));
        let iqr: Vec<f64> = run.reports[..3].iter().map(|r| r.pooled.iqr()).collect();
        compact.push(c.compact_1.unwrap());
        d3.push(format!("s{} {:.2}<min({:.2},{:.2})", run.seed, iqr[0], iqr[1], iqr[2]));
    }
    let outcome = |id, name, flags: &[bool], detail: Vec<String>| Outcome {
        id,
        name,
        pass: seeds_passing(flags) >= 4,
        detail: format!("{}/5 seeds; {}", seeds_passing(flags), detail.join(", ")),
    };
    vec![
        outcome(1, "calibration gap, median5 >= 1.5 x median4", &gaps, d1),
        outcome(2, "cases 2 and 3 comparable", &comparable, d2),
        outcome(3, "case 1 most compact", &compact, d3),
    ]
}

fn fine_tune_check(runs: &[DeskRun]) {
    let flags: Vec<bool> = runs.iter().map(|r| r.reports[3].pooled.median_deg < r.unadapted_median).collect();
    let detail: Vec<String> =
        runs.iter().map(|r| format!("s{} {:.2}<{:.2}", r.seed, r.reports[3].pooled.median_deg, r.unadapted_median)).collect();
    println!(
        "supplementary [fine-tuning beats the unadapted model]: {} - {}/5 seeds; {}",
        if seeds_passing(&flags) >= 4 { "PASS" } else { "FAIL" },
        seeds_passing(&flags),
        detail.join(", ")
    );
}

/// Explicit gaze vectors from a viewpoint placed perpendicular to the error.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut tested = 0;
    while tested < 1000 {
        let t = Vector3::new(rng.gen_range(-200.0..200.0), rng.gen_range(-150.0..150.0), 0.0);
        let dist = rng.gen_range(300.0..900.0);
        let (theta, err_mm) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..dist * 0.17));
        let delta = Vector3::new(theta.cos(), theta.sin(), 0.0) * err_mm;
        let pred = t + delta;
        let helper = if delta.norm() > 0.0 { delta.normalize() } else { Vector3::x() };
        let normal = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0));
        let n = (normal - helper * normal.dot(&helper)).normalize();
        let eye = t + n * dist;
        let (g_true, g_pred) = (t - eye, pred - eye);
        let oracle = g_true.cross(&g_pred).norm().atan2(g_true.dot(&g_pred)).to_degrees();
        if oracle >= 10.0 {
            continue;
        }
        let got = angular_error(Point2::new(pred.x, pred.y), Point2::new(t.x, t.y), t, eye).unwrap();
        worst = worst.max((got - oracle).abs());
        tested += 1;
    }
    Outcome { id: 4, name: "angular metric vs 3D oracle", pass: worst <= 0.02, detail: format!("1000 configs, max |diff| {worst:.2e} deg") }
}

fn random_spec(rng: &mut ChaCha8Rng) -> ArchitectureSpec {
    use gazesynth::estimator::{Activation, ConvBlockSpec, InputShape};
    let input = InputShape { channels: rng.gen_range(1..=2), height: rng.gen_range(3..=7), width: rng.gen_range(3..=8) };
    let mut conv = Vec::new();
    let mut ch = input.channels;
    for _ in 0..rng.gen_range(0..=2) {
        let block = if rng.gen_bool(0.4) {
            ConvBlockSpec { out_channels: ch, stride: 1, skip: true }
        } else {
            ConvBlockSpec { out_channels: rng.gen_range(1..=3), stride: rng.gen_range(1..=2), skip: false }
        };
        ch = block.out_channels;
        conv.push(block);
    }
    let activation = if rng.gen_bool(0.7) { Activation::Relu } else { Activation::Identity };
    ArchitectureSpec { input, conv, fc: [rng.gen_range(1..=5), rng.gen_range(1..=4), 2], activation }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let h = 1e-4;
    let (mut passed, mut params, mut worst) = (0, 0, 0.0f64);
    let configs = 25;
    for _ in 0..configs {
        let spec = random_spec(&mut rng);
        let n = ModelWeights::zeros(spec.clone()).unwrap().params().len();
        let w = ModelWeights::from_params(spec.clone(), (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect(), Provenance::Random).unwrap();
        let data: Vec<TrainingSample> = (0..3)
            .map(|_| TrainingSample {
                features: (0..spec.input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            })
            .collect();
        let batch: Vec<&TrainingSample> = data.iter().collect();
        let g = gradients(&w, &batch).unwrap();
        let mut ok = true;
        for i in 0..n {
            let mut plus = w.clone();
            plus.params_mut()[i] += h;
            let mut minus = w.clone();
            minus.params_mut()[i] -= h;
            let numeric = (loss(&plus, &batch).unwrap() - loss(&minus, &batch).unwrap()) / (2.0 * h);
            let rel = (g.values[i] - numeric).abs() / g.values[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            ok &= rel < 1e-4;
        }
        params += n;
        passed += usize::from(ok);
    }
    Outcome {
        id: 5,
        name: "finite-difference gradients",
        pass: passed == configs,
        detail: format!("{passed}/{configs} architectures, {params} parameters, max rel err {worst:.2e}"),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = PreprocessConfig::default();
    let mut failures = Vec::new();
    for case in 0..500 {
        let seed: u32 = rng.gen();
        let pixels = (0..360u32).flat_map(|y| (0..640u32).map(move |x| 1 + ((x * 31 ^ y * 17).wrapping_add(seed) % 255) as u8)).collect();
        let src = Raster::from_pixels(640, 360, pixels).unwrap();
        let mid = Point2::new(rng.gen_range(140.0..500.0), rng.gen_range(100.0..260.0));
        let roll: f64 = rng.gen_range(-35.0f64..35.0).to_radians();
        let corners = |d: f64| {
            let half = nalgebra::Vector2::new(roll.cos(), roll.sin()) * d / 2.0;
            LandmarkSet { outer_left: mid - half, outer_right: mid + half, extra: vec![mid - half * 0.4, mid + half * 0.4, mid] }
        };
        let dist = rng.gen_range(40.0..250.0);
        let lm = corners(dist);
        let canvas = preprocess(&src, &lm, &config).unwrap();
        let mut bad = Vec::new();
        if (canvas.raster.width(), canvas.raster.height()) != (390, 85) {
            bad.push("size");
        }
        if (canvas.landmarks.outer_left.y - canvas.landmarks.outer_right.y).abs() >= 0.5 {
            bad.push("level");
        }
        let (leveled, lm_level, _) = normalize_roll(&src, &lm).unwrap();
        let (crop, _, _) = crop_eyes(&leveled, &lm_level, &config).unwrap();
        let (w, h) = (crop.width(), crop.height());
        let (left, top) = ((390 - w) / 2, (85 - h) / 2);
        let padding_ok = (0..85).all(|y| {
            (0..390).all(|x| {
                let inside = x >= left && x < left + w && y >= top && y < top + h;
                canvas.raster.get(x, y) == if inside { crop.get(x - left, y - top) } else { 0 }
            })
        });
        if !padding_ok {
            bad.push("padding");
        }
        if lm.points().zip(canvas.landmarks.points()).any(|(p, q)| (canvas.transform.apply(p) - q).norm() >= 1e-6) {
            bad.push("transform");
        }
        let sweep: Vec<f64> = (0..10).map(|i| preprocess(&src, &corners(40.0 + 23.0 * i as f64), &config).unwrap().border_fraction).collect();
        if sweep.windows(2).any(|p| p[1] >= p[0]) {
            bad.push("border sweep");
        }
        if !bad.is_empty() {
            failures.push(format!("#{case}: {}", bad.join("+")));
        }
    }
    Outcome {
        id: 6,
        name: "preprocessing suite",
        pass: failures.is_empty(),
        detail: if failures.is_empty() { "500/500 samples".into() } else { failures.join(", ") },
    }
}

fn criterion_7(runs: &[DeskRun], di: &EvalDataset) -> Outcome {
    let mut problems = Vec::new();
    for n in 2..=25usize {
        let mut ds = di.clone();
        ds.users = (0..n)
            .map(|i| {
                let mut u = di.users[i % di.users.len()].clone();
                u.user_id = 100 + i;
                u
            })
            .collect();
        let folds = leave_one_out(
            &ds,
            |_, users| Ok((users.iter().map(|u| u.user_id).collect::<BTreeSet<_>>(), Provenance::Random)),
            |_, seen, test| {
                let leaked = seen.contains(&test.user_id);
                Ok(vec![SampleError { user: test.user_id, session: 0, point_index: 0, true_mm: [0.0; 2], pred_mm: [0.0; 2], error_deg: f64::from(u8::from(leaked)) }])
            },
        )
        .unwrap();
        let tests: BTreeSet<usize> = folds.iter().map(|f| f.test_user).collect();
        let ids: BTreeSet<usize> = ds.users.iter().map(|u| u.user_id).collect();
        let exhaustive = folds.len() == n && tests == ids;
        let disjoint = folds.iter().all(|f| f.samples[0].error_deg == 0.0 && f.train_users.len() == n - 1 && !f.train_users.contains(&f.test_user));
        if !exhaustive || !disjoint {
            problems.push(format!("LOO n={n}"));
        }
    }
    for run in runs {
        for r in &run.reports[..3] {
            let users = r.folds.len();
            let tests: BTreeSet<usize> = r.folds.iter().map(|f| f.test_user).collect();
            if tests.len() != users || r.folds.iter().any(|f| f.train_users.contains(&f.test_user) || f.train_users.len() != users - 1) {
                problems.push(format!("seed {} case {}", run.seed, r.case.id));
            }
        }
    }
    let mut splits = 0;
    for eu in &di.users {
        for permute in [false, true] {
            let split = calibration_split(&eu.sessions, permute).unwrap();
            let grids = |ids: &[usize]| -> Vec<usize> {
                let mut g: Vec<usize> = ids.iter().map(|id| eu.sessions.iter().find(|s| s.session_id == *id).unwrap().grid_points).collect();
                g.sort_unstable();
                g
            };
            let all: BTreeSet<usize> = split.train.iter().chain(&split.test).copied().collect();
            let ok = all.len() == 4
                && grids(&split.train) == [17, 65]
                && grids(&split.test) == [17, 65]
                && eu.sessions.iter().filter(|s| split.train.contains(&s.session_id)).map(|s| s.samples.len()).sum::<usize>() == 82;
            if !ok {
                problems.push(format!("split user {}", eu.user_id));
            }
            splits += 1;
        }
    }
    Outcome {
        id: 7,
        name: "protocol suite",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("LOO for 2..=25 users and {} desk reports; {splits} calibration splits 82/82", runs.len() * 3)
        } else {
            problems.join(", ")
        },
    }
}

/// Hashes of every manifest, weight file and report (timestamps excluded).
fn run_fingerprint(out: &Path) -> Vec<(String, String)> {
    let mut prints = Vec::new();
    for rel in files_under(out) {
        let path = out.join(&rel);
        let name = rel.display().to_string();
        if name.ends_with("manifest.json") || name.contains("weights") || name.ends_with(".csv") {
            prints.push((name, sha256_file(&path)));
        } else if name.starts_with("runs") && name.ends_with(".json") {
            prints.push((name, read_report(&path).unwrap().content_hash()));
        }
    }
    prints
}

fn criterion_8(tmp: &Path) -> Outcome {
    let mut prints = Vec::new();
    for attempt in 0..2 {
        let out = tmp.join(format!("det{attempt}"));
        let config = micro_config(&out);
        let cfg = write_config(tmp, &config);
        let cfg = cfg.to_str().unwrap();
        let g = gazesynth(&["generate", "--config", cfg]);
        let r = gazesynth(&["run", "--config", cfg, "--cases", "1,2,3,4,5", "--seeds", "11,12"]);
        assert!(g.status.success() && r.status.success(), "{}{}", stderr(&g), stderr(&r));
        prints.push(run_fingerprint(&out));
    }
    let reports = prints[0].iter().filter(|(n, _)| n.starts_with("runs") && n.ends_with(".json") && !n.contains("weights")).count();
    let weights = prints[0].iter().filter(|(n, _)| n.contains("weights")).count();
    let differing: Vec<&String> = prints[0].iter().zip(&prints[1]).filter(|(a, b)| a != b).map(|(a, _)| &a.0).collect();
    Outcome {
        id: 8,
        name: "determinism of generate + run",
        pass: prints[0].len() == prints[1].len() && differing.is_empty() && reports == 10,
        detail: format!("{} files compared ({reports} reports, {weights} weight files), {} differ", prints[0].len(), differing.len()),
    }
}

fn criterion_9() -> Outcome {
    let u = ProfileConfig::profile_u();
    let i = ProfileConfig::profile_i();
    let per_u = u.samples_per_user().unwrap();
    let total_u = generate_cohort(20, &u, 1).unwrap().sample_count();
    let cohort_i = generate_cohort(6, &i, 1).unwrap();
    let per_i: Vec<usize> = cohort_i.users.iter().map(|u| u.sessions.iter().map(|s| s.samples.len()).sum()).collect();
    Outcome {
        id: 9,
        name: "dataset cardinalities",
        pass: per_u == 5875 && total_u == 117_500 && per_i.iter().all(|&n| n == 164),
        detail: format!("profile U {per_u}/user, {total_u} for 20 users; profile I {per_i:?}/user"),
    }
}

fn criterion_10(tmp: &Path) -> Outcome {
    let out = tmp.join("roundtrip");
    let config = micro_config(&out);
    let cfg = write_config(tmp, &config);
    let g = gazesynth(&["generate", "--config", cfg.to_str().unwrap(), "--profile", "I"]);
    assert!(g.status.success(), "{}", stderr(&g));
    let src_dir = dataset_dir(&out, ProfileId::I);
    let generated = read_manifest(&src_dir).unwrap();
    let src = &src_dir;
    let records = generated
        .users
        .iter()
        .flat_map(|u| u.sessions.iter().map(move |s| (u.user_id, s)))
        .flat_map(|(user, s)| {
            s.samples.iter().map(move |x| ImportRecord {
                image: format!("{}/{}", src.display(), x.image),
                outer_left: x.outer_corners[0],
                outer_right: x.outer_corners[1],
                true_mm: x.true_mm,
                distance_mm: x.distance_mm,
                user_id: user,
                session_id: s.session_id,
                point_index: Some(x.point_index),
            })
        })
        .collect();
    let manifest = ImportManifest { screen_mm: generated.screen_mm, records };
    let mpath = tmp.join("export.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
    let imported_out = tmp.join("imported");
    let o = gazesynth(&["import", "--strict", "--config", cfg.to_str().unwrap(), "--out", imported_out.to_str().unwrap(), mpath.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dst_dir = dataset_dir(&imported_out, ProfileId::I);
    let imported = read_manifest(&dst_dir).unwrap();
    let mut identical = 0;
    let mut total = 0;
    for (a, b) in generated.samples().zip(imported.samples()) {
        total += 1;
        if fs::read(src_dir.join(&a.canvas)).unwrap() == fs::read(dst_dir.join(&b.canvas)).unwrap() && a.canvas_transform == b.canvas_transform {
            identical += 1;
        }
    }
    let same_count = generated.sample_count() == imported.sample_count();
    Outcome {
        id: 10,
        name: "import round trip",
        pass: same_count && identical == total && total > 0,
        detail: format!("{identical}/{total} canvases byte-identical (profile-I label jitter {} px)", config.profile_i.label_jitter_px),
    }
}

fn main() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut outcomes = vec![criterion_4(), criterion_5(), criterion_6()];
    outcomes.push(criterion_8(tmp.path()));
    outcomes.push(criterion_9());
    outcomes.push(criterion_10(tmp.path()));
    let (runs, di) = desk_runs();
    outcomes.extend(criteria_1_to_3(&runs));
    outcomes.push(criterion_7(&runs, &di));
    fine_tune_check(&runs);
    outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &outcomes {
        report(o);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {}/{} criteria passed in {:.0} s", outcomes.len() - failed, outcomes.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
