use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use gazesynth::dataset::{prepare_frame, viewing_distance, EvalDataset};
use gazesynth::estimator::save_weights;
use gazesynth::protocol::{compare_cases, distribution_export, Experiment, ExperimentCase, RunReport};
use gazesynth::scene::{generate_cohort, Cohort, CohortUser, ProfileId};
use rayon::prelude::*;

use crate::config::WorkbenchConfig;
use crate::error::{Classify, CliError, CliResult};
use crate::import::{import_dataset, read_import_manifest, RecordFailure};
use crate::lock::OutputLock;
use crate::manifest::{
    canvas_path, dataset_dir, frame_path, load_dataset, write_image, write_manifest, DatasetManifest, DatasetSource, GroundTruth,
    ManifestSample, ManifestSession, ManifestUser, MANIFEST_FORMAT_VERSION,
};

/// Parses a comma-separated case list such as `1,2,5` into sorted unique ids.
pub fn parse_cases(list: &str) -> CliResult<Vec<u8>> {
    let mut ids = BTreeSet::new();
    for token in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let case: ExperimentCase = token.parse().usage_err()?;
        ids.insert(case.id);
    }
    if ids.is_empty() {
        return Err(CliError::usage(format!("no cases in '{list}'")));
    }
    Ok(ids.into_iter().collect())
}

pub fn parse_seeds(list: &str) -> CliResult<Vec<u64>> {
    let seeds: Vec<u64> = list
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::usage(format!("invalid seed '{t}'"))))
        .collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err(CliError::usage(format!("no seeds in '{list}'")));
    }
    Ok(seeds)
}

fn user_manifest(dir: &Path, cohort: &Cohort, user: &CohortUser, config: &WorkbenchConfig) -> anyhow::Result<ManifestUser> {
    let mut sessions = Vec::with_capacity(user.sessions.len());
    for session in &user.sessions {
        let mut samples = Vec::with_capacity(session.samples.len());
        for s in &session.samples {
            let frame = prepare_frame(cohort, &user.params, s, &config.preprocess)?;
            let point = s.target.index;
            let image = frame_path(s.user_id, s.session_id, point);
            let canvas = canvas_path(s.user_id, s.session_id, point);
            write_image(dir, &image, &frame.raw)?;
            write_image(dir, &canvas, &frame.canvas.raster)?;
            samples.push(ManifestSample {
                point_index: point,
                image,
                canvas,
                true_mm: s.target.position_screen_mm,
                distance_mm: viewing_distance(s),
                outer_corners: [frame.labelled.outer_left, frame.labelled.outer_right],
                canvas_transform: frame.canvas.transform,
                canvas_landmarks: frame.canvas.landmarks,
                border_fraction: frame.canvas.border_fraction,
                ground_truth: Some(GroundTruth { scene: s.clone(), annotation: frame.annotation }),
            });
        }
        sessions.push(ManifestSession { session_id: session.session_id, grid_points: session.grid_points, samples });
    }
    Ok(ManifestUser { user_id: user.params.user_id, params: Some(user.params), sessions })
}

/// Generates, renders and preprocesses one profile's cohort into
/// `<out>/datasets/profile-X`, replacing whatever was there.
pub fn generate_profile(config: &WorkbenchConfig, profile: ProfileId, out: &Path) -> CliResult<DatasetManifest> {
    let profile_config = config.profile(profile);
    let cohort = generate_cohort(config.users(profile), profile_config, config.master_seed).usage_err()?;
    let dir = dataset_dir(out, profile);
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display())).runtime_err()?;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime_err()?;
    let users = cohort
        .users
        .par_iter()
        .map(|u| user_manifest(&dir, &cohort, u, config))
        .collect::<anyhow::Result<Vec<_>>>()
        .runtime_err()?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        name: format!("profile-{profile}"),
        profile,
        source: DatasetSource::Generated { master_seed: config.master_seed, profile_config: Box::new(profile_config.clone()) },
        screen_mm: (cohort.scene.screen.width_mm, cohort.scene.screen.height_mm),
        users,
    };
    write_manifest(&dir, &manifest).runtime_err()?;
    Ok(manifest)
}

pub fn generate(config: &WorkbenchConfig, profiles: &[ProfileId], out: &Path) -> CliResult<Vec<DatasetManifest>> {
    let _lock = OutputLock::acquire(out).runtime_err()?;
    profiles.iter().map(|&p| generate_profile(config, p, out)).collect()
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let json = serde_json::to_vec_pretty(value).expect("value serializes");
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn load_required(config: &WorkbenchConfig, out: &Path, profile: ProfileId) -> CliResult<EvalDataset> {
    let dir = dataset_dir(out, profile);
    if !dir.join(crate::manifest::MANIFEST_FILE).exists() {
        return Err(CliError::runtime(format!(
            "dataset for profile {profile} not found at {}; run `generate --profile {profile}` or `import --profile {profile}` first",
            dir.display()
        )));
    }
    load_dataset(&dir, config.feature_mode).with_context(|| format!("loading profile {profile} dataset")).runtime_err()
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("runs").join(format!("seed-{seed}"))
}

/// Runs every case for every seed; writes `case{c}.json`, `case{c}.csv` and
/// per-fold weights under `<out>/runs/seed-{s}`. Returns the report paths.
pub fn run(config: &WorkbenchConfig, cases: &[u8], seeds: &[u64], out: &Path) -> CliResult<Vec<PathBuf>> {
    let _lock = OutputLock::acquire(out).runtime_err()?;
    let mut cases = cases.to_vec();
    cases.sort_unstable();
    cases.dedup();
    let mut needed = BTreeSet::new();
    for &id in &cases {
        let case = ExperimentCase::get(id).usage_err()?;
        needed.insert(case.profile);
        if case.init == gazesynth::protocol::InitSource::Pretrained {
            needed.insert(ProfileId::U);
        }
    }
    let du = needed.contains(&ProfileId::U).then(|| load_required(config, out, ProfileId::U)).transpose()?;
    let di = needed.contains(&ProfileId::I).then(|| load_required(config, out, ProfileId::I)).transpose()?;

    let mut written = Vec::new();
    for &seed in seeds {
        let dir = seed_dir(out, seed);
        let weights_dir = dir.join("weights");
        fs::create_dir_all(&weights_dir).with_context(|| format!("creating {}", weights_dir.display())).runtime_err()?;
        let mut experiment = Experiment::new(config.experiment.clone(), seed, du.as_ref(), di.as_ref());
        for &id in &cases {
            let mut report = experiment.run_case(id).with_context(|| format!("seed {seed}")).runtime_err()?;
            report.created_at = timestamp();
            let json = dir.join(format!("case{id}.json"));
            write_json(&json, &report).runtime_err()?;
            let csv = dir.join(format!("case{id}.csv"));
            let file = fs::File::create(&csv).with_context(|| format!("creating {}", csv.display())).runtime_err()?;
            report.write_csv(std::io::BufWriter::new(file)).with_context(|| format!("writing {}", csv.display())).runtime_err()?;
            for (fold, w) in experiment.fold_weights(id) {
                save_weights(w, &weights_dir.join(format!("case{id}_fold{fold}.json"))).runtime_err()?;
            }
            written.push(json);
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> anyhow::Result<RunReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed report {}", path.display()))
}

fn fmt_flag(flag: Option<bool>) -> &'static str {
    match flag {
        Some(true) => "yes",
        Some(false) => "no",
        None => "n/a",
    }
}

/// Compares the given reports and exports their error distributions into
/// `<out>/reports`. Returns the text that `report` prints.
pub fn report(files: &[PathBuf], out: &Path) -> CliResult<String> {
    if files.is_empty() {
        return Err(CliError::usage("report needs at least one report file"));
    }
    let reports: Vec<RunReport> = files.iter().map(|f| read_report(f)).collect::<anyhow::Result<_>>().runtime_err()?;
    let _lock = OutputLock::acquire(out).runtime_err()?;
    let mut text = if reports.len() == 1 {
        let r = &reports[0].pooled;
        format!(
            "{:<6}{:>10}{:>10}{:>10}\n{:<6}{:>10.2}{:>10.2}{:>10.2}\n",
            "Case", "Mean(°)", "Std(°)", "Median(°)", reports[0].case.id, r.mean_deg, r.std_deg, r.median_deg
        )
    } else {
        let c = compare_cases(&reports).runtime_err()?;
        let mut t = c.table();
        t += &format!("cases 2/3 comparable: {}\n", fmt_flag(c.comparable_2_3));
        t += &format!("case 1 most compact: {}\n", fmt_flag(c.compact_1));
        if let Some(g) = c.calibration_gap {
            t += &format!("calibration gap (median 5 / median 4): {g:.2}\n");
        }
        t
    };
    let dir = out.join("reports");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime_err()?;
    for r in &reports {
        let d = distribution_export(&r.errors()).runtime_err()?;
        let stem = format!("case{}_seed{}", r.case.id, r.seed);
        let mut pct = String::from("percentile,error_deg\n");
        for (q, v) in &d.percentiles {
            pct += &format!("{q},{v}\n");
        }
        let mut hist = String::from("lower_deg,upper_deg,count\n");
        for b in &d.bins {
            hist += &format!("{},{},{}\n", b.lower_deg, b.upper_deg, b.count);
        }
        for (suffix, body) in [("percentiles", pct), ("histogram", hist)] {
            let path = dir.join(format!("{stem}_{suffix}.csv"));
            fs::write(&path, body).with_context(|| format!("writing {}", path.display())).runtime_err()?;
        }
    }
    text += &format!("distributions written to {}\n", dir.display());
    Ok(text)
}

#[derive(Debug)]
pub struct ImportSummary {
    pub manifest: DatasetManifest,
    pub failures: Vec<RecordFailure>,
    pub dir: PathBuf,
}

/// Imports an external manifest as the `profile` dataset. With `strict`,
/// any failed record makes the command fail after the report is written.
pub fn import(config: &WorkbenchConfig, manifest_path: &Path, profile: ProfileId, out: &Path) -> CliResult<ImportSummary> {
    let import = read_import_manifest(manifest_path).usage_err()?;
    let _lock = OutputLock::acquire(out).runtime_err()?;
    let dir = dataset_dir(out, profile);
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display())).runtime_err()?;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime_err()?;
    let outcome = import_dataset(manifest_path, &import, profile, &config.preprocess, &dir).runtime_err()?;
    write_manifest(&dir, &outcome.manifest).runtime_err()?;
    Ok(ImportSummary { manifest: outcome.manifest, failures: outcome.failures, dir })
}
