#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gazesynth::estimator::Hyperparams;
use gazesynth::scene::{GridLayout, SessionSchedule};
use gazesynth_cli::WorkbenchConfig;
use sha2::{Digest, Sha256};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gazesynth"))
}

pub fn gazesynth(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Three users per profile, one profile-U pose and small profile-I grids,
/// two epochs per phase.
pub fn micro_config(out: &Path) -> WorkbenchConfig {
    let mut c = WorkbenchConfig { users_u: 3, users_i: 3, seeds: vec![7], output_dir: out.to_path_buf(), ..WorkbenchConfig::default() };
    c.profile_u.sessions = SessionSchedule::AllPoses { limit: Some(1) };
    c.profile_i.grids = vec![GridLayout::Lattice { rows: 2, cols: 3 }, GridLayout::LatticeWithCenter { rows: 2, cols: 2 }];
    let short = |h: Hyperparams| Hyperparams { epochs: 2, ..h };
    c.experiment.pretrain = short(c.experiment.pretrain);
    c.experiment.transfer = short(c.experiment.transfer);
    c.experiment.fine_tune = short(c.experiment.fine_tune);
    c.experiment.calibration = short(c.experiment.calibration);
    c
}

pub fn write_config(dir: &Path, config: &WorkbenchConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path
}

pub fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

/// Every regular file below `root`, relative and sorted.
pub fn files_under(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out.sort();
    out
}
