//! Evaluation protocol: angular error, summary statistics, leave-one-out and
//! calibration runners and the five transfer-learning cases.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::sync::Mutex;
use std::str::FromStr;

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{denormalize_target, EvalDataset, EvalSample, EvalSession, EvalUser};
use crate::estimator::{
    fine_tune, forward_batch, train, ArchitectureSpec, EstimatorError, Hyperparams, Init, ModelWeights, Provenance,
    TrainingSample,
};
use crate::scene::ProfileId;

pub const DESK_PRETRAIN_EPOCHS: usize = 80;
pub const DESK_TRANSFER_EPOCHS: usize = 200;
pub const DESK_FINE_TUNE_EPOCHS: usize = 200;
pub const DESK_CALIBRATION_EPOCHS: usize = 200;

/// Histogram bin width of [`distribution_export`].
pub const HISTOGRAM_BIN_DEG: f64 = 0.25;
pub const PERCENTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("camera and target coincide; angular error is undefined")]
    Degenerate,
    #[error("no errors to summarize")]
    Empty,
    #[error("non-finite error value {0}")]
    NonFinite(f64),
    #[error("calibration split needs two sessions of each of two grid sizes: {0}")]
    SplitStructure(String),
    #[error("leave-one-out needs at least 2 users, got {0}")]
    TooFewUsers(usize),
    #[error("unknown experiment case '{0}' (expected 1-5)")]
    UnknownCase(String),
    #[error("case {case} needs the profile-{profile} dataset")]
    MissingCohort { case: u8, profile: ProfileId },
    #[error("case {case}: dataset '{name}' is {got:?} but profile-{expected} is required")]
    WrongCohort { case: u8, name: String, expected: ProfileId, got: Option<ProfileId> },
    #[error("compare_cases needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("case {0} appears in more than one report")]
    DuplicateCase(u8),
    #[error("case {case}, fold {fold}: {source}")]
    Fold { case: u8, fold: usize, #[source] source: EstimatorError },
    #[error("held-out user {0} also appears in its own training set")]
    Leak(usize),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

/// Angle subtended at the viewpoint by a planar error `planar_mm` at distance `distance_mm`.
pub fn angle_for_distance(planar_mm: f64, distance_mm: f64) -> Result<f64> {
    if !(distance_mm > 0.0) {
        return Err(ProtocolError::Degenerate);
    }
    Ok((planar_mm / distance_mm).atan().to_degrees())
}

/// `atan(|pred - true| / |true_3d - camera|)` in degrees.
pub fn angular_error(pred_mm: Point2<f64>, true_mm: Point2<f64>, true_point_3d: Vector3<f64>, camera_pos: Vector3<f64>) -> Result<f64> {
    angle_for_distance((pred_mm - true_mm).norm(), (true_point_3d - camera_pos).norm())
}

/// Linear interpolation between closest ranks of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_errors(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(ProtocolError::Empty);
    }
    if let Some(&bad) = errors.iter().find(|e| !e.is_finite()) {
        return Err(ProtocolError::NonFinite(bad));
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub mean_deg: f64,
    /// Population standard deviation.
    pub std_deg: f64,
    pub median_deg: f64,
    pub percentiles: Percentiles,
}

impl ErrorSummary {
    pub fn iqr(&self) -> f64 {
        self.percentiles.p75 - self.percentiles.p25
    }
}

pub fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    let v = sorted_errors(errors)?;
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
    let [p5, p25, p50, p75, p95] = PERCENTILES.map(|q| percentile(&v, q));
    Ok(ErrorSummary {
        n,
        mean_deg: mean,
        std_deg: var.sqrt(),
        median_deg: p50,
        percentiles: Percentiles { p5, p25, p50, p75, p95 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower_deg: f64,
    pub upper_deg: f64,
    pub count: usize,
}

/// Enough of a distribution to redraw a violin or box plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    /// `(q, value)` for q = 0, 1, ..., 100.
    pub percentiles: Vec<(f64, f64)>,
    pub bin_width_deg: f64,
    /// Contiguous bins from the one holding the minimum to the one holding the maximum.
    pub bins: Vec<HistogramBin>,
}

pub fn distribution_export(errors: &[f64]) -> Result<Distribution> {
    let v = sorted_errors(errors)?;
    let percentiles = (0..=100).map(|q| (f64::from(q), percentile(&v, f64::from(q)))).collect();
    let bin_of = |e: f64| (e / HISTOGRAM_BIN_DEG).floor() as i64;
    let first = bin_of(v[0]);
    let last = bin_of(v[v.len() - 1]);
    let mut bins: Vec<HistogramBin> = (first..=last)
        .map(|b| HistogramBin { lower_deg: b as f64 * HISTOGRAM_BIN_DEG, upper_deg: (b + 1) as f64 * HISTOGRAM_BIN_DEG, count: 0 })
        .collect();
    for &e in &v {
        bins[(bin_of(e) - first) as usize].count += 1;
    }
    Ok(Distribution { n: v.len(), percentiles, bin_width_deg: HISTOGRAM_BIN_DEG, bins })
}

/// Session ids of a two-session calibration set and the two held-out sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Calibrates on the first session of each grid size and tests on the other
/// two; `permute` swaps the roles.
pub fn calibration_split(sessions: &[EvalSession], permute: bool) -> Result<CalibrationSplit> {
    if sessions.len() != 4 {
        return Err(ProtocolError::SplitStructure(format!("got {} sessions", sessions.len())));
    }
    let mut by_grid: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in sessions {
        by_grid.entry(s.grid_points).or_default().push(s.session_id);
    }
    if by_grid.len() != 2 || by_grid.values().any(|ids| ids.len() != 2) {
        let sizes: Vec<usize> = sessions.iter().map(|s| s.grid_points).collect();
        return Err(ProtocolError::SplitStructure(format!("grid sizes {sizes:?}")));
    }
    let ids: HashSet<usize> = sessions.iter().map(|s| s.session_id).collect();
    if ids.len() != 4 {
        return Err(ProtocolError::SplitStructure("session ids are not unique".into()));
    }
    let (a, b) = if permute { (1, 0) } else { (0, 1) };
    // largest grid first
    let groups: Vec<&Vec<usize>> = by_grid.values().rev().collect();
    Ok(CalibrationSplit { train: groups.iter().map(|g| g[a]).collect(), test: groups.iter().map(|g| g[b]).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub user: usize,
    pub session: usize,
    pub point_index: usize,
    pub true_mm: [f64; 2],
    pub pred_mm: [f64; 2],
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_user: usize,
    pub train_users: Vec<usize>,
    pub init: Provenance,
    pub summary: ErrorSummary,
    pub samples: Vec<SampleError>,
}

fn fold_report(fold: usize, test_user: usize, train_users: Vec<usize>, init: Provenance, samples: Vec<SampleError>) -> Result<FoldReport> {
    let errors: Vec<f64> = samples.iter().map(|s| s.error_deg).collect();
    Ok(FoldReport { fold, test_user, train_users, init, summary: summarize(&errors)?, samples })
}

/// Runs one fold per user: train on everyone else, evaluate on the held-out
/// user. Folds run in parallel; the report order is the user order.
pub fn leave_one_out<M: Send>(
    dataset: &EvalDataset,
    trainer: impl Fn(usize, &[&EvalUser]) -> Result<(M, Provenance)> + Sync,
    evaluator: impl Fn(usize, &M, &EvalUser) -> Result<Vec<SampleError>> + Sync,
) -> Result<Vec<FoldReport>> {
    let n = dataset.users.len();
    if n < 2 {
        return Err(ProtocolError::TooFewUsers(n));
    }
    dataset
        .users
        .par_iter()
        .enumerate()
        .map(|(fold, test)| {
            let training: Vec<&EvalUser> = dataset.users.iter().filter(|u| u.user_id != test.user_id).collect();
            if training.len() != n - 1 {
                return Err(ProtocolError::Leak(test.user_id));
            }
            let (model, init) = trainer(fold, &training)?;
            let samples = evaluator(fold, &model, test)?;
            fold_report(fold, test.user_id, training.iter().map(|u| u.user_id).collect(), init, samples)
        })
        .collect()
}

/// Predicts every sample of `sessions` and scores it.
pub fn evaluate<'a>(
    weights: &ModelWeights,
    dataset: &EvalDataset,
    user: usize,
    samples: impl IntoIterator<Item = (&'a EvalSession, &'a EvalSample)>,
) -> Result<Vec<SampleError>, EstimatorError> {
    let samples: Vec<(&EvalSession, &EvalSample)> = samples.into_iter().collect();
    let inputs: Vec<&[f64]> = samples.iter().map(|(_, s)| s.features.as_slice()).collect();
    let preds = forward_batch(weights, &inputs)?;
    Ok(samples
        .iter()
        .zip(preds)
        .map(|((session, s), p)| {
            let pred = denormalize_target(p, dataset.screen_mm);
            SampleError {
                user,
                session: session.session_id,
                point_index: s.point_index,
                true_mm: [s.true_mm.x, s.true_mm.y],
                pred_mm: [pred.x, pred.y],
                error_deg: ((pred - s.true_mm).norm() / s.distance_mm).atan().to_degrees(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Random,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    CohortLeaveOneOut,
    UserCalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExperimentCase {
    pub id: u8,
    pub init: InitSource,
    pub train_scope: TrainScope,
    pub profile: ProfileId,
}

impl ExperimentCase {
    pub const ALL: [ExperimentCase; 5] = [
        ExperimentCase { id: 1, init: InitSource::Random, train_scope: TrainScope::CohortLeaveOneOut, profile: ProfileId::U },
        ExperimentCase { id: 2, init: InitSource::Pretrained, train_scope: TrainScope::CohortLeaveOneOut, profile: ProfileId::I },
        ExperimentCase { id: 3, init: InitSource::Random, train_scope: TrainScope::CohortLeaveOneOut, profile: ProfileId::I },
        ExperimentCase { id: 4, init: InitSource::Pretrained, train_scope: TrainScope::UserCalibration, profile: ProfileId::I },
        ExperimentCase { id: 5, init: InitSource::Random, train_scope: TrainScope::UserCalibration, profile: ProfileId::I },
    ];

    pub fn get(id: u8) -> Result<Self> {
        Self::ALL.iter().copied().find(|c| c.id == id).ok_or_else(|| ProtocolError::UnknownCase(id.to_string()))
    }
}

impl FromStr for ExperimentCase {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self> {
        let id: u8 = s.trim().parse().map_err(|_| ProtocolError::UnknownCase(s.to_string()))?;
        Self::get(id).map_err(|_| ProtocolError::UnknownCase(s.to_string()))
    }
}

impl fmt::Display for ExperimentCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case {}", self.id)
    }
}

/// Where case 2 and case 4 take their starting weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    /// One shared model: the case-1 fold-0 weights.
    Fold0,
    /// Fold k uses the case-1 fold `k mod U` weights.
    PerFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: ArchitectureSpec,
    /// Case 1, also the source of the pretrained weights.
    pub pretrain: Hyperparams,
    /// Cases 2 and 3.
    pub transfer: Hyperparams,
    /// Case 4.
    pub fine_tune: Hyperparams,
    /// Case 5.
    pub calibration: Hyperparams,
    pub pretrain_source: PretrainSource,
    pub permute_calibration: bool,
}

impl ExperimentConfig {
    /// Desk-scale budget: the specified optimizer settings with per-phase
    /// epoch counts sized for a single CPU core.
    pub fn desk() -> Self {
        let epochs = |epochs| Hyperparams { epochs, ..Hyperparams::training() };
        Self {
            architecture: ArchitectureSpec::image_default(),
            pretrain: epochs(DESK_PRETRAIN_EPOCHS),
            transfer: epochs(DESK_TRANSFER_EPOCHS),
            fine_tune: Hyperparams { epochs: DESK_FINE_TUNE_EPOCHS, ..Hyperparams::fine_tuning() },
            calibration: epochs(DESK_CALIBRATION_EPOCHS),
            pretrain_source: PretrainSource::Fold0,
            permute_calibration: false,
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        self.architecture.validate()?;
        self.pretrain.validate()?;
        self.transfer.validate()?;
        self.calibration.validate()?;
        if !(self.fine_tune.learning_rate >= 0.0) || self.fine_tune.batch_size == 0 || !(0.0..1.0).contains(&self.fine_tune.momentum) {
            return Err(EstimatorError::Hyperparams(format!("invalid fine-tuning settings {:?}", self.fine_tune)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Stable seed for one training run of one fold of one case.
pub fn derive_seed(seed: u64, case: u8, fold: usize, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([case]);
    h.update((fold as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub case: ExperimentCase,
    pub init: InitSource,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    /// Seconds since the Unix epoch; excluded from [`RunReport::content_hash`].
    pub created_at: u64,
    pub std_convention: String,
    pub folds: Vec<FoldReport>,
    pub pooled: ErrorSummary,
}

impl RunReport {
    pub fn new(case: ExperimentCase, dataset: &str, seed: u64, config_hash: String, folds: Vec<FoldReport>) -> Result<Self> {
        let errors: Vec<f64> = folds.iter().flat_map(|f| f.samples.iter().map(|s| s.error_deg)).collect();
        Ok(Self {
            case,
            init: case.init,
            dataset: dataset.to_string(),
            seed,
            config_hash,
            created_at: 0,
            std_convention: "population".into(),
            pooled: summarize(&errors)?,
            folds,
        })
    }

    pub fn errors(&self) -> Vec<f64> {
        self.folds.iter().flat_map(|f| f.samples.iter().map(|s| s.error_deg)).collect()
    }

    /// SHA-256 of the JSON encoding with `created_at` zeroed.
    pub fn content_hash(&self) -> String {
        let mut copy = self.clone();
        copy.created_at = 0;
        hex::encode(Sha256::digest(serde_json::to_vec(&copy).expect("report serializes")))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "case,fold,user,session,point_index,true_x_mm,true_y_mm,pred_x_mm,pred_y_mm,error_deg")?;
        for f in &self.folds {
            for s in &f.samples {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    self.case.id, f.fold, s.user, s.session, s.point_index, s.true_mm[0], s.true_mm[1], s.pred_mm[0], s.pred_mm[1], s.error_deg
                )?;
            }
        }
        Ok(())
    }
}

/// Inputs of [`run_case`]; case-1 fold weights are cached for reuse as
/// pretrained initializations.
pub struct Experiment<'a> {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub profile_u: Option<&'a EvalDataset>,
    pub profile_i: Option<&'a EvalDataset>,
    pretrained: BTreeMap<usize, ModelWeights>,
    trained: BTreeMap<(u8, usize), ModelWeights>,
}

fn training_set(dataset: &EvalDataset, users: &[&EvalUser]) -> Vec<TrainingSample> {
    users.iter().flat_map(|u| u.samples().map(|(_, s)| dataset.training_sample(s))).collect()
}

impl<'a> Experiment<'a> {
    pub fn new(config: ExperimentConfig, seed: u64, profile_u: Option<&'a EvalDataset>, profile_i: Option<&'a EvalDataset>) -> Self {
        Self { config, seed, profile_u, profile_i, pretrained: BTreeMap::new(), trained: BTreeMap::new() }
    }

    /// Seeds the pretrained-weights cache, e.g. from a saved case-1 run.
    pub fn insert_pretrained(&mut self, fold: usize, weights: ModelWeights) {
        self.pretrained.insert(fold, weights);
    }

    pub fn pretrained_weights(&self) -> &BTreeMap<usize, ModelWeights> {
        &self.pretrained
    }

    /// Final weights of every fold of `case` run so far, by fold.
    pub fn fold_weights(&self, case: u8) -> impl Iterator<Item = (usize, &ModelWeights)> + '_ {
        self.trained.range((case, 0)..=(case, usize::MAX)).map(|(&(_, fold), w)| (fold, w))
    }

    fn dataset(&self, case: ExperimentCase, profile: ProfileId) -> Result<&'a EvalDataset> {
        let ds = match profile {
            ProfileId::U => self.profile_u,
            ProfileId::I => self.profile_i,
        }
        .ok_or(ProtocolError::MissingCohort { case: case.id, profile })?;
        if ds.profile.is_some_and(|p| p != profile) {
            return Err(ProtocolError::WrongCohort { case: case.id, name: ds.name.clone(), expected: profile, got: ds.profile });
        }
        Ok(ds)
    }

    fn hyper(&self, h: Hyperparams, case: u8, fold: usize) -> Hyperparams {
        h.with_seed(derive_seed(self.seed, case, fold, "shuffle"))
    }

    fn case1_fold(&self, fold: usize, users: &[&EvalUser]) -> Result<ModelWeights> {
        let case = ExperimentCase::get(1)?;
        let ds = self.dataset(case, ProfileId::U)?;
        let data = training_set(ds, users);
        let init = Init::Random { seed: derive_seed(self.seed, 1, fold, "init") };
        let hyper = self.hyper(self.config.pretrain, 1, fold);
        let mut out = train(&data, init, &self.config.architecture, &hyper)
            .map_err(|source| ProtocolError::Fold { case: 1, fold, source })?;
        out.weights.provenance = Provenance::Pretrained(ds.name.clone());
        Ok(out.weights)
    }

    /// Case-1 weights of `fold`, trained on demand.
    pub fn pretrained(&mut self, fold: usize) -> Result<ModelWeights> {
        let ds = self.dataset(ExperimentCase::get(1)?, ProfileId::U)?;
        if ds.users.len() < 2 {
            return Err(ProtocolError::TooFewUsers(ds.users.len()));
        }
        let fold = fold % ds.users.len();
        if let Some(w) = self.pretrained.get(&fold) {
            return Ok(w.clone());
        }
        let held_out = ds.users[fold].user_id;
        let users: Vec<&EvalUser> = ds.users.iter().filter(|u| u.user_id != held_out).collect();
        let w = self.case1_fold(fold, &users)?;
        self.pretrained.insert(fold, w.clone());
        Ok(w)
    }

    fn pretrained_for(&mut self, fold: usize) -> Result<ModelWeights> {
        match self.config.pretrain_source {
            PretrainSource::Fold0 => self.pretrained(0),
            PretrainSource::PerFold => self.pretrained(fold),
        }
    }

    /// Pretrained initialization of every fold, or nothing for random-init cases.
    fn fold_inits(&mut self, case: ExperimentCase, folds: usize) -> Result<Vec<ModelWeights>> {
        if case.init != InitSource::Pretrained {
            return Ok(Vec::new());
        }
        (0..folds).map(|fold| self.pretrained_for(fold)).collect()
    }

    /// Case 4 or 5 for one user: adapt on the calibration sessions, score
    /// the held-out ones.
    fn calibration_fold(
        &self,
        case: ExperimentCase,
        ds: &EvalDataset,
        fold: usize,
        user: &EvalUser,
        pretrained: Option<&ModelWeights>,
    ) -> Result<(FoldReport, ModelWeights)> {
        let id = case.id;
        let split = calibration_split(&user.sessions, self.config.permute_calibration)?;
        let pick = |ids: &[usize]| -> Vec<&EvalSession> {
            ids.iter().filter_map(|id| user.sessions.iter().find(|s| s.session_id == *id)).collect()
        };
        let data: Vec<TrainingSample> =
            pick(&split.train).iter().flat_map(|s| s.samples.iter().map(|x| ds.training_sample(x))).collect();
        let fold_err = |source| ProtocolError::Fold { case: id, fold, source };
        let (weights, provenance) = match pretrained {
            Some(pre) => {
                let hyper = self.hyper(self.config.fine_tune, id, fold);
                let out = fine_tune(pre, &data, &hyper, &user.user_id.to_string()).map_err(fold_err)?;
                (out.weights, pre.provenance.clone())
            }
            None => {
                let init = Init::Random { seed: derive_seed(self.seed, id, fold, "init") };
                let hyper = self.hyper(self.config.calibration, id, fold);
                let out = train(&data, init, &self.config.architecture, &hyper).map_err(fold_err)?;
                (out.weights, Provenance::Random)
            }
        };
        let test = pick(&split.test);
        let samples = evaluate(&weights, ds, user.user_id, test.iter().flat_map(|s| s.samples.iter().map(move |x| (*s, x))))
            .map_err(fold_err)?;
        Ok((fold_report(fold, user.user_id, vec![user.user_id], provenance, samples)?, weights))
    }

    pub fn run_case(&mut self, id: u8) -> Result<RunReport> {
        let case = ExperimentCase::get(id)?;
        let ds = self.dataset(case, case.profile)?;
        if case.init == InitSource::Pretrained {
            self.dataset(case, ProfileId::U)?;
        }
        let config_hash = self.config.hash();
        let folds = match (case.id, case.train_scope) {
            (1, _) => {
                let trained = Mutex::new(Vec::new());
                let folds = leave_one_out(
                    ds,
                    |fold, users| {
                        let w = match self.pretrained.get(&fold) {
                            Some(w) => w.clone(),
                            None => self.case1_fold(fold, users)?,
                        };
                        trained.lock().expect("no panics while held").push((fold, w.clone()));
                        Ok((w, Provenance::Random))
                    },
                    |fold, w, user| evaluate(w, ds, user.user_id, user.samples()).map_err(|source| ProtocolError::Fold { case: 1, fold, source }),
                )?;
                let trained = trained.into_inner().expect("no panics while held");
                self.trained.extend(trained.iter().map(|(fold, w)| ((1, *fold), w.clone())));
                self.pretrained.extend(trained);
                folds
            }
            (_, TrainScope::CohortLeaveOneOut) => {
                let fold_inits = self.fold_inits(case, ds.users.len())?;
                let seed = self.seed;
                let config = &self.config;
                let trained = Mutex::new(Vec::new());
                let folds = leave_one_out(
                    ds,
                    |fold, users| {
                        let data = training_set(ds, users);
                        let (init, provenance) = match fold_inits.get(fold) {
                            Some(w) => (Init::From(w.clone()), w.provenance.clone()),
                            None => (Init::Random { seed: derive_seed(seed, id, fold, "init") }, Provenance::Random),
                        };
                        let hyper = config.transfer.with_seed(derive_seed(seed, id, fold, "shuffle"));
                        let out = train(&data, init, &config.architecture, &hyper)
                            .map_err(|source| ProtocolError::Fold { case: id, fold, source })?;
                        trained.lock().expect("no panics while held").push(((id, fold), out.weights.clone()));
                        Ok((out.weights, provenance))
                    },
                    |fold, w, user| evaluate(w, ds, user.user_id, user.samples()).map_err(|source| ProtocolError::Fold { case: id, fold, source }),
                )?;
                self.trained.extend(trained.into_inner().expect("no panics while held"));
                folds
            }
            (_, TrainScope::UserCalibration) => {
                let fold_inits = self.fold_inits(case, ds.users.len())?;
                let this = &*self;
                let results = ds
                    .users
                    .par_iter()
                    .enumerate()
                    .map(|(fold, user)| this.calibration_fold(case, ds, fold, user, fold_inits.get(fold)))
                    .collect::<Result<Vec<_>>>()?;
                let mut folds = Vec::with_capacity(results.len());
                for (report, weights) in results {
                    self.trained.insert((id, report.fold), weights);
                    folds.push(report);
                }
                folds
            }
        };
        RunReport::new(case, &ds.name, self.seed, config_hash, folds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub case: u8,
    pub summary: ErrorSummary,
    pub iqr_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `|mean2 - mean3| <= 0.25 * max(std2, std3)`
    pub comparable_2_3: Option<bool>,
    /// `IQR1 < min(IQR2, IQR3)`
    pub compact_1: Option<bool>,
    /// `median5 / median4`
    pub calibration_gap: Option<f64>,
}

impl Comparison {
    /// Rows formatted like a results table: case, mean, std, median.
    pub fn table(&self) -> String {
        let mut s = format!("{:<6}{:>10}{:>10}{:>10}\n", "Case", "Mean(°)", "Std(°)", "Median(°)");
        for r in &self.rows {
            s += &format!("{:<6}{:>10.2}{:>10.2}{:>10.2}\n", r.case, r.summary.mean_deg, r.summary.std_deg, r.summary.median_deg);
        }
        s
    }
}

pub fn compare_summaries(summaries: &[(u8, ErrorSummary)]) -> Result<Comparison> {
    let mut seen = HashSet::new();
    for (case, _) in summaries {
        if !seen.insert(*case) {
            return Err(ProtocolError::DuplicateCase(*case));
        }
    }
    if summaries.len() < 2 {
        return Err(ProtocolError::TooFewReports(summaries.len()));
    }
    let mut rows: Vec<ComparisonRow> =
        summaries.iter().map(|&(case, summary)| ComparisonRow { case, summary, iqr_deg: summary.iqr() }).collect();
    rows.sort_by_key(|r| r.case);
    let get = |id: u8| rows.iter().find(|r| r.case == id).map(|r| r.summary);
    let comparable_2_3 = match (get(2), get(3)) {
        (Some(a), Some(b)) => Some((a.mean_deg - b.mean_deg).abs() <= 0.25 * a.std_deg.max(b.std_deg)),
        _ => None,
    };
    let compact_1 = match (get(1), get(2), get(3)) {
        (Some(a), Some(b), Some(c)) => Some(a.iqr() < b.iqr().min(c.iqr())),
        _ => None,
    };
    let calibration_gap = match (get(4), get(5)) {
        (Some(a), Some(b)) => Some(b.median_deg / a.median_deg),
        _ => None,
    };
    Ok(Comparison { rows, comparable_2_3, compact_1, calibration_gap })
}

pub fn compare_cases(reports: &[RunReport]) -> Result<Comparison> {
    let summaries: Vec<(u8, ErrorSummary)> = reports.iter().map(|r| (r.case.id, r.pooled)).collect();
    compare_summaries(&summaries)
}
