//! Closed-loop use of a relative-pose estimator: one-shot correction,
//! iterative servoing against a fixed reference image, and the insertion
//! tolerance predicate fitted to the tolerance grid.
//!
//! All poses here are `t_d2e` offsets from a station's default pose.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{apply_estimate, pose_error, relative_label, Pose, PoseError};
use crate::sampler::{derive_seed, sample_offset, SamplingRanges, Station};
use crate::scene::{occlude, Image, SceneError};
use crate::tensornet::{SiameseModel, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ServoError {
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{0}")]
    Invalid(String),
}

/// An image together with the pose it was taken from, when known. Learned
/// estimators look only at the image.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub image: &'a Image,
    pub true_pose: Option<Pose>,
}

/// Anything that maps a (reference, test) view pair to `T_Δ` such that
/// `T_Δ · t_test ≈ t_ref`.
pub trait RelativePoseEstimator {
    fn estimate(&self, reference: View, test: View) -> Result<Pose, ServoError>;
}

impl RelativePoseEstimator for SiameseModel {
    fn estimate(&self, reference: View, test: View) -> Result<Pose, ServoError> {
        Ok(self.predict(reference.image, test.image)?.to_pose())
    }
}

/// Returns the exact label from ground-truth poses.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectModel;

impl RelativePoseEstimator for PerfectModel {
    fn estimate(&self, reference: View, test: View) -> Result<Pose, ServoError> {
        match (reference.true_pose, test.true_pose) {
            (Some(r), Some(t)) => Ok(relative_label(r, t)),
            _ => Err(ServoError::Invalid("perfect model needs ground-truth poses on both views".into())),
        }
    }
}

/// `T_est = T_Δ · t_test`.
pub fn one_shot<E: RelativePoseEstimator + ?Sized>(model: &E, reference: View, test: View, t_test: Pose) -> Result<Pose, ServoError> {
    Ok(apply_estimate(model.estimate(reference, test)?, t_test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoOptions {
    pub max_iter: usize,
    /// Stop when the predicted translation stays below this (mm)...
    pub translation_mm: f64,
    /// ...and the predicted rotation angle below this (degrees)...
    pub rotation_deg: f64,
    /// ...for this many consecutive iterations.
    pub confirmations: usize,
    /// Fraction of connector pixels left visible in the first image.
    pub visible_fraction: f64,
}

impl Default for ServoOptions {
    fn default() -> Self {
        ServoOptions { max_iter: 30, translation_mm: 0.3, rotation_deg: 0.3, confirmations: 2, visible_fraction: 1.0 }
    }
}

impl ServoOptions {
    pub fn validate(&self) -> Result<(), ServoError> {
        if self.max_iter == 0 || self.confirmations == 0 {
            return Err(ServoError::Invalid("max_iter and confirmations must be at least 1".into()));
        }
        if !(self.translation_mm > 0.0 && self.rotation_deg > 0.0) {
            return Err(ServoError::Invalid("convergence thresholds must be positive".into()));
        }
        if !(self.visible_fraction > 0.0 && self.visible_fraction <= 1.0) {
            return Err(ServoError::Invalid(format!("visible_fraction {} outside (0, 1]", self.visible_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueError {
    pub mm: f64,
    pub deg: f64,
}

impl From<PoseError> for TrueError {
    fn from(e: PoseError) -> Self {
        TrueError { mm: e.max_translation_mm(), deg: e.max_rotation_deg() }
    }
}

/// One line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    /// Pose after applying this iteration's correction.
    pub pose: Pose,
    pub predicted_delta: Pose,
    pub true_error: TrueError,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoResult {
    /// Start pose followed by the pose after every iteration.
    pub trajectory: Vec<Pose>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_error: PoseError,
    pub final_error: PoseError,
    pub log: Vec<IterationLog>,
}

impl ServoResult {
    pub fn final_pose(&self) -> Pose {
        *self.trajectory.last().expect("trajectory holds the start pose")
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for l in &self.log {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Predict-and-move against a reference image rendered once at `t_ref`.
pub fn iterative_servo<E: RelativePoseEstimator + ?Sized>(
    model: &E,
    station: &Station,
    t_ref: Pose,
    t_start: Pose,
    opts: &ServoOptions,
) -> Result<ServoResult, ServoError> {
    opts.validate()?;
    let reference = station.render(t_ref);
    let ref_view = View { image: &reference, true_pose: Some(t_ref) };
    let mut current = t_start;
    let mut trajectory = vec![current];
    let mut log = Vec::new();
    let mut quiet = 0;
    let mut converged = false;
    for iter in 1..=opts.max_iter {
        let mut image = station.render(current);
        if iter == 1 && opts.visible_fraction < 1.0 {
            image = occlude(&image, opts.visible_fraction)?;
        }
        let delta = model.estimate(ref_view, View { image: &image, true_pose: Some(current) })?;
        current = apply_estimate(delta, current);
        trajectory.push(current);
        log.push(IterationLog {
            iter,
            pose: current,
            predicted_delta: delta,
            true_error: pose_error(t_ref, current).into(),
            image_path: None,
        });
        let small = delta.translation.norm() * 1e3 < opts.translation_mm && delta.rotation.angle().to_degrees() < opts.rotation_deg;
        quiet = if small { quiet + 1 } else { 0 };
        if quiet >= opts.confirmations {
            converged = true;
            break;
        }
    }
    Ok(ServoResult {
        iterations: trajectory.len() - 1,
        initial_error: pose_error(t_ref, t_start),
        final_error: pose_error(t_ref, current),
        trajectory,
        converged,
        log,
    })
}

/// Maximum passing planar offset (mm) as a function of the largest rotation
/// offset (degrees): linear between breakpoints, constant outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceModel {
    /// `(theta_deg, c_mm)`, strictly increasing in theta.
    pub breakpoints: Vec<(f64, f64)>,
    pub dz_allowance_mm: f64,
}

pub const DEFAULT_DZ_ALLOWANCE_MM: f64 = 5.0;
pub const MAX_BREAKPOINTS: usize = 4;
const EPS: f64 = 1e-9;

impl ToleranceModel {
    pub fn frontier(&self, theta_deg: f64) -> f64 {
        let b = &self.breakpoints;
        match b.len() {
            0 => 0.0,
            _ if theta_deg <= b[0].0 => b[0].1,
            _ if theta_deg >= b[b.len() - 1].0 => b[b.len() - 1].1,
            _ => {
                let k = b.iter().position(|p| p.0 > theta_deg).expect("inside the breakpoint range");
                let ((t0, c0), (t1, c1)) = (b[k - 1], b[k]);
                c0 + (c1 - c0) * (theta_deg - t0) / (t1 - t0)
            }
        }
    }

    /// Planar/rotation part of the predicate. A zero frontier admits nothing.
    pub fn passes(&self, t_xy_mm: f64, theta_deg: f64) -> bool {
        let c = self.frontier(theta_deg);
        c > EPS && t_xy_mm <= c + EPS
    }

    pub fn is_monotone(&self) -> bool {
        let b = &self.breakpoints;
        b.iter().all(|p| p.1 >= 0.0) && b.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 <= w[0].1)
    }

    /// Area under the frontier between `lo` and `hi`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut xs: Vec<f64> = vec![lo, hi];
        xs.extend(self.breakpoints.iter().map(|p| p.0).filter(|&t| t > lo && t < hi));
        xs.sort_by(f64::total_cmp);
        xs.windows(2).map(|w| 0.5 * (self.frontier(w[0]) + self.frontier(w[1])) * (w[1] - w[0])).sum()
    }
}

/// Offsets of `t_final` against `t_ref` reduced to the predicate's inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionOffsets {
    pub t_xy_mm: f64,
    pub theta_max_deg: f64,
    pub dz_mm: f64,
}

pub fn insertion_offsets(t_final: Pose, t_ref: Pose) -> InsertionOffsets {
    let e = pose_error(t_ref, t_final);
    InsertionOffsets { t_xy_mm: e.e_x.max(e.e_y), theta_max_deg: e.max_rotation_deg(), dz_mm: e.e_z }
}

pub fn insertion_success(t_final: Pose, t_ref: Pose, tol: &ToleranceModel) -> bool {
    let o = insertion_offsets(t_final, t_ref);
    tol.passes(o.t_xy_mm, o.theta_max_deg) && o.dz_mm <= tol.dz_allowance_mm + EPS
}

/// Pass/fail observations on a rotation × translation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceGrid {
    /// Row labels, degrees, increasing.
    pub theta_deg: Vec<f64>,
    /// Column labels, mm, increasing.
    pub offset_mm: Vec<f64>,
    /// `pass[row][col]`.
    pub pass: Vec<Vec<bool>>,
}

/// Largest passing offset per row of the insertion tolerance table, `None`
/// where every offset failed.
const TABLE_I_MAX_PASS_MM: [Option<f64>; 10] =
    [Some(0.6), Some(0.6), Some(0.4), Some(0.3), Some(0.2), Some(0.2), Some(0.1), Some(0.1), Some(0.1), None];

impl ToleranceGrid {
    /// The embedded insertion tolerance table: 10 rotation rows
    /// (0.00°–2.25°) by 8 translation columns (0.0–0.7 mm).
    pub fn table_one() -> Self {
        let theta_deg: Vec<f64> = (0..10).map(|i| i as f64 * 0.25).collect();
        let offset_mm: Vec<f64> = (0..8).map(|j| j as f64 / 10.0).collect();
        let pass = TABLE_I_MAX_PASS_MM
            .iter()
            .map(|m| offset_mm.iter().map(|&x| m.is_some_and(|m| x <= m + EPS)).collect())
            .collect();
        ToleranceGrid { theta_deg, offset_mm, pass }
    }

    pub fn cells(&self) -> usize {
        self.theta_deg.len() * self.offset_mm.len()
    }

    pub fn validate(&self) -> Result<(), ServoError> {
        let bad = |m: String| Err(ServoError::Invalid(m));
        if self.theta_deg.is_empty() || self.offset_mm.is_empty() {
            return bad("grid needs at least one row and one column".into());
        }
        if self.pass.len() != self.theta_deg.len() || self.pass.iter().any(|r| r.len() != self.offset_mm.len()) {
            return bad(format!("pass table must be {}x{}", self.theta_deg.len(), self.offset_mm.len()));
        }
        let increasing = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0) && v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.theta_deg) || !increasing(&self.offset_mm) {
            return bad("row and column labels must be non-negative and strictly increasing".into());
        }
        Ok(())
    }

    /// Passing cells with a failing cell at component-wise smaller or equal
    /// offsets.
    pub fn monotone_violations(&self) -> usize {
        let mut n = 0;
        for i in 0..self.theta_deg.len() {
            for j in 0..self.offset_mm.len() {
                if self.pass[i][j] && (0..=i).any(|a| (0..=j).any(|b| !self.pass[a][b])) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn misclassified(&self, model: &ToleranceModel) -> usize {
        let mut n = 0;
        for (i, &t) in self.theta_deg.iter().enumerate() {
            for (j, &x) in self.offset_mm.iter().enumerate() {
                if model.passes(x, t) != self.pass[i][j] {
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceFit {
    pub model: ToleranceModel,
    pub misclassified: usize,
    pub cells: usize,
    pub monotone_violations: usize,
}

/// Least-misclassification non-increasing piecewise-linear frontier with at
/// most four breakpoints placed on grid rows, values drawn from the grid's
/// columns and zero. Ties go to the smaller area under the frontier, then
/// to fewer breakpoints.
pub fn fit_tolerance(grid: &ToleranceGrid) -> Result<ToleranceFit, ServoError> {
    grid.validate()?;
    let violations = grid.monotone_violations();
    if violations * 10 > grid.cells() {
        return Err(ServoError::Invalid(format!(
            "{violations} of {} cells break the monotone pass-region structure (limit 10%)",
            grid.cells()
        )));
    }
    let mut values: Vec<f64> = std::iter::once(0.0).chain(grid.offset_mm.iter().copied()).collect();
    values.dedup();
    values.reverse();
    let (lo, hi) = (grid.theta_deg[0], grid.theta_deg[grid.theta_deg.len() - 1]);
    let mut best: Option<(usize, f64, usize, ToleranceModel)> = None;
    let rows = grid.theta_deg.len();
    for k in 1..=MAX_BREAKPOINTS.min(rows) {
        let mut positions: Vec<usize> = (0..k).collect();
        loop {
            let mut choice = vec![0usize; k];
            loop {
                let model = ToleranceModel {
                    breakpoints: positions.iter().zip(&choice).map(|(&p, &c)| (grid.theta_deg[p], values[c])).collect(),
                    dz_allowance_mm: DEFAULT_DZ_ALLOWANCE_MM,
                };
                let miss = grid.misclassified(&model);
                let area = model.integral(lo, hi);
                let better = match &best {
                    None => true,
                    Some((m, a, b, _)) => miss < *m || (miss == *m && (area < a - EPS || ((area - a).abs() <= EPS && k < *b))),
                };
                if better {
                    best = Some((miss, area, k, model));
                }
                if !next_non_decreasing(&mut choice, values.len()) {
                    break;
                }
            }
            if !next_combination(&mut positions, rows) {
                break;
            }
        }
    }
    let (miss, _, _, model) = best.expect("at least one candidate frontier");
    Ok(ToleranceFit { model, misclassified: miss, cells: grid.cells(), monotone_violations: violations })
}

/// Advances indices into a descending value list so the values stay
/// non-increasing along the breakpoints.
fn next_non_decreasing(idx: &mut [usize], n: usize) -> bool {
    for i in (0..idx.len()).rev() {
        if idx[i] + 1 < n {
            idx[i] += 1;
            for j in i + 1..idx.len() {
                idx[j] = idx[i];
            }
            return true;
        }
    }
    false
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Outcome of one simulated one-shot correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotTrial {
    pub trial: usize,
    pub placement: usize,
    pub t_test: Pose,
    pub t_est: Pose,
    pub offsets: InsertionOffsets,
    pub error: PoseError,
    pub success: bool,
}

/// Outcome of one simulated iterative episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeTrial {
    pub trial: usize,
    pub placement: usize,
    pub visible_fraction: f64,
    pub t_start: Pose,
    pub iterations: usize,
    pub converged: bool,
    pub success: bool,
    pub initial_error: PoseError,
    pub final_error: PoseError,
    pub log: Vec<IterationLog>,
}

const STREAM_TRIAL: u64 = 0x7472_6961;

fn trial_setup(stations: &[Station], seed: u64, trial: usize, ranges: &SamplingRanges) -> (usize, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRIAL, trial as u64));
    let placement = rng.gen_range(0..stations.len());
    (placement, sample_offset(&mut rng, ranges))
}

/// Reference at the default pose of a random placement, test pose drawn
/// from `ranges`, one correction, then the tolerance check.
pub fn run_one_shot_trials<E: RelativePoseEstimator + Sync + ?Sized>(
    model: &E,
    stations: &[Station],
    trials: usize,
    ranges: &SamplingRanges,
    tol: &ToleranceModel,
    seed: u64,
) -> Result<Vec<OneShotTrial>, ServoError> {
    if stations.is_empty() {
        return Err(ServoError::Invalid("no stations to run trials on".into()));
    }
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let (placement, t_test) = trial_setup(stations, seed, trial, ranges);
            let station = &stations[placement];
            let t_ref = Pose::IDENTITY;
            let (img_ref, img_test) = (station.render(t_ref), station.render(t_test));
            let t_est = one_shot(
                model,
                View { image: &img_ref, true_pose: Some(t_ref) },
                View { image: &img_test, true_pose: Some(t_test) },
                t_test,
            )?;
            Ok(OneShotTrial {
                trial,
                placement,
                t_test,
                t_est,
                offsets: insertion_offsets(t_est, t_ref),
                error: pose_error(t_ref, t_est),
                success: insertion_success(t_est, t_ref, tol),
            })
        })
        .collect()
}

/// Iterative episodes from starts drawn from `ranges`.
pub fn run_iterative_trials<E: RelativePoseEstimator + Sync + ?Sized>(
    model: &E,
    stations: &[Station],
    trials: usize,
    ranges: &SamplingRanges,
    opts: &ServoOptions,
    tol: &ToleranceModel,
    seed: u64,
) -> Result<Vec<IterativeTrial>, ServoError> {
    if stations.is_empty() {
        return Err(ServoError::Invalid("no stations to run trials on".into()));
    }
    opts.validate()?;
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let (placement, t_start) = trial_setup(stations, seed, trial, ranges);
            let t_ref = Pose::IDENTITY;
            let r = iterative_servo(model, &stations[placement], t_ref, t_start, opts)?;
            Ok(IterativeTrial {
                trial,
                placement,
                visible_fraction: opts.visible_fraction,
                t_start,
                iterations: r.iterations,
                converged: r.converged,
                success: insertion_success(r.final_pose(), t_ref, tol),
                initial_error: r.initial_error,
                final_error: r.final_error,
                log: r.log,
            })
        })
        .collect()
}
