//! Pose sampling around the default pose, dataset generation and on-the-fly
//! training pairs.
//!
//! A sample's label `t_d2e` is the end-effector pose expressed in the default
//! pose frame, so the absolute end-effector pose is `default_pose * t_d2e`.
//! The default frame's z axis points down at the table, hence the sampling
//! cylinder extends along `-z` of that frame.

use crate::geometry::{compose, euler_to_quat, quat_to_euler, relative_label, EulerAngles, Pose, Vec3};
use crate::scene::{render, CameraIntrinsics, ConnectorSpec, Image, SceneError, SceneState, CONNECTOR_IDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Height of the default pose above the insertion pose, meters.
pub const DEFAULT_LIFT: f64 = 0.15;

/// Spacing of the base placement square, meters.
pub const PLACEMENT_SPACING: f64 = 0.05;

pub const PLACEMENT_YAWS: [f64; 4] = [0.0, 30.0, 60.0, 90.0];

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("need at least 2 samples to form pairs, got {0}")]
    TooFewSamples(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SamplerError + '_ {
    move |source| SamplerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRanges {
    /// meters
    pub cylinder_radius: f64,
    /// meters
    pub cylinder_height: f64,
    /// degrees
    pub roll_pitch_limit: f64,
    /// degrees
    pub yaw_limit: f64,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges { cylinder_radius: 0.005, cylinder_height: 0.010, roll_pitch_limit: 5.0, yaw_limit: 10.0 }
    }
}

impl SamplingRanges {
    pub fn zero() -> Self {
        SamplingRanges { cylinder_radius: 0.0, cylinder_height: 0.0, roll_pitch_limit: 0.0, yaw_limit: 0.0 }
    }

    pub fn scaled(self, k: f64) -> Self {
        SamplingRanges {
            cylinder_radius: self.cylinder_radius * k,
            cylinder_height: self.cylinder_height * k,
            roll_pitch_limit: self.roll_pitch_limit * k,
            yaw_limit: self.yaw_limit * k,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let all = [self.cylinder_radius, self.cylinder_height, self.roll_pitch_limit, self.yaw_limit];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(SamplerError::Manifest(format!("sampling ranges must be positive: {self:?}")))
        }
    }

    /// Whether a `t_d2e` offset lies inside the sampling volume.
    pub fn contains(&self, t_d2e: &Pose) -> bool {
        const EPS: f64 = 1e-9;
        let t = t_d2e.translation;
        let e = quat_to_euler(t_d2e.rotation);
        (t.x * t.x + t.y * t.y).sqrt() <= self.cylinder_radius + EPS
            && -t.z >= -EPS
            && -t.z <= self.cylinder_height + EPS
            && e.roll.abs() <= self.roll_pitch_limit + EPS
            && e.pitch.abs() <= self.roll_pitch_limit + EPS
            && e.yaw.abs() <= self.yaw_limit + EPS
    }
}

/// Lifts the insertion pose vertically (world z) by [`DEFAULT_LIFT`].
pub fn make_default_pose(insertion_pose: Pose) -> Pose {
    Pose {
        rotation: insertion_pose.rotation,
        translation: insertion_pose.translation + Vec3::new(0.0, 0.0, DEFAULT_LIFT),
    }
}

/// Draws a `t_d2e` offset: origin uniform over the cylinder (area-uniform
/// disk times uniform height), roll/pitch/yaw uniform within their limits and
/// composed Z-Y-X about the moving frame.
pub fn sample_offset<R: Rng + ?Sized>(rng: &mut R, r: &SamplingRanges) -> Pose {
    let radius = r.cylinder_radius * rng.gen::<f64>().sqrt();
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let up = r.cylinder_height * rng.gen::<f64>();
    let mut sym = |limit: f64| limit * (2.0 * rng.gen::<f64>() - 1.0);
    let roll = sym(r.roll_pitch_limit);
    let pitch = sym(r.roll_pitch_limit);
    let yaw = sym(r.yaw_limit);
    Pose::new(
        euler_to_quat(EulerAngles::new(roll, pitch, yaw)),
        Vec3::new(radius * phi.cos(), radius * phi.sin(), -up),
    )
}

/// Absolute end-effector pose `default_pose * offset` for a random offset.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, default_pose: Pose, r: &SamplingRanges) -> Pose {
    compose(default_pose, sample_offset(rng, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// meters, on the table plane
    pub position: [f64; 2],
    /// degrees
    pub yaw: f64,
}

/// Four corners of a square with [`PLACEMENT_SPACING`] sides plus its center,
/// each at every yaw in [`PLACEMENT_YAWS`].
pub fn base_placements() -> Vec<Placement> {
    let h = PLACEMENT_SPACING / 2.0;
    let points = [[-h, -h], [h, -h], [h, h], [-h, h], [0.0, 0.0]];
    points
        .iter()
        .flat_map(|&position| PLACEMENT_YAWS.iter().map(move |&yaw| Placement { position, yaw }))
        .collect()
}

/// Scene for a placement. Lighting changes with workbench position to mimic
/// the shadowing that differs across the bench.
pub fn placement_scene(connector: &ConnectorSpec, placement: &Placement) -> SceneState {
    let mut scene = SceneState::new(connector.clone());
    scene.base_position = placement.position;
    scene.base_yaw = placement.yaw;
    let [x, y] = placement.position;
    let azimuth = (y.atan2(x) + 0.7).rem_euclid(std::f64::consts::TAU);
    let tilt = if x == 0.0 && y == 0.0 { 10f64 } else { 30f64 }.to_radians();
    scene.light_direction = Vec3::new(tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos());
    scene.ambient = 0.72 + 0.1 * ((x / PLACEMENT_SPACING + 0.5).clamp(0.0, 1.0));
    scene
}

/// Everything needed to render the view from a `t_d2e` offset.
#[derive(Debug, Clone)]
pub struct Station {
    pub scene: SceneState,
    pub intrinsics: CameraIntrinsics,
    /// Camera pose relative to the end-effector.
    pub hand_eye: Pose,
    pub default_pose: Pose,
}

impl Station {
    pub fn new(scene: SceneState, intrinsics: CameraIntrinsics) -> Self {
        let default_pose = make_default_pose(scene.insertion_pose());
        Station { scene, intrinsics, hand_eye: Pose::IDENTITY, default_pose }
    }

    pub fn end_effector_pose(&self, t_d2e: Pose) -> Pose {
        compose(self.default_pose, t_d2e)
    }

    pub fn render(&self, t_d2e: Pose) -> Image {
        let camera = compose(self.end_effector_pose(t_d2e), self.hand_eye);
        render(&self.scene, camera, &self.intrinsics)
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub t_d2e: Pose,
}

/// A training unit. Images are borrowed from the sample set.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub image_a: &'a Image,
    pub image_b: &'a Image,
    pub label: Pose,
    pub index_a: usize,
    pub index_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub connectors: Vec<String>,
    /// Samples per connector, same order as `connectors`.
    pub samples_per_connector: Vec<usize>,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub ranges: SamplingRanges,
    pub placements: Vec<Placement>,
    pub camera: CameraIntrinsics,
}

impl DatasetManifest {
    /// 200 samples at each of the 20 placements of one connector.
    pub fn single_connector(id: &str, seed: u64) -> Self {
        DatasetManifest {
            connectors: vec![id.to_string()],
            samples_per_connector: vec![4000],
            val_size: 50,
            test_size: 50,
            seed,
            ranges: SamplingRanges::default(),
            placements: base_placements(),
            camera: CameraIntrinsics::default(),
        }
    }

    /// `per_connector` samples for each listed connector.
    pub fn multi_connector(ids: &[&str], per_connector: usize, seed: u64) -> Self {
        DatasetManifest {
            connectors: ids.iter().map(|s| s.to_string()).collect(),
            samples_per_connector: vec![per_connector; ids.len()],
            ..DatasetManifest::single_connector(ids.first().copied().unwrap_or("A1"), seed)
        }
    }

    pub fn total_samples(&self) -> usize {
        self.samples_per_connector.iter().sum()
    }

    pub fn train_size(&self, connector: usize) -> usize {
        self.samples_per_connector[connector].saturating_sub(self.val_size + self.test_size)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::Manifest(m));
        if self.connectors.is_empty() {
            return bad("no connectors listed".into());
        }
        if self.connectors.len() != self.samples_per_connector.len() {
            return bad(format!(
                "{} connectors but {} sample counts",
                self.connectors.len(),
                self.samples_per_connector.len()
            ));
        }
        for (i, id) in self.connectors.iter().enumerate() {
            if ConnectorSpec::builtin(id).is_none() {
                return bad(format!("unknown connector {id:?}; known: {}", CONNECTOR_IDS.join(", ")));
            }
            if self.connectors[..i].contains(id) {
                return bad(format!("connector {id} listed twice"));
            }
        }
        for (id, &n) in self.connectors.iter().zip(&self.samples_per_connector) {
            if n < self.val_size + self.test_size + 2 {
                return bad(format!("{id}: {n} samples cannot cover val {} + test {} + 2 train", self.val_size, self.test_size));
            }
        }
        if self.placements.is_empty() {
            return bad("no base placements".into());
        }
        self.ranges.validate()?;
        self.camera.validate()?;
        Ok(())
    }

    /// Placement index of the `i`-th of `n` samples (contiguous blocks).
    pub fn placement_of(&self, i: usize, n: usize) -> usize {
        i * self.placements.len() / n
    }
}

/// Disjoint index sets over one connector's samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ConnectorData {
    pub id: String,
    pub samples: Vec<Sample>,
    pub placements: Vec<usize>,
    pub splits: Splits,
}

impl ConnectorData {
    pub fn subset(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub connectors: Vec<ConnectorData>,
}

/// Label record, one JSON object per line in `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub index: usize,
    pub t_d2e: Pose,
    pub placement: usize,
}

/// SplitMix64 finalizer; derives independent per-sample seeds from a root.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded permutation: first `val` indices validate, next `test` test, rest train.
pub fn make_splits(n: usize, val: usize, test: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut val_idx = idx[..val].to_vec();
    let mut test_idx = idx[val..val + test].to_vec();
    let mut train_idx = idx[val + test..].to_vec();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Splits { train: train_idx, val: val_idx, test: test_idx }
}

/// Renders every sample of the manifest in memory.
pub fn generate_samples(manifest: &DatasetManifest) -> Result<Dataset, SamplerError> {
    manifest.validate()?;
    let mut connectors = Vec::with_capacity(manifest.connectors.len());
    for (ci, id) in manifest.connectors.iter().enumerate() {
        let spec = ConnectorSpec::builtin(id).expect("validated");
        let n = manifest.samples_per_connector[ci];
        let stations: Vec<Station> = manifest
            .placements
            .iter()
            .map(|p| Station::new(placement_scene(&spec, p), manifest.camera))
            .collect();
        let rendered: Vec<(Sample, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let placement = manifest.placement_of(i, n);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, ci as u64, i as u64));
                let t_d2e = sample_offset(&mut rng, &manifest.ranges);
                (Sample { image: stations[placement].render(t_d2e), t_d2e }, placement)
            })
            .collect();
        let (samples, placements) = rendered.into_iter().unzip();
        let splits = make_splits(n, manifest.val_size, manifest.test_size, derive_seed(manifest.seed, ci as u64, u64::MAX));
        connectors.push(ConnectorData { id: id.clone(), samples, placements, splits });
    }
    Ok(Dataset { manifest: manifest.clone(), connectors })
}

/// Renders and persists a dataset:
///
/// ```text
/// <out_dir>/manifest.json
/// <out_dir>/<connector>/<index>.pgm
/// <out_dir>/<connector>/labels.jsonl
/// ```
///
/// Files are written to a sibling staging directory that is renamed into
/// place once complete, so a failed run leaves nothing at `out_dir`.
pub fn generate_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<Dataset, SamplerError> {
    manifest.validate()?;
    if out_dir.exists() {
        let empty = out_dir.is_dir() && fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_none();
        if !empty {
            return Err(SamplerError::Io {
                path: out_dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output exists and is not an empty directory"),
            });
        }
    }
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        return Err(SamplerError::Io {
            path: parent,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        });
    }
    let dataset = generate_samples(manifest)?;
    let name = out_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let result = write_dataset(&dataset, &staging).and_then(|_| {
        if out_dir.exists() {
            fs::remove_dir(out_dir).map_err(io_err(out_dir))?;
        }
        fs::rename(&staging, out_dir).map_err(io_err(out_dir))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result.map(|_| dataset)
}

fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SamplerError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    for c in &dataset.connectors {
        let cdir = dir.join(&c.id);
        fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
        let labels_path = cdir.join("labels.jsonl");
        let mut labels = BufWriter::new(fs::File::create(&labels_path).map_err(io_err(&labels_path))?);
        for (i, s) in c.samples.iter().enumerate() {
            s.image.save_pgm(&cdir.join(format!("{i}.pgm")))?;
            let rec = LabelRecord { index: i, t_d2e: s.t_d2e, placement: c.placements[i] };
            writeln!(labels, "{}", serde_json::to_string(&rec).expect("label serializes")).map_err(io_err(&labels_path))?;
        }
        labels.flush().map_err(io_err(&labels_path))?;
    }
    Ok(())
}

/// Loads a dataset written by [`generate_dataset`]; splits are re-derived
/// from the manifest seed.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SamplerError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| SamplerError::Parse { path: manifest_path.clone(), message: e.to_string() })?;
    manifest.validate()?;
    let mut connectors = Vec::new();
    for (ci, id) in manifest.connectors.iter().enumerate() {
        let cdir = dir.join(id);
        let labels_path = cdir.join("labels.jsonl");
        let file = fs::File::open(&labels_path).map_err(io_err(&labels_path))?;
        let n = manifest.samples_per_connector[ci];
        let mut samples = Vec::with_capacity(n);
        let mut placements = Vec::with_capacity(n);
        for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&labels_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| SamplerError::Parse {
                path: labels_path.clone(),
                message: format!("line {}: {e}", line_no + 1),
            })?;
            if rec.index != samples.len() {
                return Err(SamplerError::Parse {
                    path: labels_path.clone(),
                    message: format!("expected index {}, found {}", samples.len(), rec.index),
                });
            }
            let image = crate::scene::Image::load_pgm(&cdir.join(format!("{}.pgm", rec.index)))?;
            samples.push(Sample { image, t_d2e: rec.t_d2e });
            placements.push(rec.placement);
        }
        if samples.len() != n {
            return Err(SamplerError::Parse {
                path: labels_path,
                message: format!("manifest promises {n} samples, found {}", samples.len()),
            });
        }
        let splits = make_splits(n, manifest.val_size, manifest.test_size, derive_seed(manifest.seed, ci as u64, u64::MAX));
        connectors.push(ConnectorData { id: id.clone(), samples, placements, splits });
    }
    Ok(Dataset { manifest, connectors })
}

/// Pairs drawn uniformly with replacement from the `n²` ordered pairs of a
/// sample set, self-pairs included.
pub struct PairStream<'a> {
    samples: &'a [Sample],
    remaining: usize,
    rng: ChaCha8Rng,
}

pub fn pair_stream(samples: &[Sample], count: usize, seed: u64) -> Result<PairStream<'_>, SamplerError> {
    if samples.len() < 2 {
        return Err(SamplerError::TooFewSamples(samples.len()));
    }
    Ok(PairStream { samples, remaining: count, rng: ChaCha8Rng::seed_from_u64(seed) })
}

impl<'a> Iterator for PairStream<'a> {
    type Item = Pair<'a>;

    fn next(&mut self) -> Option<Pair<'a>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let n = self.samples.len();
        let (i, j) = (self.rng.gen_range(0..n), self.rng.gen_range(0..n));
        let (a, b) = (&self.samples[i], &self.samples[j]);
        Some(Pair { image_a: &a.image, image_b: &b.image, label: relative_label(a.t_d2e, b.t_d2e), index_a: i, index_b: j })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for PairStream<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::inverse;

    fn small_manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            samples_per_connector: vec![n],
            val_size: 2,
            test_size: 2,
            camera: CameraIntrinsics::from_fov(24, 24, 70.0),
            ..DatasetManifest::single_connector("A1", 7)
        }
    }

    #[test]
    fn default_pose_lift() {
        let p = make_default_pose(Pose::IDENTITY);
        assert_eq!(p.translation, Vec3::new(0.0, 0.0, 0.15));
        let twice = make_default_pose(p);
        assert!((twice.translation.z - 0.30).abs() < 1e-15);
        let rotated = Pose::new(euler_to_quat(EulerAngles::new(10.0, 20.0, 30.0)), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(make_default_pose(rotated).rotation, rotated.rotation);
    }

    #[test]
    fn zero_ranges_return_default_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = make_default_pose(SceneState::new(ConnectorSpec::builtin("A1").unwrap()).insertion_pose());
        let p = sample_pose(&mut rng, d, &SamplingRanges::zero());
        assert_eq!(p.translation, d.translation);
        assert!(p.rotation.to_array().iter().zip(d.rotation.to_array()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn world_offsets_point_upwards() {
        let d = make_default_pose(SceneState::new(ConnectorSpec::builtin("A1").unwrap()).insertion_pose());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = sample_pose(&mut rng, d, &SamplingRanges::default());
            let dz = p.translation.z - d.translation.z;
            assert!((-1e-12..=0.010 + 1e-12).contains(&dz));
        }
    }

    #[test]
    fn placements() {
        let p = base_placements();
        assert_eq!(p.len(), 20);
        let centers: Vec<[f64; 2]> = p.iter().step_by(4).map(|p| p.position).collect();
        let mean = [0, 1].map(|k| centers[..4].iter().map(|c| c[k]).sum::<f64>() / 4.0);
        assert_eq!(centers[4], mean);
        assert!((centers[1][0] - centers[0][0] - 0.05).abs() < 1e-15);
        assert!((centers[2][1] - centers[1][1] - 0.05).abs() < 1e-15);
        assert_eq!(p[..4].iter().map(|p| p.yaw).collect::<Vec<_>>(), PLACEMENT_YAWS);
    }

    #[test]
    fn splits_partition() {
        let s = make_splits(30, 5, 6, 9);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!((s.val.len(), s.test.len(), s.train.len()), (5, 6, 19));
        assert_eq!(s, make_splits(30, 5, 6, 9));
    }

    #[test]
    fn manifest_validation() {
        let mut m = small_manifest(10);
        m.validate().unwrap();
        m.connectors = vec!["Z9".into()];
        assert!(m.validate().is_err());
        let mut m = small_manifest(5);
        assert!(m.validate().is_err());
        m.samples_per_connector = vec![10, 10];
        assert!(m.validate().is_err());
        let m = DatasetManifest::multi_connector(&["A1", "A1"], 200, 0);
        assert!(m.validate().is_err());
    }

    #[test]
    fn pair_stream_labels() {
        let data = generate_samples(&small_manifest(8)).unwrap();
        let samples = &data.connectors[0].samples;
        assert!(pair_stream(&samples[..0], 1, 0).is_err());
        assert!(pair_stream(&samples[..1], 1, 0).is_err());
        let pairs: Vec<Pair> = pair_stream(samples, 500, 3).unwrap().collect();
        assert_eq!(pairs.len(), 500);
        let mut saw_self = false;
        for p in &pairs {
            let want = relative_label(samples[p.index_a].t_d2e, samples[p.index_b].t_d2e);
            assert_eq!(p.label, want);
            let back = relative_label(samples[p.index_b].t_d2e, samples[p.index_a].t_d2e);
            assert!(inverse(back).max_param_diff(p.label) < 1e-9);
            if p.index_a == p.index_b {
                saw_self = true;
                assert!(p.label.max_param_diff(Pose::IDENTITY) < 1e-12);
            }
        }
        assert!(saw_self);
    }

    #[test]
    fn large_stream_is_lazy() {
        let data = generate_samples(&small_manifest(6)).unwrap();
        let s = pair_stream(&data.connectors[0].samples, 3_802_500, 0).unwrap();
        assert_eq!(s.len(), 3_802_500);
        assert_eq!(s.take(3).count(), 3);
    }

    #[test]
    fn dataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("ds");
        let m = small_manifest(8);
        let written = generate_dataset(&m, &out).unwrap();
        assert!(out.join("manifest.json").is_file());
        assert!(out.join("A1/7.pgm").is_file());
        let loaded = load_dataset(&out).unwrap();
        assert_eq!(loaded.manifest, m);
        let (a, b) = (&written.connectors[0], &loaded.connectors[0]);
        assert_eq!(a.splits, b.splits);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.t_d2e.to_params(), y.t_d2e.to_params());
            assert!(m.ranges.contains(&y.t_d2e));
        }
        // refuses to overwrite
        assert!(generate_dataset(&m, &out).is_err());
        // missing parent
        assert!(generate_dataset(&m, &tmp.path().join("no/such/dir")).is_err());
        assert!(!tmp.path().join("no").exists());
    }

    #[test]
    fn labels_are_byte_identical_across_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let m = small_manifest(8);
        generate_dataset(&m, &tmp.path().join("a")).unwrap();
        generate_dataset(&m, &tmp.path().join("b")).unwrap();
        let a = fs::read(tmp.path().join("a/A1/labels.jsonl")).unwrap();
        let b = fs::read(tmp.path().join("b/A1/labels.jsonl")).unwrap();
        assert_eq!(a, b);
    }
}
