//! Simulated LiDAR–camera rig with ground truth.
//!
//! Board placements are drawn at random in front of the camera and kept only
//! when both sensors can observe the target. The LiDAR is a ring × azimuth ray
//! grid with Gaussian range noise along each ray; the camera projects the
//! board corners with Gaussian corner noise, in pixels by default.
//! [`run_sweep`] repeats calibrations on random subsets of a measurement pool
//! to study accuracy against measurement count and noise.

use std::f64::consts::PI;

use nalgebra::{Point3, Rotation3, Translation3, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Pose};
use crate::projection::{
    undistort_pixel, CameraIntrinsics, LidarPoint, LidarProjectionParams, PointCloud,
    ProjectionError, ScanLayout,
};
use crate::solver::{self, MeasurementPair, SolverConfig, SolverError};
use crate::target::{self, BoardSpec, CornerSet, PatchSelection, RansacConfig, TargetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("no valid board placement after {attempts} proposals")]
    RejectionExhausted { attempts: usize },
    #[error("board produced {hits} LiDAR returns, need at least 3")]
    NoHits { hits: usize },
    #[error("board corner {index} is outside the camera frustum")]
    OutOfFrustum { index: usize },
    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub const MAX_PLACEMENT_PROPOSALS: usize = 10_000;

/// Distribution of board placements, relative to the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSpec {
    /// Board-center distance from the camera, meters.
    pub min_range: f64,
    pub max_range: f64,
    /// Bound on each of roll, pitch and yaw, radians.
    pub max_tilt: f64,
    /// Minimum LiDAR returns on the board for a placement to count.
    pub min_lidar_hits: usize,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        Self {
            min_range: 1.5,
            max_range: 6.0,
            max_tilt: 40f64.to_radians(),
            min_lidar_hits: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    /// Camera-from-LiDAR transform.
    #[serde(with = "geom::serde_pose")]
    pub ground_truth_extrinsic: Pose,
    pub lidar: LidarProjectionParams,
    /// Elevation of the lowest and highest ring, radians.
    pub lidar_elevation: [f64; 2],
    pub camera: CameraIntrinsics,
    pub board: BoardSpec,
    pub placement: PlacementSpec,
}

/// LiDAR axes (x forward, y left, z up) expressed in camera axes (x right,
/// y down, z forward).
pub fn lidar_to_camera_axes() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0, //
        1.0, 0.0, 0.0,
    ))
}

impl Default for RigSpec {
    /// 64-ring, 1024-column LiDAR over ±22.5° mounted 25 cm above a
    /// 1440×1080 camera, with a 6×8 board of 0.2 m squares.
    fn default() -> Self {
        let mount = Rotation3::from_euler_angles(0.02, -0.03, 0.015);
        Self {
            ground_truth_extrinsic: Pose::from_parts(
                Translation3::new(0.12, -0.25, 0.05),
                mount * lidar_to_camera_axes(),
            ),
            lidar: LidarProjectionParams::full_scan(1024, 64),
            lidar_elevation: [-22.5f64.to_radians(), 22.5f64.to_radians()],
            camera: CameraIntrinsics::pinhole(900.0, 900.0, 720.0, 540.0, 1440, 1080),
            board: BoardSpec {
                rows: 6,
                cols: 8,
                square_size: 0.2,
            },
            placement: PlacementSpec::default(),
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.lidar.validate()?;
        self.camera.validate()?;
        self.board.validate()?;
        if !geom::is_valid_pose(&self.ground_truth_extrinsic) {
            return Err(SynthError::InvalidConfig("extrinsic is not a rigid transform".into()));
        }
        let [lo, hi] = self.lidar_elevation;
        if !(lo < hi) || lo < -PI / 2.0 || hi > PI / 2.0 {
            return Err(SynthError::InvalidConfig("invalid lidar elevation range".into()));
        }
        let p = &self.placement;
        if !(p.min_range > 0.0 && p.min_range <= p.max_range) || !(p.max_tilt >= 0.0) {
            return Err(SynthError::InvalidConfig("invalid placement ranges".into()));
        }
        Ok(())
    }

    pub fn ring_elevation(&self, ring: usize) -> f64 {
        let [lo, hi] = self.lidar_elevation;
        if self.lidar.n_rings == 1 {
            return 0.5 * (lo + hi);
        }
        lo + (hi - lo) * ring as f64 / (self.lidar.n_rings - 1) as f64
    }

    /// Unit ray of a LiDAR pixel in the LiDAR frame.
    pub fn ray(&self, ring: usize, column: usize) -> Vector3<f64> {
        let el = self.ring_elevation(ring);
        let az = self.lidar.azimuth(column);
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Range noise standard deviation, meters.
    pub sigma_lidar: f64,
    /// Corner noise standard deviation, in `camera_unit`.
    pub sigma_camera: f64,
    #[serde(default)]
    pub camera_unit: CornerNoiseUnit,
    pub rng_seed: u64,
}

/// Unit of the corner noise standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerNoiseUnit {
    /// Added to the final pixel coordinates.
    #[default]
    Pixels,
    /// Added in normalized coordinates (units of focal length), before distortion.
    Normalized,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            sigma_lidar: 0.0,
            sigma_camera: 0.0,
            camera_unit: CornerNoiseUnit::Pixels,
            rng_seed: 0,
        }
    }

    pub fn new(sigma_lidar: f64, sigma_camera: f64, rng_seed: u64) -> Self {
        Self {
            sigma_lidar,
            sigma_camera,
            camera_unit: CornerNoiseUnit::Pixels,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma_lidar >= 0.0) || !(self.sigma_camera >= 0.0) {
            return Err(SynthError::InvalidConfig("noise sigmas must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over a sequence of words; used to derive independent
/// stream seeds from a master seed and indices.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(master), |acc, p| mix(acc ^ mix(*p)))
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite positive sigma"))
}

/// Draws a candidate camera-from-board pose without validity checks.
pub fn propose_board_pose<R: Rng + ?Sized>(rng: &mut R, rig: &RigSpec) -> Pose {
    let p = &rig.placement;
    let range = if p.max_range > p.min_range {
        rng.random_range(p.min_range..p.max_range)
    } else {
        p.min_range
    };
    let pixel = Vector2::new(
        rng.random_range(0.0..rig.camera.width as f64),
        rng.random_range(0.0..rig.camera.height as f64),
    );
    let ray = undistort_pixel(&rig.camera, &pixel).unwrap_or_else(|_| Vector2::zeros());
    let center = Vector3::new(ray.x, ray.y, 1.0).normalize() * range;
    let mut tilt = || {
        if p.max_tilt > 0.0 {
            rng.random_range(-p.max_tilt..p.max_tilt)
        } else {
            0.0
        }
    };
    let rotation = Rotation3::from_euler_angles(tilt(), tilt(), tilt());
    let translation = center - rotation * rig.board.center();
    Pose::from_parts(Translation3::from(translation), rotation)
}

/// Counts noiseless LiDAR rays hitting the board.
pub fn count_lidar_hits(rig: &RigSpec, board_pose: &Pose) -> usize {
    let lidar_from_board = rig.ground_truth_extrinsic.inverse() * board_pose;
    let mut hits = 0;
    for ring in 0..rig.lidar.n_rings {
        for column in 0..rig.lidar.width {
            if board_intersection(rig, &lidar_from_board, &rig.ray(ring, column)).is_some() {
                hits += 1;
            }
        }
    }
    hits
}

/// Range along `dir` to the board, if the ray hits it from either side.
fn board_intersection(rig: &RigSpec, lidar_from_board: &Pose, dir: &Vector3<f64>) -> Option<f64> {
    let normal = lidar_from_board.rotation * Vector3::z();
    let origin = lidar_from_board.translation.vector;
    let denom = normal.dot(dir);
    if denom.abs() < 1e-9 {
        return None;
    }
    let s = normal.dot(&origin) / denom;
    if s <= 0.0 {
        return None;
    }
    let local = lidar_from_board.inverse_transform_point(&Point3::from(dir * s));
    rig.board.contains(&local.coords).then_some(s)
}

/// Whether both sensors can observe the board at this placement.
pub fn is_valid_placement(rig: &RigSpec, board_pose: &Pose) -> bool {
    let in_image = rig.board.corner_model().iter().all(|x| {
        let p = board_pose * Point3::from(*x);
        rig.camera
            .project(&p.coords)
            .is_ok_and(|px| rig.camera.in_image(&px))
    });
    in_image && count_lidar_hits(rig, board_pose) >= rig.placement.min_lidar_hits
}

/// Rejection-samples a valid camera-from-board pose.
pub fn sample_board_pose<R: Rng + ?Sized>(rng: &mut R, rig: &RigSpec) -> Result<Pose, SynthError> {
    for _ in 0..MAX_PLACEMENT_PROPOSALS {
        let pose = propose_board_pose(rng, rig);
        if is_valid_placement(rig, &pose) {
            return Ok(pose);
        }
    }
    Err(SynthError::RejectionExhausted {
        attempts: MAX_PLACEMENT_PROPOSALS,
    })
}

/// Largest patch radius tried by [`seed_hint`].
pub const MAX_HINT_RADIUS: usize = 16;

/// LiDAR seed on the board: the board pixel with the largest disc (up to
/// [`MAX_HINT_RADIUS`]) lying entirely on the board, ties broken by closeness
/// to the board center. Pixels outside the image count as off the board.
pub fn seed_hint(rig: &RigSpec, board_pose: &Pose) -> Option<PatchSelection> {
    let lidar_from_board = rig.ground_truth_extrinsic.inverse() * board_pose;
    let center = (lidar_from_board * Point3::from(rig.board.center())).coords.normalize();
    let (w, n) = (rig.lidar.width, rig.lidar.n_rings);
    let mask: Vec<bool> = (0..n * w)
        .map(|i| board_intersection(rig, &lidar_from_board, &rig.ray(i / w, i % w)).is_some())
        .collect();
    let hit = |ring: i64, column: i64| {
        ring >= 0 && (ring as usize) < n && mask[ring as usize * w + column.rem_euclid(w as i64) as usize]
    };
    let cap = MAX_HINT_RADIUS as i64;
    let radius_at = |ring: i64, column: i64| {
        let mut nearest_off = i64::MAX;
        for dr in -cap..=cap {
            for dc in -cap..=cap {
                let d2 = dr * dr + dc * dc;
                if d2 <= cap * cap && d2 < nearest_off && !hit(ring + dr, column + dc) {
                    nearest_off = d2;
                }
            }
        }
        (1..=cap).take_while(|r| r * r < nearest_off).last().unwrap_or(0)
    };
    let mut best: Option<(i64, f64, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (ring, column) = (i / w, i % w);
        let radius = radius_at(ring as i64, column as i64);
        let angle = geom::angle_between(&rig.ray(ring, column), &center);
        if best.is_none_or(|(r, a, _, _)| radius > r || (radius == r && angle < a)) {
            best = Some((radius, angle, ring, column));
        }
    }
    let (radius, _, ring, column) = best?;
    Some(PatchSelection {
        ring,
        column,
        radius: radius.max(1) as f64,
    })
}

/// Intensity written for board returns; background surfaces use lower values.
pub const BOARD_INTENSITY: f64 = 0.9;

/// LiDAR returns on the board only, with range noise along each ray.
pub fn simulate_lidar(
    rig: &RigSpec,
    board_pose: &Pose,
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<PointCloud, SynthError> {
    noise.validate()?;
    let lidar_from_board = rig.ground_truth_extrinsic.inverse() * board_pose;
    let dist = gaussian(noise.sigma_lidar);
    let mut points = Vec::new();
    for ring in 0..rig.lidar.n_rings {
        for column in 0..rig.lidar.width {
            let dir = rig.ray(ring, column);
            if let Some(range) = board_intersection(rig, &lidar_from_board, &dir) {
                let eps = dist.map_or(0.0, |d| d.sample(rng));
                points.push(LidarPoint::new(dir * (range + eps), ring as u32, BOARD_INTENSITY));
            }
        }
    }
    if points.len() < 3 {
        return Err(SynthError::NoHits { hits: points.len() });
    }
    Ok(PointCloud::new(points))
}

/// Background geometry used by [`simulate_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Height of the LiDAR above the ground plane, meters.
    pub ground_depth: f64,
    /// Radius of the cylindrical wall around the sensor, meters.
    pub wall_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ground_depth: 1.6,
            wall_radius: 15.0,
        }
    }
}

/// Full ordered scan (ring-major, one return per ray) of the board inside a
/// room made of a ground plane and a cylindrical wall. Placements are sampled
/// without regard to the room, so the board is never occluded by it.
pub fn simulate_scan(
    rig: &RigSpec,
    scene: &SceneSpec,
    board_pose: &Pose,
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<PointCloud, SynthError> {
    noise.validate()?;
    let lidar_from_board = rig.ground_truth_extrinsic.inverse() * board_pose;
    let dist = gaussian(noise.sigma_lidar);
    let mut points = Vec::with_capacity(rig.lidar.n_rings * rig.lidar.width);
    for ring in 0..rig.lidar.n_rings {
        for column in 0..rig.lidar.width {
            let dir = rig.ray(ring, column);
            let horizontal = (dir.x * dir.x + dir.y * dir.y).sqrt();
            let wall = scene.wall_radius / horizontal;
            let ground = if dir.z < 0.0 { scene.ground_depth / -dir.z } else { f64::INFINITY };
            let best = match board_intersection(rig, &lidar_from_board, &dir) {
                Some(s) => (s, BOARD_INTENSITY),
                None if ground < wall => (ground, 0.3),
                None => (wall, 0.5),
            };
            let eps = dist.map_or(0.0, |d| d.sample(rng));
            points.push(LidarPoint::new(dir * (best.0 + eps), ring as u32, best.1));
        }
    }
    Ok(PointCloud {
        points,
        layout: Some(ScanLayout {
            width: rig.lidar.width,
            n_rings: rig.lidar.n_rings,
        }),
    })
}

/// Projects the board corners and adds Gaussian corner noise.
pub fn simulate_camera(
    rig: &RigSpec,
    board_pose: &Pose,
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<CornerSet, SynthError> {
    noise.validate()?;
    let dist = gaussian(noise.sigma_camera);
    let mut corners = Vec::with_capacity(rig.board.corner_count());
    for (index, x) in rig.board.corner_model().iter().enumerate() {
        let p = board_pose * Point3::from(*x);
        if p.z <= crate::projection::MIN_DEPTH {
            return Err(SynthError::OutOfFrustum { index });
        }
        let mut normalized = Vector2::new(p.x / p.z, p.y / p.z);
        let mut jitter = || dist.map_or(Vector2::zeros(), |d| Vector2::new(d.sample(rng), d.sample(rng)));
        if noise.camera_unit == CornerNoiseUnit::Normalized {
            normalized += jitter();
        }
        let mut pixel = rig.camera.to_pixel(&rig.camera.distort(&normalized));
        if noise.camera_unit == CornerNoiseUnit::Pixels {
            pixel += jitter();
        }
        if !rig.camera.in_image(&pixel) {
            return Err(SynthError::OutOfFrustum { index });
        }
        corners.push(pixel);
    }
    Ok(CornerSet::new(corners, rig.board)?)
}

/// Measurement pool with the placements that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub pairs: Vec<MeasurementPair>,
    /// Camera-from-board pose per pair.
    pub board_poses: Vec<Pose>,
    pub ground_truth: Pose,
}

/// RANSAC settings used when extracting LiDAR planes in simulation.
pub fn pool_ransac_config(seed: u64) -> RansacConfig {
    RansacConfig {
        rng_seed: seed,
        ..RansacConfig::default()
    }
}

/// Extracts one measurement pair at a placement, running the same plane
/// extraction as on real data.
pub fn simulate_measurement(
    rig: &RigSpec,
    board_pose: &Pose,
    noise: &NoiseSpec,
    id: String,
    seed: u64,
) -> Result<MeasurementPair, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = simulate_lidar(rig, board_pose, noise, &mut rng)?;
    let positions: Vec<Vector3<f64>> = hits.points.iter().map(|p| p.position).collect();
    let lidar = target::ransac_plane(&positions, &pool_ransac_config(rng.random()))?;
    let corners = simulate_camera(rig, board_pose, noise, &mut rng)?;
    let fit = target::board_pose(&corners, &rig.camera)?;
    let camera = target::camera_plane(&fit, &rig.board);
    Ok(MeasurementPair {
        id,
        lidar_plane: lidar.observation.plane,
        camera_plane: camera.plane,
    })
}

/// Generates `pool_size` valid measurements. Placements come from `rng`;
/// sensor noise from `noise.rng_seed`, so pools at different noise levels share
/// the same placements.
pub fn generate_pool<R: Rng + ?Sized>(
    rig: &RigSpec,
    noise: &NoiseSpec,
    pool_size: usize,
    rng: &mut R,
) -> Result<Pool, SynthError> {
    rig.validate()?;
    noise.validate()?;
    let mut pairs = Vec::with_capacity(pool_size);
    let mut board_poses = Vec::with_capacity(pool_size);
    let mut attempts = 0;
    while pairs.len() < pool_size {
        attempts += 1;
        if attempts > MAX_PLACEMENT_PROPOSALS {
            return Err(SynthError::RejectionExhausted { attempts });
        }
        let pose = sample_board_pose(rng, rig)?;
        let id = format!("p{:03}", pairs.len());
        let seed = derive_seed(noise.rng_seed, &[attempts as u64]);
        // An extraction failure is an invalid measurement, like a missed detection.
        if let Ok(pair) = simulate_measurement(rig, &pose, noise, id, seed) {
            pairs.push(pair);
            board_poses.push(pose);
        }
    }
    Ok(Pool {
        pairs,
        board_poses,
        ground_truth: rig.ground_truth_extrinsic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub measurement_counts: Vec<usize>,
    pub trials_per_count: usize,
    pub noise_levels: Vec<NoiseSpec>,
    pub pool_size: usize,
    /// Master seed for placements and subset selection.
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            measurement_counts: vec![3, 4, 5, 10, 20, 30, 39],
            trials_per_count: 40,
            noise_levels: vec![
                NoiseSpec::noiseless(),
                NoiseSpec::new(8e-3, 7e-3, 1),
                NoiseSpec::new(16e-3, 14e-3, 2),
            ],
            pool_size: 53,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.measurement_counts.is_empty() || self.measurement_counts.iter().any(|&c| c < 3) {
            return bad("measurement counts must be ≥ 3");
        }
        if self.trials_per_count < 1 {
            return bad("trials_per_count must be ≥ 1");
        }
        if self.noise_levels.is_empty() {
            return bad("at least one noise level is required");
        }
        let max = self.measurement_counts.iter().copied().max().unwrap_or(0);
        if self.pool_size < max {
            return bad("pool_size must be ≥ the largest measurement count");
        }
        self.solver.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialResult {
    pub e_t: f64,
    pub e_r: f64,
}

/// Statistics for one (noise level, measurement count) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub sigma_lidar: f64,
    pub sigma_camera: f64,
    pub measurements: usize,
    pub trials: usize,
    /// Trials where the solver refused the subset (singular system).
    pub failures: usize,
    /// Meters.
    pub mean_e_t: f64,
    pub stdev_e_t: f64,
    /// Radians.
    pub mean_e_r: f64,
    pub stdev_e_r: f64,
    /// Trial with the smallest translation error.
    pub best: Option<TrialResult>,
    pub results: Vec<Option<TrialResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTable {
    pub seed: u64,
    pub pool_size: usize,
    pub measurement_counts: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, noise_index: usize, measurements: usize) -> Option<&SweepCell> {
        let per_noise = self.measurement_counts.len();
        let j = self.measurement_counts.iter().position(|&c| c == measurements)?;
        self.cells.get(noise_index * per_noise + j)
    }

    pub fn noise_levels(&self) -> usize {
        self.cells.len() / self.measurement_counts.len().max(1)
    }
}

fn mean_stdev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_trial(pool: &Pool, count: usize, seed: u64, cfg: &SolverConfig) -> Option<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.pairs.len(), count).into_vec();
    picked.sort_unstable();
    let subset: Vec<MeasurementPair> = picked.iter().map(|&i| pool.pairs[i].clone()).collect();
    let report = solver::calibrate(&subset, cfg, None).ok()?;
    let e = solver::evaluate_error(&report.extrinsic, &pool.ground_truth);
    Some(TrialResult { e_t: e.e_t, e_r: e.e_r })
}

/// Runs the measurement-count × noise sweep.
///
/// Trials run in parallel; each owns a seed derived from
/// `(seed, noise index, count, trial)` and results are reduced in a fixed order,
/// so the table does not depend on the thread count.
pub fn run_sweep(cfg: &SweepConfig, rig: &RigSpec) -> Result<SweepTable, SynthError> {
    cfg.validate()?;
    rig.validate()?;
    let mut cells = Vec::new();
    for (k, noise) in cfg.noise_levels.iter().enumerate() {
        let mut placement_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x504f_4f4c]));
        let pool = generate_pool(rig, noise, cfg.pool_size, &mut placement_rng)?;
        for &count in &cfg.measurement_counts {
            let results: Vec<Option<TrialResult>> = (0..cfg.trials_per_count)
                .into_par_iter()
                .map(|t| {
                    let seed = derive_seed(cfg.seed, &[k as u64, count as u64, t as u64]);
                    run_trial(&pool, count, seed, &cfg.solver)
                })
                .collect();
            let ok: Vec<TrialResult> = results.iter().flatten().copied().collect();
            let e_t: Vec<f64> = ok.iter().map(|r| r.e_t).collect();
            let e_r: Vec<f64> = ok.iter().map(|r| r.e_r).collect();
            let (mean_e_t, stdev_e_t) = mean_stdev(&e_t);
            let (mean_e_r, stdev_e_r) = mean_stdev(&e_r);
            let best = ok.iter().copied().min_by(|a, b| a.e_t.total_cmp(&b.e_t));
            cells.push(SweepCell {
                sigma_lidar: noise.sigma_lidar,
                sigma_camera: noise.sigma_camera,
                measurements: count,
                trials: cfg.trials_per_count,
                failures: results.len() - ok.len(),
                mean_e_t,
                stdev_e_t,
                mean_e_r,
                stdev_e_r,
                best,
                results,
            });
        }
    }
    Ok(SweepTable {
        seed: cfg.seed,
        pool_size: cfg.pool_size,
        measurement_counts: cfg.measurement_counts.clone(),
        cells,
    })
}
