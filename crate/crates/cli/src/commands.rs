//! Batch commands. Each is a plain function so tests can call it without a
//! process boundary; `main` only parses flags and prints.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use planecal::geom::{transform_plane, Plane};
use planecal::io::{self, CloudEncoding, Dataset, FrameData, FrameTruth, GroundTruth};
use planecal::solver::{self, CalibrationReport, MeasurementPair, PoseError, SolverConfig};
use planecal::synth::{
    self, derive_seed, NoiseSpec, RigSpec, SceneSpec, SweepConfig, SweepTable, SynthError,
};
use planecal::target::{PatchSelection, RansacConfig};

use crate::error::AppError;
use crate::frames::LoadedFrame;

pub const SIMULATE_CONFIG_FORMAT: &str = "planecal-simulate-config/1";
pub const SWEEP_CONFIG_FORMAT: &str = "planecal-sweep-config/1";
pub const RANSAC_CONFIG_FORMAT: &str = "planecal-ransac-config/1";
pub const EVALUATION_FORMAT: &str = "planecal-evaluation/1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    #[default]
    Text,
    Binary,
}

impl From<Encoding> for CloudEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Text => CloudEncoding::Text,
            Encoding::Binary => CloudEncoding::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub rig: RigSpec,
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
    pub frames: usize,
    pub seed: u64,
    pub cloud_encoding: Encoding,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            scene: SceneSpec::default(),
            noise: NoiseSpec::noiseless(),
            frames: 6,
            seed: 0,
            cloud_encoding: Encoding::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepCommandConfig {
    pub rig: RigSpec,
    pub sweep: SweepConfig,
}

/// Loads a config document, or the default when no path is given.
pub fn load_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>, format: &str) -> Result<T, AppError> {
    match path {
        Some(p) => Ok(io::load_json(p, format)?),
        None => Ok(T::default()),
    }
}

pub fn load_solver_config(path: Option<&Path>) -> Result<SolverConfig, AppError> {
    match path {
        Some(p) => Ok(io::load_solver_config(p)?),
        None => Ok(SolverConfig::default()),
    }
}

/// Writes a synthetic dataset with full scans, corner files, seed hints and
/// `ground_truth.json`.
pub fn simulate(cfg: &SimulateConfig, out: &Path) -> Result<GroundTruth, AppError> {
    if cfg.frames == 0 {
        return Err(AppError::new("invalid_config", "frames must be ≥ 1"));
    }
    cfg.rig.validate()?;
    let rig = &cfg.rig;
    let mut placements = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut truths = Vec::with_capacity(cfg.frames);
    let mut draws = 0u64;
    while frames.len() < cfg.frames {
        draws += 1;
        if draws > synth::MAX_PLACEMENT_PROPOSALS as u64 {
            return Err(SynthError::RejectionExhausted { attempts: draws as usize }.into());
        }
        let pose = synth::sample_board_pose(&mut placements, rig)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.noise.rng_seed, &[cfg.seed, draws]));
        let corners = match synth::simulate_camera(rig, &pose, &cfg.noise, &mut noise_rng) {
            Ok(c) => c,
            Err(SynthError::OutOfFrustum { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let cloud = synth::simulate_scan(rig, &cfg.scene, &pose, &cfg.noise, &mut noise_rng)?;
        let id = format!("f{:03}", frames.len());
        let camera_plane = transform_plane(&pose, &Plane::new(Vector3::z(), 0.0).expect("unit normal"));
        truths.push(FrameTruth {
            id: id.clone(),
            board_pose: pose,
            lidar_plane: transform_plane(&rig.ground_truth_extrinsic.inverse(), &camera_plane),
            camera_plane,
        });
        frames.push(FrameData {
            id,
            cloud,
            corners,
            seed_hint: synth::seed_hint(rig, &pose),
        });
    }
    io::write_dataset(out, rig.camera, rig.lidar, rig.board, &frames, cfg.cloud_encoding.into())?;
    let truth = GroundTruth {
        extrinsic: rig.ground_truth_extrinsic,
        frames: truths,
    };
    io::save_ground_truth(&out.join(io::GROUND_TRUTH_FILE), &truth)?;
    Ok(truth)
}

pub fn sweep(cfg: &SweepCommandConfig) -> Result<SweepTable, AppError> {
    Ok(synth::run_sweep(&cfg.sweep, &cfg.rig)?)
}

/// Fixed-width text rendering of a sweep table, translation errors in mm.
pub fn format_sweep(table: &SweepTable) -> String {
    let mut out = String::new();
    let levels = table.noise_levels();
    let per = table.measurement_counts.len();
    let _ = write!(out, "{:>6}", "w_s");
    for k in 0..levels {
        let c = &table.cells[k * per];
        let _ = write!(out, " | {:>23}", format!("sl={} sc={}", c.sigma_lidar, c.sigma_camera));
    }
    out.push('\n');
    for (j, w) in table.measurement_counts.iter().enumerate() {
        let _ = write!(out, "{w:>6}");
        for k in 0..levels {
            let c = &table.cells[k * per + j];
            let _ = write!(out, " | {:>11.3} {:>11.3}", c.mean_e_t * 1e3, c.stdev_e_t * 1e3);
        }
        out.push('\n');
    }
    out
}

/// Explicit seed for one frame, as given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSelection {
    pub frame: String,
    pub seed: Option<PatchSelection>,
}

/// Non-interactive extraction: every frame with its seed hint, or a single
/// frame with an optional explicit seed.
pub fn extract(
    dataset: &Dataset,
    only: Option<&FrameSelection>,
    ransac: &RansacConfig,
) -> Result<Vec<MeasurementPair>, AppError> {
    let ids: Vec<String> = match only {
        Some(sel) => vec![sel.frame.clone()],
        None => dataset.manifest.frames.iter().map(|f| f.id.clone()).collect(),
    };
    ids.iter()
        .map(|id| {
            let frame = LoadedFrame::load(dataset, id)?;
            frame.measure(dataset, only.and_then(|s| s.seed), ransac)
        })
        .collect()
}

pub fn calibrate(measurements: &[MeasurementPair], cfg: &SolverConfig) -> Result<CalibrationReport, AppError> {
    Ok(solver::calibrate(measurements, cfg, None)?)
}

pub fn evaluate(report: &CalibrationReport, truth: &GroundTruth) -> PoseError {
    solver::evaluate_error(&report.extrinsic, &truth.extrinsic)
}
