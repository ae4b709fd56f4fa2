//! Calibration session state behind the HTTP service.
//!
//! Every mutation takes the revision the client last saw and fails with a
//! conflict if it is stale. Failed mutations leave the store untouched.

use std::path::{Path, PathBuf};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use planecal::geom::{serde_pose, Pose};
use planecal::io::{self, Dataset};
use planecal::solver::{CalibrationReport, MeasurementPair, SolverConfig};
use planecal::target::{PatchSelection, PlaneObservation, RansacConfig};

use crate::error::AppError;
use crate::frames::LoadedFrame;

pub const SESSION_FORMAT: &str = "planecal-session/1";
pub const SESSION_FILE: &str = "session.json";
pub const MEASUREMENTS_FILE: &str = "measurements.json";
pub const REPORT_FILE: &str = "report.json";

/// Where an accepted measurement came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub frame: String,
    pub selection: PatchSelection,
    /// Dataset-relative file references.
    pub cloud: String,
    pub corners: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptedMeasurement {
    pub pair: MeasurementPair,
    pub provenance: Provenance,
}

/// Fitted planes for the current frame, awaiting accept or reject.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub frame: String,
    pub selection: PatchSelection,
    pub lidar: PlaneObservation,
    /// `[ring, column]` of every RANSAC inlier.
    pub inlier_pixels: Vec<[usize; 2]>,
    pub patch_size: usize,
    pub camera: PlaneObservation,
}

/// Camera-side detection of the current frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraView {
    pub frame: String,
    pub image_width: u32,
    pub image_height: u32,
    pub corners: Vec<[f64; 2]>,
    /// Board outline reprojected with the fitted pose; `None` behind the camera.
    pub outline: Vec<Option<[f64; 2]>>,
    #[serde(with = "serde_pose")]
    pub board_pose: Pose,
    pub reprojection_rms: f64,
    pub observation: PlaneObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RasterInfo {
    pub dtype: &'static str,
    pub layout: &'static str,
    pub empty: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMeta {
    pub frame: String,
    pub index: usize,
    pub frame_count: usize,
    pub n_rings: usize,
    pub width: usize,
    pub populated: usize,
    pub range_min: Option<f64>,
    pub range_max: Option<f64>,
    pub seed_hint: Option<PatchSelection>,
    pub raster: RasterInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Range,
    Intensity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub revision: u64,
    pub dataset: PathBuf,
    pub frames: Vec<String>,
    pub current_frame: String,
    pub pending: Option<Candidate>,
    pub accepted: Vec<AcceptedMeasurement>,
    pub accepted_count: usize,
    pub has_report: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    revision: u64,
    current_frame: String,
    accepted: Vec<AcceptedMeasurement>,
    report: Option<CalibrationReport>,
}

#[derive(Debug)]
pub struct SessionStore {
    dataset: Dataset,
    solver: SolverConfig,
    ransac: RansacConfig,
    persist_dir: Option<PathBuf>,
    revision: u64,
    current: LoadedFrame,
    camera: Result<CameraView, AppError>,
    pending: Option<Candidate>,
    accepted: Vec<AcceptedMeasurement>,
    report: Option<CalibrationReport>,
}

fn camera_view(dataset: &Dataset, frame: &LoadedFrame) -> Result<CameraView, AppError> {
    let fit = frame.board_pose(dataset)?;
    let intr = &dataset.manifest.intrinsics;
    let board = &dataset.manifest.board;
    let outline = board
        .outline()
        .iter()
        .map(|p| {
            let q = fit.pose * Point3::from(*p);
            intr.project(&q.coords).ok().map(|px| [px.x, px.y])
        })
        .collect();
    Ok(CameraView {
        frame: frame.id.clone(),
        image_width: intr.width,
        image_height: intr.height,
        corners: frame.corners.corners.iter().map(|c| [c.x, c.y]).collect(),
        outline,
        board_pose: fit.pose,
        reprojection_rms: fit.reprojection_rms,
        observation: planecal::target::camera_plane(&fit, board),
    })
}

impl SessionStore {
    /// Opens a session on `dataset`. With `persist_dir`, an existing
    /// `session.json` there is resumed and every mutation is written back.
    pub fn open(
        dataset: Dataset,
        solver: SolverConfig,
        ransac: RansacConfig,
        persist_dir: Option<PathBuf>,
    ) -> Result<Self, AppError> {
        solver.validate()?;
        ransac.validate()?;
        let snapshot = match &persist_dir {
            Some(dir) if dir.join(SESSION_FILE).exists() => {
                Some(io::load_json::<Snapshot>(&dir.join(SESSION_FILE), SESSION_FORMAT)?)
            }
            _ => None,
        };
        let first = match &snapshot {
            Some(s) => s.current_frame.clone(),
            None => dataset
                .manifest
                .frames
                .first()
                .map(|f| f.id.clone())
                .ok_or_else(|| AppError::new("no_frame", "dataset has no frames"))?,
        };
        let current = LoadedFrame::load(&dataset, &first)?;
        let camera = camera_view(&dataset, &current);
        let mut store = Self {
            dataset,
            solver,
            ransac,
            persist_dir,
            revision: 0,
            current,
            camera,
            pending: None,
            accepted: Vec::new(),
            report: None,
        };
        if let Some(s) = snapshot {
            for m in &s.accepted {
                if store.dataset.frame(&m.provenance.frame).is_none() {
                    return Err(AppError::new(
                        "invalid_data",
                        format!("session references unknown frame `{}`", m.provenance.frame),
                    ));
                }
            }
            store.revision = s.revision;
            store.accepted = s.accepted;
            store.report = s.report;
        }
        if let Some(dir) = &store.persist_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| AppError::new("io", e.to_string()).with_details(serde_json::json!({ "path": dir })))?;
        }
        Ok(store)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn current_frame(&self) -> &LoadedFrame {
        &self.current
    }

    pub fn pending(&self) -> Option<&Candidate> {
        self.pending.as_ref()
    }

    pub fn accepted(&self) -> &[AcceptedMeasurement] {
        &self.accepted
    }

    pub fn report(&self) -> Option<&CalibrationReport> {
        self.report.as_ref()
    }

    pub fn measurements(&self) -> Vec<MeasurementPair> {
        self.accepted.iter().map(|m| m.pair.clone()).collect()
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            revision: self.revision,
            dataset: self.dataset.root.clone(),
            frames: self.dataset.manifest.frames.iter().map(|f| f.id.clone()).collect(),
            current_frame: self.current.id.clone(),
            pending: self.pending.clone(),
            accepted: self.accepted.clone(),
            accepted_count: self.accepted.len(),
            has_report: self.report.is_some(),
        }
    }

    pub fn frame_meta(&self) -> FrameMeta {
        let image = &self.current.image;
        let bounds = image.range_bounds();
        FrameMeta {
            frame: self.current.id.clone(),
            index: self
                .dataset
                .manifest
                .frames
                .iter()
                .position(|f| f.id == self.current.id)
                .unwrap_or(0),
            frame_count: self.dataset.manifest.frames.len(),
            n_rings: image.n_rings(),
            width: image.width(),
            populated: image.populated_count(),
            range_min: bounds.map(|b| b.0),
            range_max: bounds.map(|b| b.1),
            seed_hint: self.current.seed_hint,
            raster: RasterInfo {
                dtype: "f64le",
                layout: "row_major_ring_by_column",
                empty: "nan",
            },
        }
    }

    /// Little-endian f64 raster of the current frame.
    pub fn raster(&self, channel: Channel) -> Vec<u8> {
        let values = match channel {
            Channel::Range => self.current.image.range_raster(),
            Channel::Intensity => self.current.image.intensity_raster(),
        };
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn camera(&self) -> Result<&CameraView, AppError> {
        self.camera.as_ref().map_err(Clone::clone)
    }

    fn check(&self, revision: u64) -> Result<(), AppError> {
        if revision != self.revision {
            return Err(AppError::conflict(self.revision, revision));
        }
        Ok(())
    }

    fn commit(&mut self) -> Result<(), AppError> {
        self.revision += 1;
        self.persist()
    }

    fn persist(&self) -> Result<(), AppError> {
        let Some(dir) = &self.persist_dir else {
            return Ok(());
        };
        let snapshot = Snapshot {
            revision: self.revision,
            current_frame: self.current.id.clone(),
            accepted: self.accepted.clone(),
            report: self.report.clone(),
        };
        io::save_json(&dir.join(SESSION_FILE), SESSION_FORMAT, &snapshot)?;
        io::save_measurements(&dir.join(MEASUREMENTS_FILE), &self.measurements())?;
        if let Some(report) = &self.report {
            io::save_report(&dir.join(REPORT_FILE), report)?;
        }
        Ok(())
    }

    pub fn select_frame(&mut self, revision: u64, id: &str) -> Result<(), AppError> {
        self.check(revision)?;
        let frame = LoadedFrame::load(&self.dataset, id)?;
        self.camera = camera_view(&self.dataset, &frame);
        self.current = frame;
        self.pending = None;
        self.commit()
    }

    /// Fits both planes for the current frame around `sel`.
    pub fn seed(&mut self, revision: u64, sel: PatchSelection) -> Result<&Candidate, AppError> {
        self.check(revision)?;
        let camera = self.camera()?.observation;
        let lidar = self.current.lidar_plane(&sel, &self.ransac)?;
        self.pending = Some(Candidate {
            frame: self.current.id.clone(),
            selection: sel,
            lidar: lidar.fit.observation,
            inlier_pixels: lidar.inlier_pixels().into_iter().map(|(r, c)| [r, c]).collect(),
            patch_size: lidar.patch.points.len(),
            camera,
        });
        self.commit()?;
        Ok(self.pending.as_ref().expect("just set"))
    }

    pub fn accept(&mut self, revision: u64) -> Result<&AcceptedMeasurement, AppError> {
        self.check(revision)?;
        let candidate = self
            .pending
            .as_ref()
            .ok_or_else(|| AppError::new("no_candidate", "no pending measurement to accept"))?;
        if self.accepted.iter().any(|m| m.pair.id == candidate.frame) {
            return Err(AppError::new(
                "duplicate_measurement",
                format!("frame `{}` is already accepted; remove it first", candidate.frame),
            ));
        }
        let entry = self.dataset.frame(&candidate.frame).expect("pending frame is in the dataset");
        let measurement = AcceptedMeasurement {
            pair: MeasurementPair {
                id: candidate.frame.clone(),
                lidar_plane: candidate.lidar.plane,
                camera_plane: candidate.camera.plane,
            },
            provenance: Provenance {
                frame: candidate.frame.clone(),
                selection: candidate.selection,
                cloud: entry.cloud.clone(),
                corners: entry.corners.clone(),
            },
        };
        self.accepted.push(measurement);
        self.pending = None;
        self.commit()?;
        Ok(self.accepted.last().expect("just pushed"))
    }

    pub fn reject(&mut self, revision: u64) -> Result<(), AppError> {
        self.check(revision)?;
        if self.pending.is_none() {
            return Err(AppError::new("no_candidate", "no pending measurement to reject"));
        }
        self.pending = None;
        self.commit()
    }

    pub fn remove(&mut self, revision: u64, id: &str) -> Result<(), AppError> {
        self.check(revision)?;
        let index = self
            .accepted
            .iter()
            .position(|m| m.pair.id == id)
            .ok_or_else(|| AppError::new("no_measurement", format!("no accepted measurement `{id}`")))?;
        self.accepted.remove(index);
        self.commit()
    }

    pub fn calibrate(&mut self, revision: u64) -> Result<&CalibrationReport, AppError> {
        self.check(revision)?;
        let report = crate::commands::calibrate(&self.measurements(), &self.solver)?;
        self.report = Some(report);
        self.commit()?;
        Ok(self.report.as_ref().expect("just set"))
    }

    pub fn persist_dir(&self) -> Option<&Path> {
        self.persist_dir.as_deref()
    }
}
