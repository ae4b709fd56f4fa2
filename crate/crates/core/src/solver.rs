//! Joint estimation of the camera-from-LiDAR extrinsic from paired planes.
//!
//! Each measurement contributes the 4D residual
//! `e_i = plane_error(X π_lidar, π_camera)`. The objective
//! `Σ ρ(‖e_i‖_Ω)` with a Huber kernel `ρ` is minimized by iteratively
//! reweighted Gauss-Newton on SE(3), using left-multiplicative twists
//! `[δt | ω]`. A scalar Levenberg damping term only kicks in when a full
//! Gauss-Newton step fails to decrease the objective.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Matrix4, Matrix6, SymmetricEigen, Vector3, Vector4, Vector6, SMatrix};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geom::{
    self, boxplus, plane_error, plane_error_jacobian, transform_jacobian, transform_plane, Plane,
    Pose, Twist,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("need at least 3 measurements, got {got}")]
    InsufficientMeasurements { got: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "normal matrix is singular (eigenvalue ratio {ratio:e} below threshold); \
         plane normals do not constrain all six degrees of freedom"
    )]
    SingularNormalMatrix {
        ratio: f64,
        report: Box<CalibrationReport>,
    },
}

/// One target placement seen by both sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementPair {
    pub id: String,
    pub lidar_plane: Plane,
    pub camera_plane: Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub update_tolerance: f64,
    /// Huber threshold on the Ω-norm of the residual; `inf` disables it.
    #[serde(with = "extended_f64")]
    pub huber_delta: f64,
    pub normal_weight: f64,
    pub dist_weight: f64,
    /// Relative eigenvalue threshold `λ_min / λ_max` of the normal matrix.
    pub conditioning_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            update_tolerance: 1e-9,
            huber_delta: 0.1,
            normal_weight: 1.0,
            dist_weight: 1.0,
            conditioning_threshold: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn least_squares() -> Self {
        Self {
            huber_delta: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be ≥ 1");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be > 0");
        }
        if !(self.normal_weight > 0.0 && self.normal_weight.is_finite())
            || !(self.dist_weight > 0.0 && self.dist_weight.is_finite())
        {
            return bad("weights must be positive and finite");
        }
        if !(self.update_tolerance >= 0.0) || !(self.conditioning_threshold >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        Ok(())
    }

    fn omega(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::new(
            self.dist_weight,
            self.normal_weight,
            self.normal_weight,
            self.normal_weight,
        ))
    }

    fn huber_weight(&self, norm: f64) -> f64 {
        if norm <= self.huber_delta {
            1.0
        } else {
            self.huber_delta / norm
        }
    }

    fn huber_cost(&self, norm: f64) -> f64 {
        if norm <= self.huber_delta {
            norm * norm
        } else {
            2.0 * self.huber_delta * norm - self.huber_delta * self.huber_delta
        }
    }
}

/// Floats that may be infinite, written as `"inf"` / `"-inf"` in text formats.
pub mod extended_f64 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            let text = if *v > 0.0 { "inf" } else { "-inf" };
            Repr::Text(text.into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementResidual {
    pub id: String,
    /// Ω-norm of the 4D plane residual at the final estimate.
    pub residual_norm: f64,
    pub robust_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationReport {
    /// Camera-from-LiDAR transform.
    #[serde(with = "geom::serde_pose")]
    pub extrinsic: Pose,
    pub per_measurement: Vec<MeasurementResidual>,
    /// Robust objective after the initial guess and after each accepted step.
    pub chi2_trace: Vec<f64>,
    /// Eigenvalues of the final normal matrix, ascending.
    pub hessian_spectrum: [f64; 6],
    pub converged: bool,
    pub condition_warning: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialGuess {
    pub pose: Pose,
    /// Set when the normals do not pin the rotation or translation.
    pub condition_warning: bool,
}

/// Relative threshold below which a direction counts as unobserved during
/// initialization.
const INIT_RANK_TOL: f64 = 1e-8;

/// Closed-form starting point: rotation by orthogonal Procrustes on the
/// normals, translation by linear least squares on the plane offsets.
pub fn initial_guess(measurements: &[MeasurementPair]) -> Result<InitialGuess, SolverError> {
    if measurements.len() < 3 {
        return Err(SolverError::InsufficientMeasurements {
            got: measurements.len(),
        });
    }
    let ordered: Vec<&MeasurementPair> = canonical_order(measurements)
        .into_iter()
        .map(|i| &measurements[i])
        .collect();
    let spread = ordered.iter().fold(Matrix3::zeros(), |acc, m| {
        let n = m.lidar_plane.normal();
        acc + n * n.transpose()
    });
    let mut spread_eig: Vec<f64> = SymmetricEigen::new(spread).eigenvalues.iter().copied().collect();
    spread_eig.sort_by(f64::total_cmp);
    if spread_eig[1] <= INIT_RANK_TOL * spread_eig[2] {
        return Ok(InitialGuess {
            pose: Pose::identity(),
            condition_warning: true,
        });
    }

    let cross = ordered.iter().fold(Matrix3::zeros(), |acc, m| {
        acc + m.lidar_plane.normal() * m.camera_plane.normal().transpose()
    });
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (v * u.transpose()).determinant().signum();
    let rotation = nalgebra::Rotation3::from_matrix_unchecked(v * fix * u.transpose());

    // (R n_l)·t = d_l − d_c
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for m in &ordered {
        let a = rotation * m.lidar_plane.normal();
        ata += a * a.transpose();
        atb += a * (m.lidar_plane.dist() - m.camera_plane.dist());
    }
    let ata_svd = ata.svd(true, true);
    let smax = ata_svd.singular_values.max();
    let rank_deficient = ata_svd.singular_values.min() <= INIT_RANK_TOL * smax;
    let translation = ata_svd
        .solve(&atb, INIT_RANK_TOL * smax)
        .unwrap_or_else(|_| Vector3::zeros());
    Ok(InitialGuess {
        pose: Pose::from_parts(nalgebra::Translation3::from(translation), rotation),
        condition_warning: rank_deficient,
    })
}

/// Per-measurement linearization at a pose.
struct Linearization {
    error: Vector4<f64>,
    jacobian: SMatrix<f64, 4, 6>,
    norm: f64,
}

fn linearize(pose: &Pose, m: &MeasurementPair, omega: &Matrix4<f64>) -> Linearization {
    let moved = transform_plane(pose, &m.lidar_plane);
    let error = plane_error(&moved, &m.camera_plane).to_vector();
    let mut d_plane = transform_jacobian(pose, &m.lidar_plane);
    // Canonicalization may have flipped the transformed plane.
    let raw_normal = pose.rotation * m.lidar_plane.normal();
    if raw_normal.dot(moved.normal()) < 0.0 {
        d_plane = -d_plane;
    }
    let jacobian = plane_error_jacobian(&moved, &m.camera_plane) * d_plane;
    let norm = (error.transpose() * omega * error)[(0, 0)].max(0.0).sqrt();
    Linearization {
        error,
        jacobian,
        norm,
    }
}

fn canonical_order(measurements: &[MeasurementPair]) -> Vec<usize> {
    fn key(p: &Plane) -> [f64; 4] {
        let c = p.coefficients();
        [c[0], c[1], c[2], c[3]]
    }
    let mut order: Vec<usize> = (0..measurements.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (&measurements[a], &measurements[b]);
        key(&ma.lidar_plane)
            .iter()
            .chain(key(&ma.camera_plane).iter())
            .zip(key(&mb.lidar_plane).iter().chain(key(&mb.camera_plane).iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then_with(|| ma.id.cmp(&mb.id))
    });
    order
}

struct System {
    hessian: Matrix6<f64>,
    gradient: Vector6<f64>,
    cost: f64,
}

/// Accumulates the weighted normal equations in the given (fixed) order.
/// `robust = false` uses unit weights.
fn build_system(
    pose: &Pose,
    measurements: &[MeasurementPair],
    order: &[usize],
    cfg: &SolverConfig,
    robust: bool,
) -> System {
    let omega = cfg.omega();
    let mut sys = System {
        hessian: Matrix6::zeros(),
        gradient: Vector6::zeros(),
        cost: 0.0,
    };
    for &i in order {
        let lin = linearize(pose, &measurements[i], &omega);
        let w = if robust { cfg.huber_weight(lin.norm) } else { 1.0 };
        let jt_omega = lin.jacobian.transpose() * omega;
        sys.hessian += (jt_omega * lin.jacobian) * w;
        sys.gradient += (jt_omega * lin.error) * w;
        sys.cost += cfg.huber_cost(lin.norm);
    }
    sys
}

fn robust_cost(pose: &Pose, measurements: &[MeasurementPair], order: &[usize], cfg: &SolverConfig) -> f64 {
    let omega = cfg.omega();
    order
        .iter()
        .map(|&i| cfg.huber_cost(linearize(pose, &measurements[i], &omega).norm))
        .sum()
}

fn sorted_spectrum(h: &Matrix6<f64>) -> [f64; 6] {
    let eig = SymmetricEigen::new(*h);
    let mut ev: [f64; 6] = std::array::from_fn(|i| eig.eigenvalues[i]);
    ev.sort_by(f64::total_cmp);
    ev
}

fn spectrum_ratio(spectrum: &[f64; 6]) -> f64 {
    if spectrum[5] > 0.0 {
        spectrum[0] / spectrum[5]
    } else {
        0.0
    }
}

fn residual_table(
    pose: &Pose,
    measurements: &[MeasurementPair],
    cfg: &SolverConfig,
) -> Vec<MeasurementResidual> {
    let omega = cfg.omega();
    measurements
        .iter()
        .map(|m| {
            let norm = linearize(pose, m, &omega).norm;
            MeasurementResidual {
                id: m.id.clone(),
                residual_norm: norm,
                robust_weight: cfg.huber_weight(norm),
            }
        })
        .collect()
}

const LAMBDA_INIT: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e12;

/// Robust Gauss-Newton calibration.
///
/// Starts from `guess` or from [`initial_guess`]. Measurements are processed
/// in a canonical order so the result does not depend on input order.
pub fn calibrate(
    measurements: &[MeasurementPair],
    cfg: &SolverConfig,
    guess: Option<Pose>,
) -> Result<CalibrationReport, SolverError> {
    cfg.validate()?;
    if measurements.len() < 3 {
        return Err(SolverError::InsufficientMeasurements {
            got: measurements.len(),
        });
    }
    let order = canonical_order(measurements);
    let (mut pose, init_warning) = match guess {
        Some(g) => (g, false),
        None => {
            let g = initial_guess(measurements)?;
            (g.pose, g.condition_warning)
        }
    };

    let mut chi2_trace = vec![robust_cost(&pose, measurements, &order, cfg)];
    let mut lambda = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut condition_warning = init_warning;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let sys = build_system(&pose, measurements, &order, cfg, true);
        let spectrum = sorted_spectrum(&sys.hessian);
        let ratio = spectrum_ratio(&spectrum);
        if ratio < cfg.conditioning_threshold {
            condition_warning = true;
            return Err(SolverError::SingularNormalMatrix {
                ratio,
                report: Box::new(CalibrationReport {
                    extrinsic: pose,
                    per_measurement: residual_table(&pose, measurements, cfg),
                    chi2_trace,
                    hessian_spectrum: spectrum,
                    converged: false,
                    condition_warning,
                    iterations,
                }),
            });
        }
        let current = *chi2_trace.last().expect("seeded with the initial cost");

        let mut damped = sys.hessian;
        for k in 0..6 {
            damped[(k, k)] *= 1.0 + lambda;
        }
        let step = match damped.cholesky() {
            Some(c) => c.solve(&(-sys.gradient)),
            None => {
                lambda = (lambda * 10.0).max(LAMBDA_INIT);
                if lambda > LAMBDA_MAX {
                    break;
                }
                continue;
            }
        };
        let step_norm = step.norm();
        let candidate = boxplus(&pose, &Twist::from_vector(&step));
        let cost = robust_cost(&candidate, measurements, &order, cfg);
        if cost <= current {
            pose = candidate;
            chi2_trace.push(cost);
            lambda = if lambda > LAMBDA_INIT { lambda / 10.0 } else { 0.0 };
            if step_norm < cfg.update_tolerance {
                converged = true;
                break;
            }
        } else {
            if step_norm < cfg.update_tolerance {
                // at the numerical floor of the objective
                converged = true;
                break;
            }
            lambda = (lambda * 10.0).max(LAMBDA_INIT);
            if lambda > LAMBDA_MAX {
                break;
            }
        }
    }

    let final_sys = build_system(&pose, measurements, &order, cfg, true);
    let hessian_spectrum = sorted_spectrum(&final_sys.hessian);
    if spectrum_ratio(&hessian_spectrum) < cfg.conditioning_threshold {
        condition_warning = true;
    }
    Ok(CalibrationReport {
        extrinsic: pose,
        per_measurement: residual_table(&pose, measurements, cfg),
        chi2_trace,
        hessian_spectrum,
        converged,
        condition_warning,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningDiagnosis {
    /// Eigenvalues of the unweighted normal matrix, ascending.
    pub eigenvalues: [f64; 6],
    pub ratio: f64,
    /// Number of eigenvalues above `threshold × λ_max`.
    pub rank: usize,
    pub warning: bool,
}

/// Rank analysis of the Gauss-Newton normal matrix at the initial guess
/// (identity when fewer than three measurements are available).
pub fn conditioning_check(
    measurements: &[MeasurementPair],
    cfg: &SolverConfig,
) -> ConditioningDiagnosis {
    let pose = if measurements.len() >= 3 {
        initial_guess(measurements).map_or(Pose::identity(), |g| g.pose)
    } else {
        Pose::identity()
    };
    let order = canonical_order(measurements);
    let sys = build_system(&pose, measurements, &order, cfg, false);
    let eigenvalues = sorted_spectrum(&sys.hessian);
    let ratio = spectrum_ratio(&eigenvalues);
    let rank = eigenvalues
        .iter()
        .filter(|&&e| e > cfg.conditioning_threshold * eigenvalues[5] && e > 0.0)
        .count();
    ConditioningDiagnosis {
        eigenvalues,
        ratio,
        rank,
        warning: ratio < cfg.conditioning_threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Meters.
    pub e_t: f64,
    /// Radians.
    pub e_r: f64,
}

/// Translation norm and rotation angle of `ground_truth⁻¹ ∘ estimate`.
pub fn evaluate_error(estimate: &Pose, ground_truth: &Pose) -> PoseError {
    let delta = ground_truth.inverse() * estimate;
    PoseError {
        e_t: delta.translation.vector.norm(),
        e_r: geom::rotation_angle(&delta.rotation),
    }
}
