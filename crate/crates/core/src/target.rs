//! Per-sensor plane extraction for one target placement.
//!
//! LiDAR side: a circular patch is cut out of the range image around an
//! operator-chosen seed and a plane is fitted with RANSAC. Camera side: the
//! board pose is estimated from its detected corners and the board plane
//! `z = 0` is mapped into the camera frame.

use nalgebra::{
    DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6,
};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, boxplus, canonicalize, skew, Plane, Pose, Twist};
use crate::projection::{
    undistort_pixel, CameraIntrinsics, PointCloud, ProjectionError, RangeImage,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("invalid board: {0}")]
    InvalidBoard(String),
    #[error("expected {expected} corners for the board, got {got}")]
    CornerCount { expected: usize, got: usize },
    #[error("invalid patch selection: {0}")]
    InvalidSelection(String),
    #[error("no valid points inside the patch")]
    EmptyPatch,
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 3 points, got {got}")]
    InsufficientPoints { got: usize },
    #[error("no plane consensus (best inlier ratio {best_ratio:.3}, required {required:.3})")]
    NoConsensus { best_ratio: f64, required: f64 },
    #[error("homography is degenerate (corners nearly collinear)")]
    HomographyDegenerate,
    #[error("board pose refinement diverged: {0}")]
    Divergence(&'static str),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// Checkerboard with `rows × cols` interior corners spaced `square_size` apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    pub square_size: f64,
}

impl BoardSpec {
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.rows < 2 || self.cols < 2 {
            return Err(TargetError::InvalidBoard(
                "at least 2×2 interior corners required".into(),
            ));
        }
        if !(self.square_size > 0.0 && self.square_size.is_finite()) {
            return Err(TargetError::InvalidBoard("square size must be positive".into()));
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Interior corners in the board frame, row-major, on `z = 0`.
    pub fn corner_model(&self) -> Vec<Vector3<f64>> {
        (0..self.rows)
            .flat_map(|r| {
                (0..self.cols).map(move |c| {
                    Vector3::new(c as f64 * self.square_size, r as f64 * self.square_size, 0.0)
                })
            })
            .collect()
    }

    /// Physical board extent in the board frame, one square beyond the
    /// outermost interior corners: `(x_min, x_max, y_min, y_max)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let s = self.square_size;
        (-s, self.cols as f64 * s, -s, self.rows as f64 * s)
    }

    /// Board-frame center of the physical board.
    pub fn center(&self) -> Vector3<f64> {
        let (x0, x1, y0, y1) = self.extent();
        Vector3::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.0)
    }

    /// Outline corners of the physical board in the board frame.
    pub fn outline(&self) -> [Vector3<f64>; 4] {
        let (x0, x1, y0, y1) = self.extent();
        [
            Vector3::new(x0, y0, 0.0),
            Vector3::new(x1, y0, 0.0),
            Vector3::new(x1, y1, 0.0),
            Vector3::new(x0, y1, 0.0),
        ]
    }

    /// Whether a board-frame point on `z = 0` lies on the physical board.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (x0, x1, y0, y1) = self.extent();
        (x0..=x1).contains(&p.x) && (y0..=y1).contains(&p.y)
    }
}

/// Detected corner pixels, row-major in the order of [`BoardSpec::corner_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerSet {
    pub corners: Vec<Vector2<f64>>,
    pub board: BoardSpec,
}

impl CornerSet {
    pub fn new(corners: Vec<Vector2<f64>>, board: BoardSpec) -> Result<Self, TargetError> {
        let set = Self { corners, board };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        self.board.validate()?;
        if self.corners.len() != self.board.corner_count() {
            return Err(TargetError::CornerCount {
                expected: self.board.corner_count(),
                got: self.corners.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSelection {
    pub ring: usize,
    pub column: usize,
    /// Disc radius in pixels.
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Point-to-plane distance in meters.
    pub inlier_threshold: f64,
    pub min_inlier_ratio: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold: 0.02,
            min_inlier_ratio: 0.6,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.max_iterations < 1 {
            return Err(TargetError::InvalidConfig("max_iterations must be ≥ 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(TargetError::InvalidConfig("inlier_threshold must be > 0".into()));
        }
        if !(self.min_inlier_ratio > 0.0 && self.min_inlier_ratio <= 1.0) {
            return Err(TargetError::InvalidConfig(
                "min_inlier_ratio must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensor {
    Lidar,
    Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneObservation {
    pub plane: Plane,
    pub inlier_count: usize,
    pub rms_residual: f64,
    pub source: Sensor,
}

/// Points of a patch together with the pixel each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub points: Vec<Vector3<f64>>,
    /// `(ring, column)` per point.
    pub pixels: Vec<(usize, usize)>,
}

pub fn collect_patch(
    image: &RangeImage,
    cloud: &PointCloud,
    sel: &PatchSelection,
) -> Result<Patch, TargetError> {
    if !(sel.radius >= 1.0 && sel.radius.is_finite()) {
        return Err(TargetError::InvalidSelection("radius must be finite and ≥ 1".into()));
    }
    if sel.ring >= image.n_rings() || sel.column >= image.width() {
        return Err(TargetError::InvalidSelection(format!(
            "seed ({}, {}) outside the {}x{} image",
            sel.ring,
            sel.column,
            image.n_rings(),
            image.width()
        )));
    }
    let width = image.width() as i64;
    let reach = (sel.radius.floor() as i64).min(image.n_rings().max(image.width()) as i64);
    let r2 = sel.radius * sel.radius;
    let mut patch = Patch {
        points: Vec::new(),
        pixels: Vec::new(),
    };
    let ring_lo = (sel.ring as i64 - reach).max(0);
    let ring_hi = (sel.ring as i64 + reach).min(image.n_rings() as i64 - 1);
    for ring in ring_lo..=ring_hi {
        let dr = (ring - sel.ring as i64) as f64;
        let mut seen = std::collections::BTreeSet::new();
        for dc in -reach..=reach {
            if dr * dr + (dc * dc) as f64 > r2 {
                continue;
            }
            let column = (sel.column as i64 + dc).rem_euclid(width);
            // a radius wider than half the image would visit columns twice
            if !seen.insert(column) {
                continue;
            }
            if let Some(px) = image.get(ring, column)? {
                let point = cloud
                    .points
                    .get(px.point_index)
                    .ok_or(ProjectionError::DanglingIndex {
                        index: px.point_index,
                        len: cloud.len(),
                    })?;
                patch.points.push(point.position);
                patch.pixels.push((ring as usize, column as usize));
            }
        }
    }
    if patch.points.is_empty() {
        return Err(TargetError::EmptyPatch);
    }
    Ok(patch)
}

/// LiDAR plane extracted around a seed pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarExtraction {
    pub fit: PlaneFit,
    pub patch: Patch,
}

impl LidarExtraction {
    /// `(ring, column)` of every inlier.
    pub fn inlier_pixels(&self) -> Vec<(usize, usize)> {
        self.fit.inliers.iter().map(|&i| self.patch.pixels[i]).collect()
    }
}

/// Patch collection followed by RANSAC.
pub fn extract_lidar_plane(
    image: &RangeImage,
    cloud: &PointCloud,
    sel: &PatchSelection,
    cfg: &RansacConfig,
) -> Result<LidarExtraction, TargetError> {
    let patch = collect_patch(image, cloud, sel)?;
    let fit = ransac_plane(&patch.points, cfg)?;
    Ok(LidarExtraction { fit, patch })
}

/// Result of [`ransac_plane`]; `inliers` index the input slice, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub observation: PlaneObservation,
    pub inliers: Vec<usize>,
}

/// Total-least-squares plane through a point set (centroid + smallest
/// eigenvector of the scatter matrix). `None` for fewer than three points.
pub fn fit_plane_lsq<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Plane> {
    let pts: Vec<&Vector3<f64>> = points.into_iter().collect();
    if pts.len() < 3 {
        return None;
    }
    let centroid = pts.iter().fold(Vector3::zeros(), |acc, p| acc + *p) / pts.len() as f64;
    let scatter = pts.iter().fold(Matrix3::zeros(), |acc, p| {
        let q = *p - centroid;
        acc + q * q.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    canonicalize(normal, -normal.dot(&centroid)).ok()
}

/// Robust plane fit. Deterministic for a given `rng_seed` and independent of
/// the input order: hypotheses are drawn over a canonically sorted copy.
pub fn ransac_plane(points: &[Vector3<f64>], cfg: &RansacConfig) -> Result<PlaneFit, TargetError> {
    cfg.validate()?;
    let n = points.len();
    if n < 3 {
        return Err(TargetError::InsufficientPoints { got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.x.total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.z.total_cmp(&q.z))
            .then(a.cmp(&b))
    });
    let sorted: Vec<Vector3<f64>> = order.iter().map(|&i| points[i]).collect();

    let consensus = |plane: &Plane| -> Vec<usize> {
        (0..n)
            .filter(|&i| plane.signed_distance(&sorted[i]).abs() < cfg.inlier_threshold)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..cfg.max_iterations {
        let sample = index::sample(&mut rng, n, 3);
        let (a, b, c) = (sample.index(0), sample.index(1), sample.index(2));
        let Some(hypothesis) = geom::plane_from_points(&sorted[a], &sorted[b], &sorted[c]) else {
            continue;
        };
        let inliers = consensus(&hypothesis);
        if inliers.len() > best.len() {
            best = inliers;
            if best.len() == n {
                break;
            }
        }
    }

    let required = cfg.min_inlier_ratio;
    let ratio = best.len() as f64 / n as f64;
    if best.len() < 3 || ratio < required {
        return Err(TargetError::NoConsensus {
            best_ratio: ratio,
            required,
        });
    }

    // Refit on the consensus set, then re-score once against the refined plane.
    let mut plane = fit_plane_lsq(best.iter().map(|&i| &sorted[i])).ok_or(
        TargetError::NoConsensus {
            best_ratio: ratio,
            required,
        },
    )?;
    let rescored = consensus(&plane);
    if rescored.len() >= 3 && rescored != best {
        if let Some(refined) = fit_plane_lsq(rescored.iter().map(|&i| &sorted[i])) {
            plane = refined;
            best = rescored;
        }
    }
    if (best.len() as f64 / n as f64) < required {
        return Err(TargetError::NoConsensus {
            best_ratio: best.len() as f64 / n as f64,
            required,
        });
    }

    let sq: f64 = best
        .iter()
        .map(|&i| plane.signed_distance(&sorted[i]).powi(2))
        .sum();
    let rms_residual = (sq / best.len() as f64).sqrt();
    let mut inliers: Vec<usize> = best.iter().map(|&i| order[i]).collect();
    inliers.sort_unstable();
    Ok(PlaneFit {
        observation: PlaneObservation {
            plane,
            inlier_count: inliers.len(),
            rms_residual,
            source: Sensor::Lidar,
        },
        inliers,
    })
}

/// Camera-from-board pose with its fit quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardPoseFit {
    pub pose: Pose,
    /// RMS reprojection error in normalized image coordinates.
    pub reprojection_rms: f64,
    pub iterations: usize,
}

const POSE_MAX_ITERATIONS: usize = 50;
const POSE_UPDATE_TOLERANCE: f64 = 1e-10;

/// Estimates the camera-from-board pose from detected corners.
///
/// Corners are undistorted first; the pose is initialized from the
/// board-to-image homography and refined by Gauss-Newton on the reprojection
/// error in normalized coordinates.
pub fn board_pose(
    corners: &CornerSet,
    intr: &CameraIntrinsics,
) -> Result<BoardPoseFit, TargetError> {
    corners.validate()?;
    intr.validate()?;
    let observed = corners
        .corners
        .iter()
        .map(|px| undistort_pixel(intr, px))
        .collect::<Result<Vec<_>, _>>()?;
    let model = corners.board.corner_model();
    if !spans_plane(&observed) {
        return Err(TargetError::HomographyDegenerate);
    }

    let h = estimate_homography(&model, &observed)?;
    let init = decompose_homography(&h)?;
    refine_pose(init, &model, &observed)
}

/// Whether 2D points are spread in two directions (not nearly collinear).
fn spans_plane(points: &[Vector2<f64>]) -> bool {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let scatter = points.iter().fold(nalgebra::Matrix2::zeros(), |acc, p| {
        let q = p - centroid;
        acc + q * q.transpose()
    });
    let eig = SymmetricEigen::new(scatter).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    hi > 0.0 && lo > 1e-6 * hi
}

fn estimate_homography(
    model: &[Vector3<f64>],
    observed: &[Vector2<f64>],
) -> Result<Matrix3<f64>, TargetError> {
    let (t_src, src) = normalize_points(model.iter().map(|p| Vector2::new(p.x, p.y)));
    let (t_dst, dst) = normalize_points(observed.iter().copied());
    let n = src.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(2 * i, k)] = r0[k];
            a[(2 * i + 1, k)] = r1[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(TargetError::HomographyDegenerate)?;
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| a.1.total_cmp(&b.1));
    // Rank must be exactly 8: a second vanishing singular value means the
    // correspondences do not pin a unique homography.
    let largest = sv.last().map_or(0.0, |s| s.1);
    if sv.len() < 9 || largest <= 0.0 || sv[1].1 <= 1e-9 * largest {
        return Err(TargetError::HomographyDegenerate);
    }
    let row = v_t.row(sv[0].0);
    let hn = Matrix3::new(
        row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8],
    );
    let inv_dst = t_dst.try_inverse().ok_or(TargetError::HomographyDegenerate)?;
    Ok(inv_dst * hn * t_src)
}

/// Hartley normalization: zero centroid, mean distance √2.
fn normalize_points(
    points: impl Iterator<Item = Vector2<f64>>,
) -> (Matrix3<f64>, Vec<Vector2<f64>>) {
    let pts: Vec<Vector2<f64>> = points.collect();
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let scale = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(
        scale,
        0.0,
        -scale * centroid.x,
        0.0,
        scale,
        -scale * centroid.y,
        0.0,
        0.0,
        1.0,
    );
    let out = pts.iter().map(|p| (p - centroid) * scale).collect();
    (t, out)
}

fn decompose_homography(h: &Matrix3<f64>) -> Result<Pose, TargetError> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let norm = 0.5 * (h1.norm() + h2.norm());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(TargetError::HomographyDegenerate);
    }
    let mut lambda = 1.0 / norm;
    if h3.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 * lambda;
    let r2 = h2 * lambda;
    let t = h3 * lambda;
    let approx = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let svd = approx.svd(true, true);
    let (u, v_t) = (
        svd.u.ok_or(TargetError::HomographyDegenerate)?,
        svd.v_t.ok_or(TargetError::HomographyDegenerate)?,
    );
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    Ok(Pose::from_parts(
        nalgebra::Translation3::from(t),
        nalgebra::Rotation3::from_matrix_unchecked(r),
    ))
}

fn reprojection_cost(pose: &Pose, model: &[Vector3<f64>], observed: &[Vector2<f64>]) -> f64 {
    model
        .iter()
        .zip(observed)
        .map(|(x, m)| {
            let p = pose * nalgebra::Point3::from(*x);
            if p.z <= 0.0 {
                return f64::INFINITY;
            }
            (Vector2::new(p.x / p.z, p.y / p.z) - m).norm_squared()
        })
        .sum()
}

fn refine_pose(
    mut pose: Pose,
    model: &[Vector3<f64>],
    observed: &[Vector2<f64>],
) -> Result<BoardPoseFit, TargetError> {
    let mut cost = reprojection_cost(&pose, model, observed);
    if !cost.is_finite() {
        return Err(TargetError::Divergence("initial pose places the board behind the camera"));
    }
    let mut iterations = 0;
    while iterations < POSE_MAX_ITERATIONS {
        iterations += 1;
        let mut hessian = Matrix6::<f64>::zeros();
        let mut gradient = Vector6::<f64>::zeros();
        for (x, m) in model.iter().zip(observed) {
            let p = (pose * nalgebra::Point3::from(*x)).coords;
            let iz = 1.0 / p.z;
            let r = Vector2::new(p.x * iz, p.y * iz) - m;
            let dproj = nalgebra::Matrix2x3::new(
                iz,
                0.0,
                -p.x * iz * iz,
                0.0,
                iz,
                -p.y * iz * iz,
            );
            let mut dp = nalgebra::Matrix3x6::<f64>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p)));
            let j = dproj * dp;
            hessian += j.transpose() * j;
            gradient += j.transpose() * r;
        }
        let step = hessian
            .cholesky()
            .map(|c| c.solve(&(-gradient)))
            .ok_or(TargetError::Divergence("singular normal equations"))?;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(TargetError::Divergence("non-finite update"));
        }
        // Backtrack if the full step overshoots.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let candidate = boxplus(&pose, &Twist::from_vector(&(step * scale)));
            let c = reprojection_cost(&candidate, model, observed);
            if c <= cost {
                accepted = Some((candidate, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, next_cost)) = accepted else {
            // no descent left at this precision
            break;
        };
        pose = next;
        cost = next_cost;
        if step.norm() * scale < POSE_UPDATE_TOLERANCE {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(TargetError::Divergence("board left the camera frustum"));
    }
    let in_front = model
        .iter()
        .all(|x| (pose * nalgebra::Point3::from(*x)).z > 0.0);
    if !in_front {
        return Err(TargetError::Divergence("board behind the camera"));
    }
    Ok(BoardPoseFit {
        pose,
        reprojection_rms: (cost / model.len() as f64).sqrt(),
        iterations,
    })
}

/// Board plane `z = 0` expressed in the camera frame.
///
/// The residual is the reprojection RMS scaled by the mean corner depth, a
/// rough metric figure kept for diagnostics only.
pub fn camera_plane(fit: &BoardPoseFit, board: &BoardSpec) -> PlaneObservation {
    let board_plane = Plane::new(Vector3::z(), 0.0).expect("unit normal");
    let plane = geom::transform_plane(&fit.pose, &board_plane);
    let model = board.corner_model();
    let mean_depth = model
        .iter()
        .map(|x| (fit.pose * nalgebra::Point3::from(*x)).z)
        .sum::<f64>()
        / model.len() as f64;
    PlaneObservation {
        plane,
        inlier_count: model.len(),
        rms_residual: fit.reprojection_rms * mean_depth,
        source: Sensor::Camera,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project_by_id, LidarPoint, LidarProjectionParams};
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Translation3};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn board() -> BoardSpec {
        BoardSpec {
            rows: 6,
            cols: 8,
            square_size: 0.2,
        }
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(900.0, 900.0, 720.0, 540.0, 1440, 1080)
    }

    fn project_corners(pose: &Pose, b: &BoardSpec, k: &CameraIntrinsics) -> CornerSet {
        let corners = b
            .corner_model()
            .iter()
            .map(|x| k.project(&(pose * nalgebra::Point3::from(*x)).coords).unwrap())
            .collect();
        CornerSet::new(corners, *b).unwrap()
    }

    /// Full scan of a sphere of radius 10 m around the sensor.
    fn cylinder_scan(params: &LidarProjectionParams) -> PointCloud {
        let mut pts = Vec::new();
        for ring in 0..params.n_rings {
            for c in 0..params.width {
                let az = params.azimuth(c);
                let el = -0.2 + 0.4 * ring as f64 / (params.n_rings - 1) as f64;
                let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                pts.push(LidarPoint::new(dir * 10.0, ring as u32, 0.0));
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn board_model_layout() {
        let b = board();
        let m = b.corner_model();
        assert_eq!(m.len(), 48);
        assert_eq!(m[1], Vector3::new(0.2, 0.0, 0.0));
        assert_eq!(m[8], Vector3::new(0.0, 0.2, 0.0));
        assert!(m.iter().all(|p| p.z == 0.0));
        assert!(BoardSpec { rows: 1, ..b }.validate().is_err());
        assert!(BoardSpec { square_size: 0.0, ..b }.validate().is_err());
    }

    #[test]
    fn patch_disc_count_matches_brute_force() {
        let params = LidarProjectionParams::full_scan(128, 16);
        let cloud = cylinder_scan(&params);
        let img = project_by_id(&cloud, &params).unwrap();
        let sel = PatchSelection {
            ring: 8,
            column: 60,
            radius: 5.0,
        };
        let patch = collect_patch(&img, &cloud, &sel).unwrap();
        let mut brute = 0;
        for r in 0..16i64 {
            for c in 0..128i64 {
                let (dr, dc) = (r - 8, c - 60);
                if dr * dr + dc * dc <= 25 {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 81);
        assert_eq!(patch.points.len(), 81);
    }

    #[test]
    fn patch_skips_empty_pixels() {
        let params = LidarProjectionParams::full_scan(128, 16);
        let mut cloud = cylinder_scan(&params);
        // drop every point of ring 8
        cloud.points.retain(|p| p.ring != Some(8));
        let img = project_by_id(&cloud, &params).unwrap();
        let sel = PatchSelection {
            ring: 8,
            column: 60,
            radius: 5.0,
        };
        let patch = collect_patch(&img, &cloud, &sel).unwrap();
        assert_eq!(patch.points.len(), 81 - 11);
    }

    #[test]
    fn patch_wraps_across_seam() {
        let params = LidarProjectionParams::full_scan(128, 16);
        let cloud = cylinder_scan(&params);
        let img = project_by_id(&cloud, &params).unwrap();
        let sel = PatchSelection {
            ring: 8,
            column: 1,
            radius: 3.0,
        };
        let patch = collect_patch(&img, &cloud, &sel).unwrap();
        let cols: Vec<usize> = patch.pixels.iter().map(|p| p.1).collect();
        assert!(cols.contains(&0) && cols.contains(&127) && cols.contains(&126));
        assert!(cols.contains(&4));
        assert_eq!(patch.points.len(), 29);
    }

    #[test]
    fn patch_over_empty_region_fails() {
        let params = LidarProjectionParams::full_scan(128, 16);
        let cloud = PointCloud::new(vec![LidarPoint::new(Vector3::new(1.0, 0.0, 0.0), 0, 0.0)]);
        let img = project_by_id(&cloud, &params).unwrap();
        let sel = PatchSelection {
            ring: 10,
            column: 10,
            radius: 2.0,
        };
        assert_eq!(collect_patch(&img, &cloud, &sel), Err(TargetError::EmptyPatch));
        let bad = PatchSelection {
            ring: 16,
            column: 0,
            radius: 2.0,
        };
        assert!(matches!(
            collect_patch(&img, &cloud, &bad),
            Err(TargetError::InvalidSelection(_))
        ));
    }

    #[test]
    fn huge_radius_covers_the_image_once() {
        let params = LidarProjectionParams::full_scan(128, 16);
        let cloud = cylinder_scan(&params);
        let img = project_by_id(&cloud, &params).unwrap();
        let sel = PatchSelection {
            ring: 3,
            column: 100,
            radius: 1e12,
        };
        let patch = collect_patch(&img, &cloud, &sel).unwrap();
        assert_eq!(patch.points.len(), img.populated_count());
        let inf = PatchSelection {
            radius: f64::INFINITY,
            ..sel
        };
        assert!(matches!(collect_patch(&img, &cloud, &inf), Err(TargetError::InvalidSelection(_))));
    }

    fn plane_points(
        rng: &mut ChaCha8Rng,
        plane: &Plane,
        n: usize,
        sigma: f64,
    ) -> Vec<Vector3<f64>> {
        let nrm = *plane.normal();
        let e1 = nrm.cross(&Vector3::x()).normalize();
        let e2 = nrm.cross(&e1);
        let origin = plane.closest_point();
        let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
        (0..n)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let eps = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                origin + e1 * u + e2 * v + nrm * eps
            })
            .collect()
    }

    #[test]
    fn ransac_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = Plane::new(Vector3::new(0.3, 0.1, 1.0), -3.0).unwrap();
        let pts = plane_points(&mut rng, &truth, 100, 0.0);
        for seed in [0, 1, 99] {
            let fit = ransac_plane(&pts, &RansacConfig { rng_seed: seed, ..Default::default() }).unwrap();
            assert_eq!(fit.observation.inlier_count, 100);
            assert!(fit.observation.rms_residual < 1e-12);
            assert_abs_diff_eq!(*fit.observation.plane.normal(), *truth.normal(), epsilon = 1e-12);
            assert_abs_diff_eq!(fit.observation.plane.dist(), truth.dist(), epsilon = 1e-12);
        }
    }

    #[test]
    fn ransac_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = Plane::new(Vector3::new(-0.2, 0.5, 1.0), -4.0).unwrap();
        let mut pts = plane_points(&mut rng, &truth, 80, 0.008);
        let origin = truth.closest_point();
        for _ in 0..20 {
            pts.push(origin + Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        let cfg = RansacConfig {
            inlier_threshold: 0.03,
            ..Default::default()
        };
        let fit = ransac_plane(&pts, &cfg).unwrap();
        let angle = geom::angle_between(fit.observation.plane.normal(), truth.normal());
        assert!(angle < 1f64.to_radians(), "angle {angle}");
        assert!(fit.observation.inlier_count >= 75);
    }

    #[test]
    fn ransac_degenerate_inputs() {
        let line: Vec<Vector3<f64>> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        assert!(matches!(
            ransac_plane(&line, &RansacConfig::default()),
            Err(TargetError::NoConsensus { .. })
        ));
        assert_eq!(
            ransac_plane(&line[..2], &RansacConfig::default()),
            Err(TargetError::InsufficientPoints { got: 2 })
        );
        let bad = RansacConfig {
            min_inlier_ratio: 0.0,
            ..Default::default()
        };
        assert!(matches!(ransac_plane(&line, &bad), Err(TargetError::InvalidConfig(_))));
    }

    #[test]
    fn ransac_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = Plane::new(Vector3::new(0.0, 1.0, 1.0), -2.0).unwrap();
        let mut pts = plane_points(&mut rng, &truth, 60, 0.01);
        for _ in 0..15 {
            pts.push(Vector3::new(rng.random(), rng.random(), rng.random()));
        }
        let cfg = RansacConfig::default();
        let a = ransac_plane(&pts, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.reverse();
        perm.rotate_left(17);
        let shuffled: Vec<Vector3<f64>> = perm.iter().map(|&i| pts[i]).collect();
        let b = ransac_plane(&shuffled, &cfg).unwrap();
        assert_eq!(a.observation, b.observation);
        let mut mapped: Vec<usize> = b.inliers.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        assert_eq!(a.inliers, mapped);
    }

    #[test]
    fn board_pose_recovers_generating_pose() {
        let b = board();
        let k = intr();
        let pose = Pose::from_parts(
            Translation3::new(-0.6, -0.3, 3.5),
            Rotation3::from_euler_angles(0.3, -0.4, 0.2),
        );
        let fit = board_pose(&project_corners(&pose, &b, &k), &k).unwrap();
        let dt = (fit.pose.translation.vector - pose.translation.vector).norm();
        let dr = geom::rotation_angle(&(fit.pose.rotation * pose.rotation.inverse()));
        assert!(dt < 1e-6, "dt {dt}");
        assert!(dr < 1e-7, "dr {dr}");
        assert!(fit.reprojection_rms < 1e-9);
    }

    #[test]
    fn board_pose_with_distortion() {
        let b = board();
        let mut k = intr();
        k.distortion = [-0.12, 0.05, 0.001, -0.0005, 0.0];
        let pose = Pose::from_parts(
            Translation3::new(-0.5, -0.4, 4.0),
            Rotation3::from_euler_angles(-0.2, 0.3, 0.1),
        );
        let fit = board_pose(&project_corners(&pose, &b, &k), &k).unwrap();
        assert!((fit.pose.translation.vector - pose.translation.vector).norm() < 1e-6);
    }

    #[test]
    fn board_pose_frontoparallel() {
        let b = board();
        let k = intr();
        let center = b.center();
        let pose = Pose::from_parts(Translation3::from(Vector3::new(0.0, 0.0, 2.0) - center), Rotation3::identity());
        let fit = board_pose(&project_corners(&pose, &b, &k), &k).unwrap();
        let board_center = fit.pose * nalgebra::Point3::from(center);
        assert_abs_diff_eq!(board_center.coords, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-6);
        assert!(geom::rotation_angle(&fit.pose.rotation) < 1e-7);
    }

    #[test]
    fn board_pose_degenerate_corners() {
        let b = board();
        let corners = (0..48).map(|i| Vector2::new(100.0 + i as f64, 200.0 + 2.0 * i as f64)).collect();
        let set = CornerSet::new(corners, b).unwrap();
        assert_eq!(board_pose(&set, &intr()), Err(TargetError::HomographyDegenerate));
    }

    #[test]
    fn corner_count_checked() {
        let err = CornerSet::new(vec![Vector2::zeros(); 47], board()).unwrap_err();
        assert_eq!(err, TargetError::CornerCount { expected: 48, got: 47 });
    }

    #[test]
    fn camera_plane_examples() {
        let b = board();
        let fit = |pose| BoardPoseFit {
            pose,
            reprojection_rms: 0.0,
            iterations: 0,
        };
        let obs = camera_plane(&fit(Pose::identity()), &b);
        assert_eq!(*obs.plane.normal(), Vector3::z());
        assert_eq!(obs.plane.dist(), 0.0);

        let obs = camera_plane(&fit(Pose::translation(0.0, 0.0, 2.0)), &b);
        assert_eq!(*obs.plane.normal(), Vector3::z());
        assert_eq!(obs.plane.dist(), -2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pose = Pose::from_parts(
                Translation3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..6.0)),
                Rotation3::from_scaled_axis(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
            );
            let obs = camera_plane(&fit(pose), &b);
            for x in b.corner_model() {
                let p = (pose * nalgebra::Point3::from(x)).coords;
                assert!(obs.plane.signed_distance(&p).abs() < 1e-9);
            }
        }
    }
}
