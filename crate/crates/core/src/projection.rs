//! Image formation for both sensors.
//!
//! The camera side is a pinhole model with a 5-coefficient radial-tangential
//! distortion (`k1, k2, p1, p2, k3`). The LiDAR side embeds an ordered scan in a
//! dense `n_rings × width` image indexed by beam ring and azimuth bin
//! ("projection by ID"), keeping a back-pointer to the source point per pixel.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest depth accepted in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;
const UNDISTORT_MAX_ITERATIONS: usize = 20;
const UNDISTORT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("point is behind the camera (z = {z:e})")]
    BehindCamera { z: f64 },
    #[error("undistortion did not converge for pixel ({u}, {v})")]
    UndistortDiverged { u: f64, v: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid lidar projection parameters: {0}")]
    InvalidLidarParams(String),
    #[error("point {index} has ring {ring}, but the scan has {n_rings} rings")]
    RingOutOfRange {
        index: usize,
        ring: usize,
        n_rings: usize,
    },
    #[error("point {index} has non-finite coordinates")]
    NonFinitePoint { index: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("pixel (ring {ring}, column {column}) is outside the {n_rings}x{width} image")]
    PixelOutOfBounds {
        ring: i64,
        column: i64,
        n_rings: usize,
        width: usize,
    },
    #[error("pixel refers to point {index}, but the cloud has {len} points")]
    DanglingIndex { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// `[k1, k2, p1, p2, k3]`
    pub distortion: [f64; 5],
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            distortion: [0.0; 5],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.distortion.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(ProjectionError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(ProjectionError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(ProjectionError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        self.distortion.iter().any(|c| *c != 0.0)
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Normalized coordinates to pixels, no distortion.
    pub fn to_pixel(&self, normalized: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * normalized.x + self.cx,
            self.fy * normalized.y + self.cy,
        )
    }

    /// Applies the radial-tangential model to a normalized coordinate.
    pub fn distort(&self, normalized: &Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let (x, y) = (normalized.x, normalized.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        Vector2::new(
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    fn distort_jacobian(&self, normalized: &Vector2<f64>) -> Matrix2<f64> {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let (x, y) = (normalized.x, normalized.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let dradial_dr2 = k1 + r2 * (2.0 * k2 + 3.0 * r2 * k3);
        let dxx = radial + 2.0 * x * x * dradial_dr2 + 2.0 * p1 * y + 6.0 * p2 * x;
        let dxy = 2.0 * x * y * dradial_dr2 + 2.0 * p1 * x + 2.0 * p2 * y;
        let dyx = 2.0 * x * y * dradial_dr2 + 2.0 * p1 * x + 2.0 * p2 * y;
        let dyy = radial + 2.0 * y * y * dradial_dr2 + 6.0 * p1 * y + 2.0 * p2 * x;
        Matrix2::new(dxx, dxy, dyx, dyy)
    }

    /// Full forward model: camera-frame point to distorted pixel.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, ProjectionError> {
        if p.z <= MIN_DEPTH {
            return Err(ProjectionError::BehindCamera { z: p.z });
        }
        let normalized = Vector2::new(p.x / p.z, p.y / p.z);
        Ok(self.to_pixel(&self.distort(&normalized)))
    }
}

/// Pinhole projection `φ(K p)` of an already undistorted ray.
pub fn pinhole_project(
    intr: &CameraIntrinsics,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>, ProjectionError> {
    if p.z <= MIN_DEPTH {
        return Err(ProjectionError::BehindCamera { z: p.z });
    }
    Ok(Vector2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

/// Inverts the distortion model for a pixel, returning normalized coordinates.
///
/// Iterates the Newton map `x ← x − J⁻¹ (distort(x) − x_d)` starting from the
/// distorted coordinate.
pub fn undistort_pixel(
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
) -> Result<Vector2<f64>, ProjectionError> {
    let distorted = Vector2::new(
        (pixel.x - intr.cx) / intr.fx,
        (pixel.y - intr.cy) / intr.fy,
    );
    if !intr.has_distortion() {
        return Ok(distorted);
    }
    let diverged = || ProjectionError::UndistortDiverged {
        u: pixel.x,
        v: pixel.y,
    };
    let mut x = distorted;
    for _ in 0..UNDISTORT_MAX_ITERATIONS {
        let residual = intr.distort(&x) - distorted;
        if residual.norm() < UNDISTORT_TOLERANCE {
            return Ok(x);
        }
        let step = intr
            .distort_jacobian(&x)
            .try_inverse()
            .ok_or_else(diverged)?
            * residual;
        x -= step;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(diverged());
        }
    }
    if (intr.distort(&x) - distorted).norm() < UNDISTORT_TOLERANCE {
        Ok(x)
    } else {
        Err(diverged())
    }
}

/// Parameters of the projection-by-ID embedding: `u = fx·atan2(y, x) + cx`,
/// `v = ring`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarProjectionParams {
    /// Columns per radian, nominally `width / 2π`.
    pub azimuth_resolution: f64,
    /// Column of azimuth zero.
    pub azimuth_offset: f64,
    pub n_rings: usize,
    pub width: usize,
}

impl LidarProjectionParams {
    /// Full 360° scan with azimuth zero in the middle column.
    pub fn full_scan(width: usize, n_rings: usize) -> Self {
        Self {
            azimuth_resolution: width as f64 / (2.0 * PI),
            azimuth_offset: width as f64 / 2.0,
            n_rings,
            width,
        }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.n_rings < 1 || self.width < 1 {
            return Err(ProjectionError::InvalidLidarParams(
                "n_rings and width must be at least 1".into(),
            ));
        }
        if !self.azimuth_resolution.is_finite() || !self.azimuth_offset.is_finite() {
            return Err(ProjectionError::InvalidLidarParams("non-finite value".into()));
        }
        let expected = (2.0 * PI * self.azimuth_resolution).round();
        if (expected - self.width as f64).abs() > 1.0 {
            return Err(ProjectionError::InvalidLidarParams(format!(
                "width {} does not match azimuth resolution (expected {expected})",
                self.width
            )));
        }
        Ok(())
    }

    /// Column of an azimuth, rounded and wrapped into `[0, width)`.
    pub fn column(&self, azimuth: f64) -> usize {
        let u = (self.azimuth_resolution * azimuth + self.azimuth_offset).round() as i64;
        u.rem_euclid(self.width as i64) as usize
    }

    /// Azimuth at the center of a column (inverse of [`Self::column`]).
    pub fn azimuth(&self, column: usize) -> f64 {
        (column as f64 - self.azimuth_offset) / self.azimuth_resolution
    }
}

/// Bookkeeping for an ordered scan as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanLayout {
    pub width: usize,
    pub n_rings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: Vector3<f64>,
    pub ring: Option<u32>,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(position: Vector3<f64>, ring: u32, intensity: f64) -> Self {
        Self {
            position,
            ring: Some(ring),
            intensity,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub layout: Option<ScanLayout>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self {
            points,
            layout: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_rings(&self) -> bool {
        self.points.iter().all(|p| p.ring.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangePixel {
    pub point_index: usize,
    pub range: f64,
    pub intensity: f64,
}

/// Dense `n_rings × width` image of an ordered scan; row = ring.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    n_rings: usize,
    width: usize,
    pixels: Vec<Option<RangePixel>>,
}

impl RangeImage {
    pub fn n_rings(&self) -> usize {
        self.n_rings
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn offset(&self, ring: i64, column: i64) -> Result<usize, ProjectionError> {
        if ring < 0 || column < 0 || ring as usize >= self.n_rings || column as usize >= self.width
        {
            return Err(ProjectionError::PixelOutOfBounds {
                ring,
                column,
                n_rings: self.n_rings,
                width: self.width,
            });
        }
        Ok(ring as usize * self.width + column as usize)
    }

    pub fn get(&self, ring: i64, column: i64) -> Result<Option<&RangePixel>, ProjectionError> {
        Ok(self.pixels[self.offset(ring, column)?].as_ref())
    }

    /// Row-major iterator over `(ring, column, pixel)` of populated pixels.
    pub fn populated(&self) -> impl Iterator<Item = (usize, usize, &RangePixel)> + '_ {
        self.pixels.iter().enumerate().filter_map(|(i, p)| {
            p.as_ref().map(|p| (i / self.width, i % self.width, p))
        })
    }

    pub fn populated_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    /// Min and max range over populated pixels.
    pub fn range_bounds(&self) -> Option<(f64, f64)> {
        self.populated().fold(None, |acc, (_, _, p)| match acc {
            None => Some((p.range, p.range)),
            Some((lo, hi)) => Some((lo.min(p.range), hi.max(p.range))),
        })
    }

    /// Row-major intensities; empty pixels are NaN.
    pub fn intensity_raster(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| p.map_or(f64::NAN, |p| p.intensity))
            .collect()
    }

    /// Row-major ranges; empty pixels are NaN.
    pub fn range_raster(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| p.map_or(f64::NAN, |p| p.range))
            .collect()
    }
}

/// Embeds a scan into a range image. On collisions the nearer point wins.
pub fn project_by_id(
    cloud: &PointCloud,
    params: &LidarProjectionParams,
) -> Result<RangeImage, ProjectionError> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(ProjectionError::EmptyCloud);
    }
    let mut image = RangeImage {
        n_rings: params.n_rings,
        width: params.width,
        pixels: vec![None; params.n_rings * params.width],
    };
    for (index, point) in cloud.points.iter().enumerate() {
        let p = &point.position;
        if !p.iter().all(|c| c.is_finite()) {
            return Err(ProjectionError::NonFinitePoint { index });
        }
        let ring = point
            .ring
            .map_or(index / params.width, |r| r as usize);
        if ring >= params.n_rings {
            return Err(ProjectionError::RingOutOfRange {
                index,
                ring,
                n_rings: params.n_rings,
            });
        }
        let range = p.norm();
        if range <= 0.0 {
            continue;
        }
        let column = params.column(p.y.atan2(p.x));
        let slot = &mut image.pixels[ring * params.width + column];
        if slot.is_none_or(|existing| range < existing.range) {
            *slot = Some(RangePixel {
                point_index: index,
                range,
                intensity: point.intensity,
            });
        }
    }
    Ok(image)
}

/// Source point behind a pixel, if any.
pub fn pixel_to_point(
    image: &RangeImage,
    cloud: &PointCloud,
    ring: i64,
    column: i64,
) -> Result<Option<Vector3<f64>>, ProjectionError> {
    match image.get(ring, column)? {
        None => Ok(None),
        Some(px) => cloud
            .points
            .get(px.point_index)
            .map(|p| Some(p.position))
            .ok_or(ProjectionError::DanglingIndex {
                index: px.point_index,
                len: cloud.len(),
            }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k600() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(600.0, 600.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn pinhole_examples() {
        let unit = CameraIntrinsics::pinhole(1.0, 1.0, 0.0, 0.0, 2, 2);
        assert_eq!(
            pinhole_project(&unit, &Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            Vector2::zeros()
        );
        assert_eq!(
            pinhole_project(&k600(), &Vector3::new(0.0, 0.0, 5.0)).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        // 600·1/2 + 320 = 620, 600·(−1)/2 + 240 = −60
        assert_eq!(
            pinhole_project(&k600(), &Vector3::new(1.0, -1.0, 2.0)).unwrap(),
            Vector2::new(620.0, -60.0)
        );
        assert!(matches!(
            pinhole_project(&k600(), &Vector3::new(0.0, 0.0, 0.0)),
            Err(ProjectionError::BehindCamera { .. })
        ));
    }

    #[test]
    fn undistort_examples() {
        let k = k600();
        assert_eq!(
            undistort_pixel(&k, &Vector2::new(320.0, 240.0)).unwrap(),
            Vector2::zeros()
        );
        assert_eq!(
            undistort_pixel(&k, &Vector2::new(920.0, 240.0)).unwrap(),
            Vector2::new(1.0, 0.0)
        );

        let mut k = k600();
        k.distortion[0] = -0.1;
        let ray = Vector2::new(0.3, 0.2);
        let pixel = k.to_pixel(&k.distort(&ray));
        let back = undistort_pixel(&k, &pixel).unwrap();
        assert_abs_diff_eq!(back, ray, epsilon = 1e-8);
    }

    #[test]
    fn undistort_reports_non_invertible_region() {
        let mut k = k600();
        k.distortion = [-0.3, -0.3, 0.0, 0.0, -0.3];
        // Far outside the fold-over radius of the model.
        assert!(matches!(
            undistort_pixel(&k, &Vector2::new(320.0 + 600.0 * 40.0, 240.0)),
            Err(ProjectionError::UndistortDiverged { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(k600().validate().is_ok());
        let mut bad = k600();
        bad.fx = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = k600();
        bad.cx = 640.0;
        assert!(bad.validate().is_err());
    }

    fn single_point_cloud(p: Vector3<f64>, ring: u32) -> PointCloud {
        PointCloud::new(vec![LidarPoint::new(p, ring, 1.0)])
    }

    #[test]
    fn project_forward_axis() {
        let params = LidarProjectionParams::full_scan(1024, 8);
        let cloud = single_point_cloud(Vector3::new(1.0, 0.0, 0.0), 3);
        let img = project_by_id(&cloud, &params).unwrap();
        assert_eq!(img.get(3, 512).unwrap().unwrap().point_index, 0);
        assert_eq!(img.populated_count(), 1);
    }

    #[test]
    fn project_backward_axis_wraps() {
        // fx·π + cx = width, which wraps to column 0.
        let params = LidarProjectionParams::full_scan(1024, 2);
        let cloud = single_point_cloud(Vector3::new(-1.0, 1e-12, 0.0), 0);
        let img = project_by_id(&cloud, &params).unwrap();
        assert!(img.get(0, 0).unwrap().is_some());
        let cloud = single_point_cloud(Vector3::new(-1.0, -1e-12, 0.0), 0);
        let img = project_by_id(&cloud, &params).unwrap();
        assert!(img.get(0, 0).unwrap().is_some());
    }

    #[test]
    fn collision_keeps_nearest() {
        let params = LidarProjectionParams::full_scan(360, 1);
        let cloud = PointCloud::new(vec![
            LidarPoint::new(Vector3::new(5.0, 0.0, 0.0), 0, 0.5),
            LidarPoint::new(Vector3::new(2.0, 0.0, 0.0), 0, 0.7),
            LidarPoint::new(Vector3::new(3.0, 0.0, 0.0), 0, 0.9),
        ]);
        let img = project_by_id(&cloud, &params).unwrap();
        let px = img.get(0, 180).unwrap().unwrap();
        assert_eq!(px.point_index, 1);
        assert_eq!(px.range, 2.0);
        assert_eq!(px.intensity, 0.7);
    }

    #[test]
    fn ring_inferred_from_order() {
        let params = LidarProjectionParams::full_scan(4, 2);
        let points = (0..8)
            .map(|i| {
                let az = params.azimuth(i % 4);
                LidarPoint {
                    position: Vector3::new(az.cos(), az.sin(), 0.0),
                    ring: None,
                    intensity: 0.0,
                }
            })
            .collect();
        let img = project_by_id(&PointCloud::new(points), &params).unwrap();
        assert_eq!(img.populated_count(), 8);
        assert_eq!(img.get(1, 2).unwrap().unwrap().point_index, 6);
    }

    #[test]
    fn project_errors() {
        let params = LidarProjectionParams::full_scan(16, 2);
        assert_eq!(
            project_by_id(&PointCloud::default(), &params),
            Err(ProjectionError::EmptyCloud)
        );
        let cloud = single_point_cloud(Vector3::new(1.0, 0.0, 0.0), 2);
        assert!(matches!(
            project_by_id(&cloud, &params),
            Err(ProjectionError::RingOutOfRange { ring: 2, .. })
        ));
    }

    #[test]
    fn pixel_lookup() {
        let params = LidarProjectionParams::full_scan(360, 2);
        let p = Vector3::new(1.5, 0.2, -0.1);
        let cloud = single_point_cloud(p, 1);
        let img = project_by_id(&cloud, &params).unwrap();
        let (ring, col, _) = img.populated().next().unwrap();
        assert_eq!(
            pixel_to_point(&img, &cloud, ring as i64, col as i64).unwrap(),
            Some(p)
        );
        assert_eq!(pixel_to_point(&img, &cloud, 0, 0).unwrap(), None);
        assert!(matches!(
            pixel_to_point(&img, &cloud, -1, 0),
            Err(ProjectionError::PixelOutOfBounds { .. })
        ));
        assert!(pixel_to_point(&img, &cloud, 0, 360).is_err());
    }

    #[test]
    fn full_scan_has_no_holes() {
        let params = LidarProjectionParams::full_scan(512, 4);
        let mut points = Vec::new();
        for ring in 0..4u32 {
            for c in 0..512 {
                let az = params.azimuth(c);
                let el = 0.05 * ring as f64;
                let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                points.push(LidarPoint::new(dir * 7.0, ring, 0.0));
            }
        }
        let img = project_by_id(&PointCloud::new(points), &params).unwrap();
        assert_eq!(img.populated_count(), 4 * 512);
    }

    #[test]
    fn lidar_params_validation() {
        assert!(LidarProjectionParams::full_scan(1024, 64).validate().is_ok());
        let mut p = LidarProjectionParams::full_scan(1024, 64);
        p.width = 1000;
        assert!(p.validate().is_err());
        p = LidarProjectionParams::full_scan(1024, 0);
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn pinhole_round_trip_zero_distortion(x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.1..20.0f64) {
            let k = k600();
            let p = Vector3::new(x, y, z);
            let ray = undistort_pixel(&k, &pinhole_project(&k, &p).unwrap()).unwrap();
            let dir = Vector3::new(ray.x, ray.y, 1.0).normalize();
            prop_assert!((dir - p.normalize()).norm() < 1e-10);
        }

        #[test]
        fn distortion_round_trip(
            coeffs in prop::array::uniform5(-0.3..0.3f64),
            x in -0.4..0.4f64,
            y in -0.4..0.4f64,
            z in 0.5..10.0f64,
        ) {
            let mut k = k600();
            // keep tangential terms realistic so the model stays invertible
            k.distortion = [coeffs[0], coeffs[1], coeffs[2] * 0.1, coeffs[3] * 0.1, coeffs[4]];
            let p = Vector3::new(x * z, y * z, z);
            let ray = undistort_pixel(&k, &k.project(&p).unwrap()).unwrap();
            let dir = Vector3::new(ray.x, ray.y, 1.0).normalize();
            prop_assert!(dir.angle(&p.normalize()) < 1e-6);
        }

        #[test]
        fn azimuth_monotone_within_ring(mut azimuths in prop::collection::vec(-PI..PI, 2..50)) {
            let params = LidarProjectionParams::full_scan(1024, 1);
            azimuths.sort_by(f64::total_cmp);
            let cols: Vec<usize> = azimuths.iter().map(|a| params.column(*a)).collect();
            // columns increase except for at most one wrap back to 0
            let wraps = cols.windows(2).filter(|w| w[1] < w[0]).count();
            prop_assert!(wraps <= 1);
            if wraps == 1 {
                prop_assert!(cols.windows(2).filter(|w| w[1] < w[0]).all(|w| w[1] == 0));
            }
        }
    }
}
