use planecal::io::Dataset;
use planecal::projection::project_by_id;
use planecal::target::{
    self, extract_lidar_plane, BoardPoseFit, LidarExtraction, PatchSelection, PlaneObservation,
    RansacConfig,
};
use planecal::{CornerSet, MeasurementPair, PointCloud, RangeImage};

use crate::error::AppError;

/// One dataset frame with its range image, ready for extraction.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub id: String,
    pub cloud: PointCloud,
    pub image: RangeImage,
    pub corners: CornerSet,
    pub seed_hint: Option<PatchSelection>,
}

impl LoadedFrame {
    pub fn load(dataset: &Dataset, id: &str) -> Result<Self, AppError> {
        let entry = dataset
            .frame(id)
            .ok_or_else(|| AppError::new("no_frame", format!("dataset has no frame `{id}`")))?;
        let cloud = dataset.load_frame_cloud(id)?;
        let image = project_by_id(&cloud, &dataset.manifest.lidar)
            .map_err(|e| AppError::new("invalid_data", e.to_string()))?;
        Ok(Self {
            id: id.to_owned(),
            seed_hint: entry.seed_hint,
            corners: dataset.load_frame_corners(id)?,
            cloud,
            image,
        })
    }

    pub fn lidar_plane(&self, sel: &PatchSelection, ransac: &RansacConfig) -> Result<LidarExtraction, AppError> {
        Ok(extract_lidar_plane(&self.image, &self.cloud, sel, ransac)?)
    }

    pub fn board_pose(&self, dataset: &Dataset) -> Result<BoardPoseFit, AppError> {
        Ok(target::board_pose(&self.corners, &dataset.manifest.intrinsics)?)
    }

    pub fn camera_plane(&self, dataset: &Dataset) -> Result<PlaneObservation, AppError> {
        let fit = self.board_pose(dataset)?;
        Ok(target::camera_plane(&fit, &dataset.manifest.board))
    }

    /// Both planes for this frame; `sel` defaults to the manifest's seed hint.
    pub fn measure(
        &self,
        dataset: &Dataset,
        sel: Option<PatchSelection>,
        ransac: &RansacConfig,
    ) -> Result<MeasurementPair, AppError> {
        let sel = sel.or(self.seed_hint).ok_or_else(|| {
            AppError::usage(format!("frame `{}` has no seed hint; pass --ring, --column and --radius", self.id))
        })?;
        let lidar = self.lidar_plane(&sel, ransac)?;
        let camera = self.camera_plane(dataset)?;
        Ok(MeasurementPair {
            id: self.id.clone(),
            lidar_plane: lidar.fit.observation.plane,
            camera_plane: camera.plane,
        })
    }
}
