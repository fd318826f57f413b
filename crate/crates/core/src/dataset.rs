//! Posed views plus optional ground truth, as consumed by training.

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::image::RgbImage;
use crate::sparse_depth::Correspondence;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<CameraModel>,
    pub images: Vec<RgbImage>,
    /// Per-view ray-distance depth, `None` where nothing was hit.
    pub depths: Option<Vec<Vec<Option<f64>>>>,
    pub gt_points: Option<Vec<Vec3>>,
    pub matches: Option<Vec<Correspondence>>,
}

impl Dataset {
    pub fn new(cameras: Vec<CameraModel>, images: Vec<RgbImage>) -> Result<Self> {
        let ds = Self {
            cameras,
            images,
            depths: None,
            gt_points: None,
            matches: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Every violation found, joined into one message.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cameras.is_empty() {
            out.push("dataset has no views".to_string());
        }
        if self.cameras.len() != self.images.len() {
            out.push(format!("{} poses but {} images", self.cameras.len(), self.images.len()));
        }
        for (i, (c, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if c.width != img.width || c.height != img.height {
                out.push(format!(
                    "image {i} is {}x{} but intrinsics say {}x{}",
                    img.width, img.height, c.width, c.height
                ));
            }
        }
        if let Some(m) = &self.matches {
            for (k, c) in m.iter().enumerate() {
                if c.view_a >= self.cameras.len() || c.view_b >= self.cameras.len() || c.view_a == c.view_b {
                    out.push(format!("match {k} references views {} and {}", c.view_a, c.view_b));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(v.join("; ")))
        }
    }

    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.width * c.height)
    }

    pub fn camera_centres(&self) -> Vec<Vec3> {
        self.cameras.iter().map(|c| c.center()).collect()
    }
}
