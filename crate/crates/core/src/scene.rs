//! Synthetic scenes: class-keyed rectangles rendered into a feature pyramid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::feature_space::{FeatureLevel, FeaturePyramid};
use crate::geometry::BoxXYXY;
use crate::matching::GroundTruth;
use crate::tensor::{RngState, Tensor};

/// Strides of the four pyramid levels.
pub const DEFAULT_STRIDES: [u32; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: usize,
}

impl SceneObject {
    pub fn boxed(&self) -> BoxXYXY {
        BoxXYXY::from_array(self.bbox)
    }
}

/// An image of `width × height` pixels holding labelled rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
}

/// How random scenes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths are drawn from `[min_size, max_size]` pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Amplitude of the uniform noise channels.
    pub noise: f64,
    pub strides: Vec<u32>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 12,
            max_size: 32,
            noise: 0.1,
            strides: DEFAULT_STRIDES.to_vec(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return config_err("scene size must be positive");
        }
        if self.min_objects > self.max_objects {
            return config_err("min_objects exceeds max_objects");
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return config_err(format!(
                "object sizes [{}, {}] do not fit a {}x{} scene",
                self.min_size, self.max_size, self.width, self.height
            ));
        }
        if self.strides.is_empty() {
            return config_err("at least one stride is required");
        }
        Ok(())
    }
}

impl SyntheticScene {
    pub fn new(width: usize, height: usize, objects: Vec<SceneObject>) -> Result<Self> {
        let s = Self { width, height, objects };
        s.validate()?;
        Ok(s)
    }

    /// Draws integer-aligned rectangles with labels in `0..num_classes`.
    pub fn random(spec: &SceneSpec, num_classes: usize, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        if num_classes == 0 {
            return config_err("num_classes must be positive");
        }
        let count = rng.int_range(spec.min_objects, spec.max_objects);
        let objects = (0..count)
            .map(|_| {
                let w = rng.int_range(spec.min_size, spec.max_size);
                let h = rng.int_range(spec.min_size, spec.max_size);
                let x = rng.int_range(0, spec.width - w);
                let y = rng.int_range(0, spec.height - h);
                SceneObject {
                    bbox: [x as f64, y as f64, (x + w) as f64, (y + h) as f64],
                    label: rng.int_range(0, num_classes - 1),
                }
            })
            .collect();
        Self::new(spec.width, spec.height, objects)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("scene size must be positive".into()));
        }
        for o in &self.objects {
            let [x1, y1, x2, y2] = o.bbox;
            let inside = x1 >= 0.0 && y1 >= 0.0 && x2 <= self.width as f64 && y2 <= self.height as f64;
            if !(x2 > x1 && y2 > y1 && inside) {
                return Err(Error::Input(format!(
                    "object box {:?} outside the scene or empty",
                    o.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self.objects.iter().map(SceneObject::boxed).collect(),
            labels: self.objects.iter().map(|o| o.label).collect(),
        }
    }

    pub fn image_size(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }

    /// Pixel intensity map `[height × width]`: label `l` paints
    /// `(l + 1) / num_classes` over the pixels whose centers it covers;
    /// later objects paint over earlier ones.
    pub fn intensity(&self, num_classes: usize) -> Tensor {
        let mut img = Tensor::zeros(&[self.height, self.width]);
        let w = self.width;
        for o in &self.objects {
            let v = (o.label + 1) as f64 / num_classes.max(1) as f64;
            let [x1, y1, x2, y2] = o.bbox;
            for py in 0..self.height {
                let cy = py as f64 + 0.5;
                if cy < y1 || cy > y2 {
                    continue;
                }
                for px in 0..w {
                    let cx = px as f64 + 0.5;
                    if cx >= x1 && cx <= x2 {
                        img.data_mut()[py * w + px] = v;
                    }
                }
            }
        }
        img
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Renders `scene` into a pyramid with one level per stride. Channel 0 is
/// the cell-averaged intensity, channels 1 and 2 the cell-center x and y
/// divided by the image size, and the rest uniform noise in
/// `[-noise, noise]` drawn from `rng`.
pub fn gen_pyramid(
    scene: &SyntheticScene,
    d_feat: usize,
    num_classes: usize,
    strides: &[u32],
    s_base: u32,
    noise: f64,
    rng: &mut RngState,
) -> Result<FeaturePyramid> {
    scene.validate()?;
    if d_feat < 3 {
        return config_err(format!("d_feat {d_feat} cannot hold intensity and ramp channels"));
    }
    let img = scene.intensity(num_classes);
    let (w, h) = (scene.width, scene.height);
    let mut levels = Vec::with_capacity(strides.len());
    for &stride in strides {
        let s = stride as usize;
        if s == 0 {
            return config_err("stride must be positive");
        }
        let lw = w.div_ceil(s);
        let lh = h.div_ceil(s);
        let mut values = Tensor::zeros(&[lh, lw, d_feat]);
        for iy in 0..lh {
            for ix in 0..lw {
                let (mut sum, mut count) = (0.0, 0usize);
                for py in iy * s..((iy + 1) * s).min(h) {
                    for px in ix * s..((ix + 1) * s).min(w) {
                        sum += img.data()[py * w + px];
                        count += 1;
                    }
                }
                let off = (iy * lw + ix) * d_feat;
                let cell = &mut values.data_mut()[off..off + d_feat];
                cell[0] = sum / count as f64;
                cell[1] = (ix as f64 + 0.5) * s as f64 / w as f64;
                cell[2] = (iy as f64 + 0.5) * s as f64 / h as f64;
                for v in &mut cell[3..] {
                    *v = rng.uniform(-noise, noise);
                }
            }
        }
        levels.push(FeatureLevel::new(stride, lh, lw, values)?);
    }
    FeaturePyramid::new(s_base, levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(level: &FeatureLevel, c: usize) -> Vec<f64> {
        level
            .values
            .data()
            .chunks(level.channels())
            .map(|cell| cell[c])
            .collect()
    }

    #[test]
    fn empty_scene_has_zero_intensity() {
        let scene = SyntheticScene::new(32, 32, vec![]).unwrap();
        let pyr = gen_pyramid(&scene, 6, 2, &DEFAULT_STRIDES, 4, 0.1, &mut RngState::new(0)).unwrap();
        for l in &pyr.levels {
            assert!(channel(l, 0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn full_image_object_is_constant() {
        let obj = SceneObject {
            bbox: [0.0, 0.0, 32.0, 32.0],
            label: 1,
        };
        let scene = SyntheticScene::new(32, 32, vec![obj]).unwrap();
        let pyr = gen_pyramid(&scene, 4, 2, &DEFAULT_STRIDES, 4, 0.1, &mut RngState::new(0)).unwrap();
        for l in &pyr.levels {
            assert!(channel(l, 0).iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn same_seed_same_pyramid() {
        let spec = SceneSpec::default();
        let make = |seed| {
            let mut rng = RngState::new(seed);
            let scene = SyntheticScene::random(&spec, 2, &mut rng).unwrap();
            gen_pyramid(&scene, 8, 2, &spec.strides, 4, spec.noise, &mut rng).unwrap()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
    }

    #[test]
    fn random_scenes_respect_bounds() {
        let spec = SceneSpec::default();
        let mut rng = RngState::new(9);
        for _ in 0..50 {
            let s = SyntheticScene::random(&spec, 3, &mut rng).unwrap();
            assert!((1..=3).contains(&s.objects.len()));
            assert!(s.objects.iter().all(|o| o.label < 3));
        }
        assert!(SyntheticScene::new(
            8,
            8,
            vec![SceneObject {
                bbox: [0.0, 0.0, 9.0, 4.0],
                label: 0
            }]
        )
        .is_err());
    }

    #[test]
    fn level_shapes_and_ramps() {
        let scene = SyntheticScene::new(64, 48, vec![]).unwrap();
        let pyr = gen_pyramid(&scene, 3, 1, &DEFAULT_STRIDES, 4, 0.0, &mut RngState::new(0)).unwrap();
        let dims: Vec<(usize, usize)> = pyr.levels.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(dims, vec![(12, 16), (6, 8), (3, 4), (2, 2)]);
        let l = &pyr.levels[1];
        assert_eq!(l.values.data()[1], 4.0 / 64.0);
        assert_eq!(l.values.data()[2], 4.0 / 48.0);
    }
}
