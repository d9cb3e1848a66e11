//! Synthetic occluded-shapes scenes with exact four-mask ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{box_pixel_range, AmodalInstance, Bitmap, Category, Dataset, Image, ImageEntry, ImageRecord};
use crate::error::{Error, Result};
use crate::roi::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle];

    pub fn category_id(self) -> u64 {
        match self {
            ShapeKind::Rectangle => 1,
            ShapeKind::Ellipse => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn intensity(self) -> f64 {
        match self {
            ShapeKind::Rectangle => 0.85,
            ShapeKind::Ellipse => 0.55,
            ShapeKind::Triangle => 0.3,
        }
    }
}

pub fn synth_categories() -> Vec<Category> {
    ShapeKind::ALL
        .iter()
        .map(|k| Category {
            id: k.category_id(),
            name: k.name().into(),
        })
        .collect()
}

/// Axis-aligned shape centered at `(cx, cy)` with half-extents `(rx, ry)`.
/// Triangles point up. Depth 0 is nearest to the camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub depth: usize,
}

impl ShapeSpec {
    /// Whether the continuous point `(x, y)` lies inside the silhouette.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() < self.rx && dy.abs() < self.ry,
            ShapeKind::Ellipse => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) < 1.0,
            // apex at (0, -ry), base from (-rx, ry) to (rx, ry)
            ShapeKind::Triangle => dy < self.ry && dx.abs() < self.rx * (dy + self.ry) / (2.0 * self.ry),
        }
    }

    /// Silhouette sampled at pixel centers.
    pub fn rasterize(&self, height: usize, width: usize) -> Bitmap {
        Bitmap::from_fn(height, width, |y, x| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeSpec>,
}

/// Knobs for random scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Scenes where some instance shows less than this fraction are redrawn.
    pub min_visible_fraction: f64,
    pub noise_std: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_shapes: 2,
            max_shapes: 4,
            min_visible_fraction: 0.3,
            noise_std: 0.02,
        }
    }
}

const MAX_REDRAWS: usize = 64;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        let mut depths: Vec<usize> = self.shapes.iter().map(|s| s.depth).collect();
        depths.sort_unstable();
        if depths.iter().enumerate().any(|(i, d)| i != *d) {
            return Err(Error::Config(format!("depths {depths:?} are not a total order 0..n")));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !(s.rx > 0.0 && s.ry > 0.0) || s.rasterize(self.height, self.width).is_empty() {
                return Err(Error::Config(format!("shape {i} does not cover any canvas pixel")));
            }
        }
        Ok(())
    }

    /// Random scene; the same seed and options always give the same scene.
    pub fn random(seed: u64, opts: &SynthOptions) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (opts.width as f64, opts.height as f64);
        let mut last = None;
        for _ in 0..MAX_REDRAWS {
            let n = rng.random_range(opts.min_shapes..=opts.max_shapes.max(opts.min_shapes));
            let mut depths: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                depths.swap(i, rng.random_range(0..=i));
            }
            let shapes: Vec<ShapeSpec> = depths
                .into_iter()
                .map(|depth| {
                    let kind = ShapeKind::ALL[rng.random_range(0..3)];
                    let rx = rng.random_range(0.1..0.22) * w;
                    let ry = rng.random_range(0.1..0.22) * h;
                    ShapeSpec {
                        kind,
                        cx: rng.random_range(rx + 1.0..w - rx - 1.0),
                        cy: rng.random_range(ry + 1.0..h - ry - 1.0),
                        rx,
                        ry,
                        depth,
                    }
                })
                .collect();
            let spec = SceneSpec {
                seed,
                width: opts.width,
                height: opts.height,
                shapes,
            };
            if spec.min_visible_fraction() >= opts.min_visible_fraction {
                return spec;
            }
            last = Some(spec);
        }
        last.expect("at least one draw")
    }

    fn min_visible_fraction(&self) -> f64 {
        let masks = self.amodal_masks();
        let vis = visible_masks(self, &masks);
        masks
            .iter()
            .zip(&vis)
            .map(|(a, v)| if a.area() == 0 { 0.0 } else { v.area() as f64 / a.area() as f64 })
            .fold(1.0, f64::min)
    }

    fn amodal_masks(&self) -> Vec<Bitmap> {
        self.shapes.iter().map(|s| s.rasterize(self.height, self.width)).collect()
    }
}

fn visible_masks(spec: &SceneSpec, amodal: &[Bitmap]) -> Vec<Bitmap> {
    (0..spec.shapes.len())
        .map(|i| {
            let mut v = amodal[i].clone();
            for (j, s) in spec.shapes.iter().enumerate() {
                if s.depth < spec.shapes[i].depth {
                    v = v.and_not(&amodal[j]).expect("same canvas");
                }
            }
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: Image,
    /// One per shape, in shape order, ids `1..=n`, image id 0.
    pub instances: Vec<AmodalInstance>,
}

pub fn synth_generate(spec: &SceneSpec) -> Result<SynthScene> {
    synth_generate_with(spec, SynthOptions::default().noise_std)
}

fn synth_generate_with(spec: &SceneSpec, noise_std: f64) -> Result<SynthScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let amodal = spec.amodal_masks();
    let visible = visible_masks(spec, &amodal);

    let mut instances = Vec::with_capacity(spec.shapes.len());
    for (i, s) in spec.shapes.iter().enumerate() {
        let [x0, y0, x1, y1] = amodal[i].extent().expect("validated non-empty");
        let bbox = BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?;
        let (bx0, by0, bx1, by1) = box_pixel_range(&bbox, w, h);
        let mut occ = Bitmap::zeros(h, w);
        for (j, t) in spec.shapes.iter().enumerate() {
            if t.depth < s.depth {
                occ = occ.or(&amodal[j])?;
            }
        }
        let occ = occ.clip_to(bx0, by0, bx1, by1);
        instances.push(AmodalInstance::new(
            i as u64 + 1,
            0,
            s.kind.category_id(),
            bbox,
            amodal[i].clone(),
            visible[i].clone(),
            occ,
        )?);
    }

    Ok(SynthScene {
        image: render(spec, &visible, noise_std),
        instances,
    })
}

/// Channel 0: category intensity of the front shape. Channel 1: depth
/// shading. Channel 2: a per-shape tint. Visible outlines are darkened.
fn render(spec: &SceneSpec, visible: &[Bitmap], noise_std: f64) -> Image {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let tints: Vec<f64> = spec.shapes.iter().map(|_| rng.random_range(0.3..0.9)).collect();
    let n = spec.shapes.len();
    let mut owner = vec![usize::MAX; h * w];
    for (i, v) in visible.iter().enumerate() {
        for (p, &b) in v.data.iter().enumerate() {
            if b != 0 {
                owner[p] = i;
            }
        }
    }
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("non-negative std");
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let mut px = if o == usize::MAX {
                [0.1, 0.05, 0.0]
            } else {
                let s = &spec.shapes[o];
                let shade = 0.9 - 0.6 * s.depth as f64 / (n.max(2) - 1) as f64;
                [s.kind.intensity(), shade, tints[o]]
            };
            let edge = o != usize::MAX
                && [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && owner[yy as usize * w + xx as usize] != o
                });
            for v in px.iter_mut() {
                if edge {
                    *v *= 0.5;
                }
                let noisy = if noise_std > 0.0 { *v + noise.sample(&mut rng) } else { *v };
                data.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image::new(3, h, w, data).expect("consistent raster")
}

/// Per-image seed derived from a dataset seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `images` random scenes; image ids start at 1, instance ids are global.
pub fn synth_dataset(seed: u64, images: usize, opts: &SynthOptions) -> Result<(Dataset, Vec<Image>)> {
    let mut dataset = Dataset {
        images: Vec::with_capacity(images),
        categories: synth_categories(),
    };
    let mut pixels = Vec::with_capacity(images);
    let mut next_id = 1u64;
    for i in 0..images {
        let spec = SceneSpec::random(derive_seed(seed, i as u64), opts);
        let scene = synth_generate_with(&spec, opts.noise_std)?;
        let image_id = i as u64 + 1;
        let instances = scene
            .instances
            .into_iter()
            .map(|mut inst| {
                inst.id = next_id;
                inst.image_id = image_id;
                next_id += 1;
                inst
            })
            .collect();
        dataset.images.push(ImageEntry {
            info: ImageRecord {
                id: image_id,
                width: opts.width,
                height: opts.height,
                file: format!("img_{image_id:04}.ppm"),
            },
            instances,
        });
        pixels.push(scene.image);
    }
    Ok((dataset, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: ShapeKind, cx: f64, cy: f64, r: f64, depth: usize) -> ShapeSpec {
        ShapeSpec {
            kind,
            cx,
            cy,
            rx: r,
            ry: r,
            depth,
        }
    }

    #[test]
    fn single_shape_is_fully_visible() {
        let spec = SceneSpec {
            seed: 1,
            width: 32,
            height: 32,
            shapes: vec![shape(ShapeKind::Ellipse, 16.0, 16.0, 8.0, 0)],
        };
        let s = synth_generate(&spec).unwrap();
        let inst = &s.instances[0];
        assert_eq!(inst.visible, inst.amodal);
        assert!(inst.invisible.is_empty());
        assert!(inst.occluder.is_empty());
    }

    #[test]
    fn nested_shape_behind_is_hidden() {
        let spec = SceneSpec {
            seed: 1,
            width: 32,
            height: 32,
            shapes: vec![
                shape(ShapeKind::Rectangle, 16.0, 16.0, 4.0, 1),
                shape(ShapeKind::Rectangle, 16.0, 16.0, 10.0, 0),
            ],
        };
        let s = synth_generate(&spec).unwrap();
        assert!(s.instances[0].visible.is_empty());
        assert_eq!(s.instances[0].invisible, s.instances[0].amodal);
        assert_eq!(s.instances[0].occluder.area(), 64);
    }

    #[test]
    fn invalid_depths_rejected() {
        let spec = SceneSpec {
            seed: 0,
            width: 16,
            height: 16,
            shapes: vec![shape(ShapeKind::Ellipse, 8.0, 8.0, 3.0, 1)],
        };
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn random_scenes_are_reproducible() {
        let opts = SynthOptions::default();
        let a = synth_generate(&SceneSpec::random(9, &opts)).unwrap();
        let b = synth_generate(&SceneSpec::random(9, &opts)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SceneSpec::random(10, &opts)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn triangle_points_up() {
        let t = shape(ShapeKind::Triangle, 10.0, 10.0, 5.0, 0);
        assert!(t.contains(10.0, 6.0));
        assert!(!t.contains(13.0, 6.0));
        assert!(t.contains(14.0, 14.5));
    }
}
