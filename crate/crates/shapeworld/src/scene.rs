//! Scene sampling and rasterisation.

use std::f64::consts::PI;

use instdiff_core::locations::MaskGeometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::palette::*;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Circumradius range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Off: shapes keep at least one background pixel between them.
    pub allow_overlap: bool,
    /// Minimum visible fraction of every instance after occlusion.
    pub min_visible: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_instances: 1,
            max_instances: 6,
            min_size: 8.0,
            max_size: 14.0,
            allow_overlap: true,
            min_visible: 0.4,
            max_attempts: 100,
        }
    }
}

impl SceneConfig {
    /// Layouts for evaluation: no occlusion, so the detector can close the
    /// loop exactly.
    pub fn disjoint() -> Self {
        Self {
            allow_overlap: false,
            max_instances: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 16
            && self.min_instances >= 1
            && self.min_instances <= self.max_instances
            && self.max_instances <= 6
            && self.min_size >= 6.0
            && self.min_size <= self.max_size
            && 2.0 * self.max_size + 2.0 < self.image_size as f64
            && (0.0..=1.0).contains(&self.min_visible)
            && self.max_attempts > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Generation(format!("invalid scene config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub category: Category,
    pub color: Color,
    pub texture: Texture,
    /// Pixel coordinates of the centre.
    pub center: [f64; 2],
    /// Circumradius in pixels.
    pub size: f64,
    pub rotation: f64,
    /// Paint order; higher is on top.
    pub z: usize,
}

impl ShapeInstance {
    pub fn caption(&self) -> String {
        instdiff_core::layout::instance_caption(self.color.0, self.texture.0, self.category.0)
    }

    fn polygon(&self) -> Vec<[f64; 2]> {
        let (r, th) = (self.size, self.rotation);
        let ring = |n: usize, phase: f64, radius: &dyn Fn(usize) -> f64| -> Vec<[f64; 2]> {
            (0..n)
                .map(|k| {
                    let a = th + phase + 2.0 * PI * k as f64 / n as f64;
                    let rr = radius(k);
                    [self.center[0] + rr * a.cos(), self.center[1] + rr * a.sin()]
                })
                .collect()
        };
        match self.category {
            SQUARE => ring(4, PI / 4.0, &|_| r),
            TRIANGLE => ring(3, -PI / 2.0, &|_| r),
            _ => ring(10, -PI / 2.0, &|k| if k % 2 == 0 { r } else { 0.5 * r }),
        }
    }

    /// Whether the point (pixel coordinates) lies inside the shape.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        if self.category == CIRCLE {
            let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
            return dx * dx + dy * dy <= self.size * self.size;
        }
        point_in_polygon(p, &self.polygon())
    }

    /// Full (unoccluded) raster at pixel centres.
    pub fn raster(&self, n: usize) -> Vec<bool> {
        (0..n * n)
            .map(|i| self.contains([(i % n) as f64 + 0.5, (i / n) as f64 + 0.5]))
            .collect()
    }
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_size: usize,
    pub instances: Vec<ShapeInstance>,
}

impl Scene {
    pub fn caption(&self) -> String {
        instdiff_core::layout::scene_caption(self.instances.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    /// Visible mask per instance (scene order), row-major.
    pub visible: Vec<Vec<bool>>,
}

impl Rendered {
    pub fn mask(&self, i: usize) -> Result<MaskGeometry> {
        let n = self.image.width;
        Ok(MaskGeometry::new(n, n, self.visible[i].clone())?)
    }
}

/// Painter's algorithm in z order, no anti-aliasing.
pub fn rasterize(scene: &Scene) -> Rendered {
    let n = scene.image_size;
    let mut image = RgbImage::filled(n, n, BACKGROUND);
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    let mut order: Vec<usize> = (0..scene.instances.len()).collect();
    order.sort_by_key(|&i| (scene.instances[i].z, i));
    for &i in &order {
        let s = &scene.instances[i];
        for (p, on) in s.raster(n).into_iter().enumerate() {
            if on {
                let (x, y) = (p % n, p / n);
                image.put(x, y, shade(s.color, texture_alt(s.texture, x, y)));
                owner[p] = Some(i);
            }
        }
    }
    let visible = (0..scene.instances.len())
        .map(|i| owner.iter().map(|o| *o == Some(i)).collect())
        .collect();
    Rendered { image, visible }
}

fn dilate(bits: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            if !bits[y * n + x] {
                continue;
            }
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                        out[yy as usize * n + xx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Rejection-samples a scene: each instance gets up to `max_attempts`
/// placements before generation fails.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.image_size;
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut placed: Vec<ShapeInstance> = Vec::with_capacity(count);
    let mut fulls: Vec<Vec<bool>> = Vec::with_capacity(count);
    let mut occupied = vec![false; n * n];
    for k in 0..count {
        let category = Category(rng.random_range(0..NUM_CATEGORIES));
        let color = Color(rng.random_range(0..NUM_COLORS));
        let texture = Texture(rng.random_range(0..NUM_TEXTURES));
        let mut ok = None;
        for _ in 0..cfg.max_attempts {
            let size = rng.random_range(cfg.min_size..=cfg.max_size);
            let lo = size + 1.0;
            let hi = n as f64 - size - 1.0;
            let cand = ShapeInstance {
                category,
                color,
                texture,
                center: [rng.random_range(lo..hi), rng.random_range(lo..hi)],
                size,
                rotation: rng.random_range(0.0..2.0 * PI),
                z: k,
            };
            let full = cand.raster(n);
            if !full.iter().any(|&b| b) {
                continue;
            }
            if !cfg.allow_overlap {
                if dilate(&full, n).iter().zip(&occupied).any(|(a, b)| *a && *b) {
                    continue;
                }
            } else if !visibility_ok(&fulls, &full, cfg.min_visible) {
                continue;
            }
            ok = Some((cand, full));
            break;
        }
        let (cand, full) = ok.ok_or_else(|| {
            Error::Generation(format!("instance {k} rejected {} times", cfg.max_attempts))
        })?;
        for (o, f) in occupied.iter_mut().zip(&full) {
            *o |= *f;
        }
        placed.push(cand);
        fulls.push(full);
    }
    Ok(Scene {
        image_size: n,
        instances: placed,
    })
}

/// With `top` painted last, every instance keeps `min_visible` of its area.
fn visibility_ok(below: &[Vec<bool>], top: &[bool], min_visible: f64) -> bool {
    let mut all: Vec<&[bool]> = below.iter().map(|v| v.as_slice()).collect();
    all.push(top);
    for (i, m) in all.iter().enumerate() {
        let area = m.iter().filter(|&&b| b).count();
        let vis = (0..m.len())
            .filter(|&p| m[p] && !all[i + 1..].iter().any(|o| o[p]))
            .count();
        if (vis as f64) < min_visible * area as f64 {
            return false;
        }
    }
    true
}

/// Scene `index` of a dataset seeded by `seed`. Failed generations retry
/// with derived seeds, so the result is a pure function of the inputs.
pub fn scene_for_index(seed: u64, index: u64, cfg: &SceneConfig) -> Result<Scene> {
    let mut last = None;
    for retry in 0..64u64 {
        let s = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
            .wrapping_add(retry.wrapping_mul(0x94d0_49bb_1331_11eb));
        match generate_scene(&mut ChaCha8Rng::seed_from_u64(s), cfg) {
            Ok(sc) => return Ok(sc),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}
