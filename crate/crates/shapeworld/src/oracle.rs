//! Deterministic detector for shape-world images.
//!
//! Pixels are labelled with the nearest palette colour, grouped into
//! 8-connected components per colour, and each component is classified:
//! texture by the grid pattern its two shades follow, category by the
//! normalised radius of the farthest pixel corner and the solidity
//! against the convex hull.

use std::collections::VecDeque;

use instdiff_core::locations::{BoxGeometry, MaskGeometry};
use serde::Serialize;

use crate::image::RgbImage;
use crate::palette::*;
use crate::scene::{Rendered, Scene};
use crate::Result;

/// Components smaller than this are treated as noise.
pub const MIN_AREA: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub mask: MaskGeometry,
    pub bbox: BoxGeometry,
    pub color: Color,
    pub texture: Texture,
    /// `None` when the blob matches no category.
    pub category: Option<Category>,
}

/// Shape features of one component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeFeatures {
    pub area: usize,
    /// Farthest pixel corner from the centroid over `sqrt(area / pi)`.
    pub radius_ratio: f64,
    /// Area over the convex hull of the pixel squares.
    pub solidity: f64,
}

pub fn shape_features(pixels: &[(usize, usize)]) -> ShapeFeatures {
    let area = pixels.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for &(x, y) in pixels {
        cx += x as f64 + 0.5;
        cy += y as f64 + 0.5;
    }
    cx /= area as f64;
    cy /= area as f64;
    let mut corners = Vec::with_capacity(4 * area);
    let mut rmax: f64 = 0.0;
    for &(x, y) in pixels {
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = ((x + dx) as f64, (y + dy) as f64);
            rmax = rmax.max(((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt());
            corners.push(p);
        }
    }
    let hull = convex_hull(corners);
    ShapeFeatures {
        area,
        radius_ratio: rmax / (area as f64 / std::f64::consts::PI).sqrt(),
        solidity: area as f64 / polygon_area(&hull).max(1.0),
    }
}

/// Analytic ratios: circle 1.0, square 1.25, star 1.46, triangle 1.56.
/// Star solidity is about 0.62, the convex shapes are near 1.
pub fn classify_shape(f: &ShapeFeatures) -> Option<Category> {
    if f.solidity < 0.45 || f.radius_ratio > 2.2 {
        return None;
    }
    if f.solidity < 0.78 {
        return Some(STAR);
    }
    if f.radius_ratio < 1.14 {
        Some(CIRCLE)
    } else if f.radius_ratio < 1.40 {
        Some(SQUARE)
    } else {
        Some(TRIANGLE)
    }
}

/// The texture whose pattern best explains which pixels use the second
/// shade. Ties go to the lower index.
pub fn classify_texture(pixels: &[(usize, usize)], alt: &[bool]) -> Texture {
    let mut best = (0usize, SOLID);
    for t in 0..NUM_TEXTURES {
        let t = Texture(t);
        let hits = pixels
            .iter()
            .zip(alt)
            .filter(|(&(x, y), &a)| texture_alt(t, x, y) == a)
            .count();
        if hits > best.0 {
            best = (hits, t);
        }
    }
    best.1
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

pub fn oracle_detect(image: &RgbImage) -> Vec<Detection> {
    let (w, h) = (image.width, image.height);
    let labels: Vec<Option<(Color, bool)>> = (0..w * h).map(|p| nearest(image.get(p % w, p / w))).collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let Some((color, _)) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && labels[q].map(|l| l.0) == Some(color) {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if comp.len() < MIN_AREA {
            continue;
        }
        comp.sort_unstable();
        let pixels: Vec<(usize, usize)> = comp.iter().map(|&p| (p % w, p / w)).collect();
        let alt: Vec<bool> = comp.iter().map(|&p| labels[p].unwrap().1).collect();
        let mut bits = vec![false; w * h];
        for &p in &comp {
            bits[p] = true;
        }
        let mask = MaskGeometry::new(h, w, bits).expect("component is non-empty");
        out.push(Detection {
            bbox: mask.bbox(),
            mask,
            color,
            texture: classify_texture(&pixels, &alt),
            category: classify_shape(&shape_features(&pixels)),
        });
    }
    out
}

/// Ground-truth instances of a rendered scene as detections.
pub fn ground_truth(scene: &Scene, rendered: &Rendered) -> Result<Vec<Detection>> {
    scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mask = rendered.mask(i)?;
            Ok(Detection {
                bbox: mask.bbox(),
                mask,
                color: s.color,
                texture: s.texture,
                category: Some(s.category),
            })
        })
        .collect()
}

pub fn mask_iou(a: &MaskGeometry, b: &MaskGeometry) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchSummary {
    pub truths: usize,
    pub detections: usize,
    pub matched: usize,
    pub min_iou: f64,
    pub mean_iou: f64,
    /// Matched pairs whose colour, texture and category all agree.
    pub exact_attributes: usize,
}

impl MatchSummary {
    pub fn precision(&self) -> f64 {
        if self.detections == 0 {
            1.0
        } else {
            self.matched as f64 / self.detections as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.truths == 0 {
            1.0
        } else {
            self.matched as f64 / self.truths as f64
        }
    }

    pub fn merge(&mut self, o: &MatchSummary) {
        let total = self.matched + o.matched;
        if total > 0 {
            self.mean_iou = (self.mean_iou * self.matched as f64 + o.mean_iou * o.matched as f64) / total as f64;
        }
        self.min_iou = match (self.matched, o.matched) {
            (0, _) => o.min_iou,
            (_, 0) => self.min_iou,
            _ => self.min_iou.min(o.min_iou),
        };
        self.truths += o.truths;
        self.detections += o.detections;
        self.matched = total;
        self.exact_attributes += o.exact_attributes;
    }
}

/// Greedy one-to-one matching by descending mask IoU, pairs below
/// `min_iou` stay unmatched.
pub fn greedy_pairs(truth: &[Detection], dets: &[Detection], min_iou: f64) -> Vec<(usize, usize, f64)> {
    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            let iou = mask_iou(&t.mask, &d.mask);
            if iou >= min_iou && iou > 0.0 {
                cand.push((i, j, iou));
            }
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let (mut ut, mut ud) = (vec![false; truth.len()], vec![false; dets.len()]);
    let mut out = Vec::new();
    for (i, j, iou) in cand {
        if !ut[i] && !ud[j] {
            ut[i] = true;
            ud[j] = true;
            out.push((i, j, iou));
        }
    }
    out
}

pub fn match_detections(truth: &[Detection], dets: &[Detection]) -> MatchSummary {
    let pairs = greedy_pairs(truth, dets, 0.5);
    let n = pairs.len();
    MatchSummary {
        truths: truth.len(),
        detections: dets.len(),
        matched: n,
        min_iou: pairs.iter().map(|p| p.2).fold(if n == 0 { 0.0 } else { 1.0 }, f64::min),
        mean_iou: if n == 0 { 0.0 } else { pairs.iter().map(|p| p.2).sum::<f64>() / n as f64 },
        exact_attributes: pairs
            .iter()
            .filter(|&&(i, j, _)| {
                let (t, d) = (&truth[i], &dets[j]);
                t.color == d.color && t.texture == d.texture && t.category == d.category
            })
            .count(),
    }
}
