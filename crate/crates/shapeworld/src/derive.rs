//! Location formats derived from a visible instance mask.

use instdiff_core::layout::{rle_encode, CaptionTokens, InstanceCondition, InstanceSpec, LayoutSpec, SceneLayout};
use instdiff_core::locations::{
    points_from_box, points_from_mask, points_from_scribble, synthesize_point, Format, LocationConfig, MaskGeometry,
    PointSet,
};
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::scene::{Rendered, Scene};
use crate::{Error, Result};

/// Scribble vertices drawn from the mask before resampling.
const SCRIBBLE_VERTICES: usize = 8;

fn set_pixels(m: &MaskGeometry) -> Vec<[f64; 2]> {
    let (h, w) = (m.height(), m.width());
    let mut out = Vec::with_capacity(m.count());
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                out.push([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]);
            }
        }
    }
    out
}

fn snap(p: [f64; 2], pixels: &[[f64; 2]]) -> [f64; 2] {
    let d = |q: &[f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
    *pixels
        .iter()
        .min_by(|a, b| d(a).total_cmp(&d(b)))
        .expect("non-empty mask")
}

/// A hand-drawn-looking stroke: random mask pixels ordered by angle around
/// the centroid, resampled at equal arc length and snapped back onto the
/// mask.
pub fn synthesize_scribble<R: Rng + ?Sized>(m: &MaskGeometry, n: usize, rng: &mut R) -> Result<PointSet> {
    let pixels = set_pixels(m);
    if pixels.len() < 2 {
        return Err(Error::Generation("mask too small for a scribble".into()));
    }
    let k = SCRIBBLE_VERTICES.min(pixels.len());
    let mut verts: Vec<[f64; 2]> = pixels.choose_multiple(rng, k).copied().collect();
    let c = [
        verts.iter().map(|p| p[0]).sum::<f64>() / k as f64,
        verts.iter().map(|p| p[1]).sum::<f64>() / k as f64,
    ];
    verts.sort_by(|a, b| (a[1] - c[1]).atan2(a[0] - c[0]).total_cmp(&(b[1] - c[1]).atan2(b[0] - c[0])));
    let resampled = points_from_scribble(&verts, n)?;
    let pts = resampled.points().iter().map(|p| snap(*p, &pixels)).collect();
    Ok(PointSet::new(Format::Scribble, pts, n)?)
}

/// All four formats plus the tight box as the training region.
pub fn derive_location_formats<R: Rng + ?Sized>(
    mask: &MaskGeometry,
    caption: &str,
    rng: &mut R,
    cfg: &LocationConfig,
) -> Result<InstanceCondition> {
    if mask.count() == 0 {
        return Err(Error::Generation("instance is fully occluded".into()));
    }
    let bbox = mask.bbox();
    let mut ic = InstanceCondition::new(CaptionTokens::parse(caption)?)
        .with_mask(mask.clone(), points_from_mask(mask, cfg.mask_points, rng)?)
        .with(points_from_box(&bbox)?)
        .with(synthesize_scribble(mask, cfg.scribble_points, rng)?)
        .with(synthesize_point(&bbox, rng)?);
    ic.source_box = Some(bbox);
    Ok(ic)
}

pub fn scene_layout<R: Rng + ?Sized>(
    scene: &Scene,
    rendered: &Rendered,
    rng: &mut R,
    cfg: &LocationConfig,
) -> Result<SceneLayout> {
    let mut instances = Vec::with_capacity(scene.instances.len());
    for (i, s) in scene.instances.iter().enumerate() {
        instances.push(derive_location_formats(&rendered.mask(i)?, &s.caption(), rng, cfg)?);
    }
    Ok(SceneLayout::new(CaptionTokens::parse(&scene.caption())?, instances))
}

/// Wire form of a layout. Mask point samples are not stored; they are
/// redrawn from the raster on load.
pub fn layout_spec(layout: &SceneLayout) -> LayoutSpec {
    LayoutSpec {
        caption: layout.caption.text(),
        instances: layout
            .instances
            .iter()
            .map(|ic| {
                let mut is = InstanceSpec::new(ic.caption.text());
                is.point = ic.get(Format::Point).map(|p| p.points()[0]);
                is.scribble = ic.get(Format::Scribble).map(|p| p.points().to_vec());
                is.bbox = ic.get(Format::Box).map(|p| {
                    let q = p.points();
                    [q[0][0], q[0][1], q[1][0], q[1][1]]
                });
                if ic.present(Format::Mask) {
                    is.mask_rle = ic.mask_raster().map(rle_encode);
                }
                is
            })
            .collect(),
    }
}
