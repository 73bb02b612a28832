//! Location formats and their point parameterization.
//!
//! Every format becomes an ordered point set in normalized `[0, 1]^2`
//! image coordinates (x right, y down), which is then lifted with a
//! sinusoidal Fourier mapping.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Mask,
    Scribble,
    Box,
    Point,
}

impl Format {
    /// Token stream order used throughout the model.
    pub const ALL: [Format; 4] = [Format::Mask, Format::Scribble, Format::Box, Format::Point];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::Mask => "mask",
            Format::Scribble => "scribble",
            Format::Box => "box",
            Format::Point => "point",
        }
    }
}

/// Point budgets and Fourier bandwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocationConfig {
    pub bandwidth: usize,
    pub scribble_points: usize,
    pub mask_points: usize,
}

impl Default for LocationConfig {
    fn default() -> Self {
        Self {
            bandwidth: 16,
            scribble_points: 8,
            mask_points: 128,
        }
    }
}

impl LocationConfig {
    pub fn capacity(&self, f: Format) -> usize {
        match f {
            Format::Point => 1,
            Format::Box => 2,
            Format::Scribble => self.scribble_points,
            Format::Mask => self.mask_points,
        }
    }

    /// Width of the Fourier feature block for a full-capacity point set.
    pub fn embed_dim(&self, f: Format) -> usize {
        self.capacity(f) * 4 * self.bandwidth
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth == 0 || self.scribble_points < 2 {
            return Err(Error::Contract(format!("bad location config {self:?}")));
        }
        if self.mask_points < 2 || self.mask_points % 2 != 0 {
            return Err(Error::Contract("mask point count must be even and >= 2".into()));
        }
        Ok(())
    }
}

/// Ordered points of one location format. Slots past `points.len()` up to
/// `capacity` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    format: Format,
    points: Vec<[f64; 2]>,
    capacity: usize,
}

impl PointSet {
    pub fn new(format: Format, points: Vec<[f64; 2]>, capacity: usize) -> Result<Self> {
        if points.is_empty() || points.len() > capacity {
            return Err(Error::Geometry(format!(
                "{} needs 1..={capacity} points, got {}",
                format.name(),
                points.len()
            )));
        }
        let exact = match format {
            Format::Point => Some(1),
            Format::Box => Some(2),
            _ => None,
        };
        if let Some(k) = exact {
            if points.len() != k || capacity != k {
                return Err(Error::Geometry(format!("{} takes exactly {k} points", format.name())));
            }
        }
        for p in &points {
            if !in_unit(p) {
                return Err(Error::Geometry(format!("point {p:?} outside [0,1]^2")));
            }
        }
        Ok(Self {
            format,
            points,
            capacity,
        })
    }

    pub fn format(&self) -> Format {
        self.format
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `true` for padding slots, length `capacity`.
    pub fn pad_flags(&self) -> Vec<bool> {
        (0..self.capacity).map(|i| i >= self.points.len()).collect()
    }

    /// Axis-aligned bounds of the points (possibly zero-area).
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &self.points {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }
}

fn in_unit(p: &[f64; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxGeometry {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x0, self.y0, self.x1, self.y1];
        if c.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Geometry(format!("box {c:?} outside [0,1]")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Geometry(format!("degenerate box {c:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] < self.x1 && p[1] >= self.y0 && p[1] < self.y1
    }

    pub fn iou(&self, o: &BoxGeometry) -> f64 {
        let iw = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let ih = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.width() * self.height() + o.width() * o.height() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Square of side `side` centred on `p`, clipped to the frame.
    pub fn around(p: [f64; 2], side: f64) -> Result<Self> {
        let h = side / 2.0;
        Self::new(
            (p[0] - h).max(0.0),
            (p[1] - h).max(0.0),
            (p[0] + h).min(1.0),
            (p[1] + h).min(1.0),
        )
    }
}

/// Binary raster, row-major, `true` = instance pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskGeometry {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl MaskGeometry {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || bits.len() != h * w {
            return Err(Error::Geometry(format!("mask {h}x{w} with {} bits", bits.len())));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Geometry("empty mask".into()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    /// Out-of-frame coordinates read as unset.
    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.get(y as usize, x as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether the normalized point falls on a set pixel.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let x = ((p[0] * self.w as f64).floor() as isize).min(self.w as isize - 1);
        let y = ((p[1] * self.h as f64).floor() as isize).min(self.h as isize - 1);
        self.at(y, x)
    }

    /// Tight box over set pixels, in normalized pixel-edge coordinates.
    pub fn bbox(&self) -> BoxGeometry {
        let (mut x0, mut y0, mut x1, mut y1) = (self.w, self.h, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        BoxGeometry {
            x0: x0 as f64 / self.w as f64,
            y0: y0 as f64 / self.h as f64,
            x1: x1 as f64 / self.w as f64,
            y1: y1 as f64 / self.h as f64,
        }
    }

    fn center_of(&self, y: usize, x: usize) -> [f64; 2] {
        [(x as f64 + 0.5) / self.w as f64, (y as f64 + 0.5) / self.h as f64]
    }

    /// Closed boundary polygons, one per 8-connected component, as pixel
    /// centres in normalized coordinates. A one-pixel component yields a
    /// single-vertex polygon.
    pub fn boundary_polygons(&self) -> Vec<Vec<[f64; 2]>> {
        let mut label = vec![false; self.h * self.w];
        let mut polys = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) && !label[y * self.w + x] {
                    self.flood(y, x, &mut label);
                    polys.push(
                        self.trace(y, x)
                            .into_iter()
                            .map(|(yy, xx)| self.center_of(yy, xx))
                            .collect(),
                    );
                }
            }
        }
        polys
    }

    fn flood(&self, y: usize, x: usize, label: &mut [bool]) {
        let mut stack = vec![(y, x)];
        label[y * self.w + x] = true;
        while let Some((cy, cx)) = stack.pop() {
            for (dy, dx) in MOORE {
                let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                if self.at(ny, nx) && !label[ny as usize * self.w + nx as usize] {
                    label[ny as usize * self.w + nx as usize] = true;
                    stack.push((ny as usize, nx as usize));
                }
            }
        }
    }

    /// Moore-neighbour tracing from the component's first pixel in raster
    /// order; stops once the first move (start -> second) would repeat.
    fn trace(&self, sy: usize, sx: usize) -> Vec<(usize, usize)> {
        let start = (sy as isize, sx as isize);
        // Entered from the west: that neighbour is unset by raster order.
        let mut cur = start;
        let mut back = 6usize;
        let mut second = None;
        let mut out = vec![(sy, sx)];
        let limit = 4 * self.h * self.w + 8;
        for _ in 0..limit {
            let mut next = None;
            for i in 1..=8 {
                let d = (back + i) % 8;
                let (dy, dx) = MOORE[d];
                if self.at(cur.0 + dy, cur.1 + dx) {
                    next = Some(d);
                    break;
                }
            }
            let Some(d) = next else {
                return out;
            };
            let (dy, dx) = MOORE[d];
            let prev = (d + 7) % 8;
            let (py, px) = (cur.0 + MOORE[prev].0, cur.1 + MOORE[prev].1);
            let nxt = (cur.0 + dy, cur.1 + dx);
            if cur == start {
                match second {
                    None => second = Some(nxt),
                    Some(s) if s == nxt => return out,
                    Some(_) => {}
                }
            }
            // Backtrack direction as seen from the new pixel.
            back = MOORE
                .iter()
                .position(|&(by, bx)| (nxt.0 + by, nxt.1 + bx) == (py, px))
                .expect("backtrack is a Moore neighbour");
            cur = nxt;
            if cur != start || second.is_none() {
                out.push((cur.0 as usize, cur.1 as usize));
            }
        }
        out
    }
}

/// Clockwise from north, image coordinates (y down).
const MOORE: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

pub fn points_from_box(b: &BoxGeometry) -> Result<PointSet> {
    b.validate()?;
    PointSet::new(Format::Box, vec![[b.x0, b.y0], [b.x1, b.y1]], 2)
}

pub fn point_set(p: [f64; 2]) -> Result<PointSet> {
    PointSet::new(Format::Point, vec![p], 1)
}

/// Half the budget on the boundary polygons by arc length (random phase,
/// equal spacing), half stratified over the set pixels.
pub fn points_from_mask<R: Rng + ?Sized>(m: &MaskGeometry, n_total: usize, rng: &mut R) -> Result<PointSet> {
    if n_total < 2 || n_total % 2 != 0 {
        return Err(Error::Contract(format!("mask point count {n_total} must be even")));
    }
    if m.count() == 0 {
        return Err(Error::Geometry("empty mask".into()));
    }
    let half = n_total / 2;
    let mut pts = sample_boundary(&m.boundary_polygons(), half, rng.random::<f64>());

    let set: Vec<usize> = (0..m.h * m.w).filter(|&i| m.bits[i]).collect();
    for k in 0..half {
        let u: f64 = rng.random();
        let idx = (((k as f64 + u) * set.len() as f64 / half as f64) as usize).min(set.len() - 1);
        let p = set[idx];
        pts.push(m.center_of(p / m.w, p % m.w));
    }
    PointSet::new(Format::Mask, pts, n_total)
}

fn sample_boundary(polys: &[Vec<[f64; 2]>], n: usize, phase: f64) -> Vec<[f64; 2]> {
    // Flatten the closed loops into one path of segments.
    let mut segs: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for poly in polys {
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            segs.push((a, b));
        }
    }
    let total: f64 = segs.iter().map(|(a, b)| dist(*a, *b)).sum();
    if total == 0.0 {
        // Only isolated pixels: cycle through them.
        let verts: Vec<[f64; 2]> = polys.iter().flatten().copied().collect();
        return (0..n).map(|k| verts[k % verts.len()]).collect();
    }
    let step = total / n as f64;
    let targets: Vec<f64> = (0..n).map(|k| (phase + k as f64) * step).collect();
    walk(&segs, &targets)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Positions at the given (ascending) arc lengths along `segs`.
fn walk(segs: &[([f64; 2], [f64; 2])], targets: &[f64]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(targets.len());
    let mut acc = 0.0;
    let mut si = 0;
    for &t in targets {
        while si + 1 < segs.len() && acc + dist(segs[si].0, segs[si].1) < t {
            acc += dist(segs[si].0, segs[si].1);
            si += 1;
        }
        let (a, b) = segs[si];
        let len = dist(a, b);
        let f = if len > 0.0 { ((t - acc) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
    }
    out
}

/// `n` points at equal arc-length spacing. Open polylines include both
/// endpoints; a closed one (first vertex == last) is split into `n` equal
/// arcs starting at the first vertex.
pub fn points_from_scribble(polyline: &[[f64; 2]], n: usize) -> Result<PointSet> {
    if polyline.len() < 2 {
        return Err(Error::Geometry("scribble needs at least 2 vertices".into()));
    }
    if n == 0 {
        return Err(Error::Contract("scribble point count must be positive".into()));
    }
    if let Some(p) = polyline.iter().find(|p| !in_unit(p)) {
        return Err(Error::Geometry(format!("scribble vertex {p:?} outside [0,1]^2")));
    }
    let segs: Vec<_> = polyline.windows(2).map(|w| (w[0], w[1])).collect();
    let total: f64 = segs.iter().map(|(a, b)| dist(*a, *b)).sum();
    if total <= 0.0 {
        return Err(Error::Geometry("zero-length scribble".into()));
    }
    let closed = polyline.first() == polyline.last();
    let targets: Vec<f64> = if closed {
        (0..n).map(|k| k as f64 * total / n as f64).collect()
    } else if n == 1 {
        vec![0.0]
    } else {
        (0..n).map(|k| k as f64 * total / (n - 1) as f64).collect()
    };
    let mut pts = walk(&segs, &targets);
    if !closed && n > 1 {
        // Exact endpoint, free of accumulated rounding.
        pts[n - 1] = *polyline.last().unwrap();
    }
    for p in &mut pts {
        p[0] = p[0].clamp(0.0, 1.0);
        p[1] = p[1].clamp(0.0, 1.0);
    }
    PointSet::new(Format::Scribble, pts, n)
}

pub const POINT_RADIUS_FACTOR: f64 = 0.1;

/// One point uniform in the disc of radius `0.1 * min(w, h)` around the
/// box centre.
pub fn synthesize_point<R: Rng + ?Sized>(b: &BoxGeometry, rng: &mut R) -> Result<PointSet> {
    b.validate()?;
    let radius = POINT_RADIUS_FACTOR * b.width().min(b.height());
    let rho = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    let c = b.center();
    let p = [
        (c[0] + rho * theta.cos()).clamp(0.0, 1.0),
        (c[1] + rho * theta.sin()).clamp(0.0, 1.0),
    ];
    point_set(p)
}

/// Fourier features of the real (non-padding) points:
/// per point, per coordinate, per `j < bandwidth`,
/// `[sin(2 pi 2^j c), cos(2 pi 2^j c)]`.
pub fn fourier_embed(ps: &PointSet, bandwidth: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ps.points.len() * 4 * bandwidth);
    for p in &ps.points {
        out.extend(fourier_point(*p, bandwidth));
    }
    out
}

pub fn fourier_point(p: [f64; 2], bandwidth: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * bandwidth);
    for c in p {
        for j in 0..bandwidth {
            let a = 2.0 * PI * (1u64 << j) as f64 * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}
