//! Closed shape-world vocabulary, scene layouts and the layout JSON schema.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locations::{
    point_set, points_from_box, points_from_mask, points_from_scribble, BoxGeometry, Format,
    LocationConfig, MaskGeometry, PointSet,
};

pub const COLORS: [&str; 8] = ["black", "white", "red", "green", "yellow", "blue", "pink", "purple"];
pub const TEXTURES: [&str; 4] = ["solid", "striped", "dotted", "checker"];
pub const CATEGORIES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const NUMBERS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];
const GLUE: [&str; 9] = ["a", "an", "the", "scene", "with", "shape", "shapes", "and", "of"];

pub const MAX_CAPTION_TOKENS: usize = 8;

/// The closed word list, in id order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = Vec::new();
    v.extend(GLUE);
    v.extend(NUMBERS);
    v.extend(COLORS);
    v.extend(TEXTURES);
    v.extend(CATEGORIES);
    v
}

pub fn vocab_size() -> usize {
    GLUE.len() + NUMBERS.len() + COLORS.len() + TEXTURES.len() + CATEGORIES.len()
}

pub fn word_id(word: &str) -> Option<usize> {
    vocabulary().iter().position(|w| *w == word)
}

/// Up to [`MAX_CAPTION_TOKENS`] vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CaptionTokens {
    ids: Vec<usize>,
}

impl CaptionTokens {
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_ascii_lowercase())
            .collect();
        if words.is_empty() {
            return Err(Error::Vocabulary(format!("caption {text:?} has no words")));
        }
        if words.len() > MAX_CAPTION_TOKENS {
            return Err(Error::Vocabulary(format!(
                "caption {text:?} has {} words, max {MAX_CAPTION_TOKENS}",
                words.len()
            )));
        }
        let ids = words
            .iter()
            .map(|w| word_id(w).ok_or_else(|| Error::Vocabulary(format!("unknown word {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ids })
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_CAPTION_TOKENS {
            return Err(Error::Vocabulary(format!("caption length {}", ids.len())));
        }
        if let Some(id) = ids.iter().find(|&&i| i >= vocab_size()) {
            return Err(Error::Vocabulary(format!("id {id} outside vocabulary")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn text(&self) -> String {
        let v = vocabulary();
        self.ids.iter().map(|&i| v[i]).collect::<Vec<_>>().join(" ")
    }

    fn find(&self, words: &[&str]) -> Option<usize> {
        let v = vocabulary();
        self.ids.iter().find_map(|&i| words.iter().position(|w| *w == v[i]))
    }

    /// Index into [`COLORS`] of the first colour word, if any.
    pub fn color(&self) -> Option<usize> {
        self.find(&COLORS)
    }

    pub fn texture(&self) -> Option<usize> {
        self.find(&TEXTURES)
    }

    pub fn category(&self) -> Option<usize> {
        self.find(&CATEGORIES)
    }
}

pub fn instance_caption(color: usize, texture: usize, category: usize) -> String {
    format!("{} {} {}", COLORS[color], TEXTURES[texture], CATEGORIES[category])
}

pub fn scene_caption(count: usize) -> String {
    match NUMBERS.get(count) {
        Some(n) if count == 1 => format!("a scene with {n} shape"),
        Some(n) => format!("a scene with {n} shapes"),
        None => "a scene with shapes".to_string(),
    }
}

/// Region used to decide which visual tokens an instance may interact with.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Box(BoxGeometry),
    Mask(MaskGeometry),
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Region::Box(b) => b.contains(p),
            Region::Mask(m) => m.contains(p),
        }
    }

    pub fn bbox(&self) -> BoxGeometry {
        match self {
            Region::Box(b) => *b,
            Region::Mask(m) => m.bbox(),
        }
    }
}

/// Side of the square region assumed around a bare point.
pub const POINT_REGION_SIDE: f64 = 0.25;

/// One instance: caption plus any subset of the four formats.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCondition {
    pub caption: CaptionTokens,
    sets: [Option<PointSet>; 4],
    mask: Option<MaskGeometry>,
    /// Ground-truth box used as the region of point/scribble-only instances
    /// during training.
    pub source_box: Option<BoxGeometry>,
}

impl InstanceCondition {
    pub fn new(caption: CaptionTokens) -> Self {
        Self {
            caption,
            sets: Default::default(),
            mask: None,
            source_box: None,
        }
    }

    pub fn with(mut self, ps: PointSet) -> Self {
        let i = ps.format().index();
        self.sets[i] = Some(ps);
        self
    }

    pub fn with_mask(mut self, m: MaskGeometry, ps: PointSet) -> Self {
        self.mask = Some(m);
        self.with(ps)
    }

    pub fn get(&self, f: Format) -> Option<&PointSet> {
        self.sets[f.index()].as_ref()
    }

    /// The presence flag `s_f`.
    pub fn present(&self, f: Format) -> bool {
        self.sets[f.index()].is_some()
    }

    pub fn any_present(&self) -> bool {
        self.sets.iter().any(Option::is_some)
    }

    pub fn mask_raster(&self) -> Option<&MaskGeometry> {
        self.mask.as_ref()
    }

    pub fn drop_format(&mut self, f: Format) {
        self.sets[f.index()] = None;
        if f == Format::Mask {
            self.mask = None;
        }
    }

    pub fn drop_all(&mut self) {
        for f in Format::ALL {
            self.drop_format(f);
        }
    }

    /// Mask if given, else box, else the training box, else the scribble's
    /// bounds, else a square around the point. `None` when every format is
    /// null.
    pub fn region(&self) -> Option<Region> {
        if !self.any_present() {
            return None;
        }
        if let (Some(_), Some(m)) = (self.get(Format::Mask), &self.mask) {
            return Some(Region::Mask(m.clone()));
        }
        if let Some(b) = self.get(Format::Box) {
            let p = b.points();
            return BoxGeometry::new(p[0][0], p[0][1], p[1][0], p[1][1]).ok().map(Region::Box);
        }
        if let Some(b) = self.source_box {
            return Some(Region::Box(b));
        }
        if let Some(s) = self.get(Format::Scribble) {
            let [x0, y0, x1, y1] = s.bounds();
            let grow = |a: f64, b: f64| {
                let m = POINT_REGION_SIDE / 4.0;
                if b - a >= m {
                    (a, b)
                } else {
                    let c = (a + b) / 2.0;
                    ((c - m / 2.0).max(0.0), (c + m / 2.0).min(1.0))
                }
            };
            let (x0, x1) = grow(x0, x1);
            let (y0, y1) = grow(y0, y1);
            return BoxGeometry::new(x0, y0, x1, y1).ok().map(Region::Box);
        }
        let p = self.get(Format::Point)?.points()[0];
        BoxGeometry::around(p, POINT_REGION_SIDE).ok().map(Region::Box)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub caption: CaptionTokens,
    pub instances: Vec<InstanceCondition>,
}

impl SceneLayout {
    pub fn new(caption: CaptionTokens, instances: Vec<InstanceCondition>) -> Self {
        Self { caption, instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Same scene with every location format nulled.
    pub fn nulled(&self) -> Self {
        let mut out = self.clone();
        for inst in &mut out.instances {
            inst.drop_all();
        }
        out
    }

    /// Layout holding only instance `i` (plus the global caption).
    pub fn only(&self, i: usize) -> Self {
        Self {
            caption: self.caption.clone(),
            instances: vec![self.instances[i].clone()],
        }
    }

    /// Builds model-ready conditions from the wire schema. Mask point
    /// sampling is seeded per instance from `seed`.
    pub fn from_spec(spec: &LayoutSpec, cfg: &LocationConfig, seed: u64) -> Result<Self> {
        let caption = CaptionTokens::parse(&spec.caption)?;
        let mut instances = Vec::with_capacity(spec.instances.len());
        for (i, is) in spec.instances.iter().enumerate() {
            let mut ic = InstanceCondition::new(CaptionTokens::parse(&is.caption)?);
            if is.point.is_none() && is.scribble.is_none() && is.bbox.is_none() && is.mask_rle.is_none() {
                return Err(Error::Schema(format!("instance {i} has no location")));
            }
            if let Some(p) = is.point {
                ic = ic.with(point_set(p)?);
            }
            if let Some(s) = &is.scribble {
                // A scribble already at the point budget is its own parameterization.
                let ps = if s.len() == cfg.scribble_points {
                    PointSet::new(Format::Scribble, s.clone(), cfg.scribble_points)?
                } else {
                    points_from_scribble(s, cfg.scribble_points)?
                };
                ic = ic.with(ps);
            }
            if let Some([x0, y0, x1, y1]) = is.bbox {
                ic = ic.with(points_from_box(&BoxGeometry::new(x0, y0, x1, y1)?)?);
            }
            if let Some(rle) = &is.mask_rle {
                let m = rle_decode(rle)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
                let ps = points_from_mask(&m, cfg.mask_points, &mut rng)?;
                ic = ic.with_mask(m, ps);
            }
            instances.push(ic);
        }
        Ok(Self { caption, instances })
    }
}

/// Layout wire format shared by the dataset shards and the HTTP service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub caption: String,
    #[serde(default)]
    pub instances: Vec<InstanceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scribble: Option<Vec<[f64; 2]>>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<String>,
}

impl InstanceSpec {
    pub fn new(caption: impl Into<String>) -> Self {
        Self {
            caption: caption.into(),
            point: None,
            scribble: None,
            bbox: None,
            mask_rle: None,
        }
    }
}

impl LayoutSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serializes")
    }

    /// Parses and validates every caption and geometry.
    pub fn validate(&self, cfg: &LocationConfig) -> Result<()> {
        SceneLayout::from_spec(self, cfg, 0).map(|_| ())
    }
}

/// `"<h>x<w>:<runs>"`, runs alternating unset/set starting with unset,
/// row-major.
pub fn rle_encode(m: &MaskGeometry) -> String {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut n = 0usize;
    for &b in m.bits() {
        if b == cur {
            n += 1;
        } else {
            runs.push(n);
            cur = b;
            n = 1;
        }
    }
    runs.push(n);
    let body: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
    format!("{}x{}:{}", m.height(), m.width(), body.join(","))
}

pub fn rle_decode(s: &str) -> Result<MaskGeometry> {
    let bad = |why: &str| Error::Schema(format!("mask_rle {why}"));
    let (dims, body) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
    let (h, w) = dims.split_once('x').ok_or_else(|| bad("dims must be HxW"))?;
    let h: usize = h.trim().parse().map_err(|_| bad("bad height"))?;
    let w: usize = w.trim().parse().map_err(|_| bad("bad width"))?;
    if h == 0 || w == 0 || h * w > 1 << 24 {
        return Err(bad("bad size"));
    }
    let mut bits = Vec::with_capacity(h * w);
    let mut cur = false;
    for run in body.split(',') {
        let n: usize = run.trim().parse().map_err(|_| bad("bad run"))?;
        if bits.len() + n > h * w {
            return Err(bad("runs exceed raster"));
        }
        bits.extend(std::iter::repeat_n(cur, n));
        cur = !cur;
    }
    if bits.len() != h * w {
        return Err(bad("runs do not cover raster"));
    }
    MaskGeometry::new(h, w, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_parsing() {
        let c = CaptionTokens::parse("Red striped STAR").unwrap();
        assert_eq!(c.text(), "red striped star");
        assert_eq!(c.color(), Some(2));
        assert_eq!(c.texture(), Some(1));
        assert_eq!(c.category(), Some(3));
        assert!(matches!(CaptionTokens::parse("  , "), Err(Error::Vocabulary(_))));
        assert!(matches!(CaptionTokens::parse("red dragon"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn rle_roundtrip() {
        let bits: Vec<bool> = (0..35).map(|i| i % 7 > 2).collect();
        let m = MaskGeometry::new(5, 7, bits).unwrap();
        let s = rle_encode(&m);
        assert_eq!(rle_decode(&s).unwrap(), m);
        assert!(rle_decode("2x2:1,2").is_err());
    }
}
