//! Checksummed dataset shards.
//!
//! Layout: `"IDSW"`, u32 version, u32 header length, header JSON, then per
//! record u32 PNG length, PNG bytes, u32 JSON length, record JSON (scene and
//! layout); a crc32 of everything before it closes the file. All integers
//! are little-endian.

use std::io::Write;
use std::path::Path;

use instdiff_core::layout::LayoutSpec;
use instdiff_core::locations::LocationConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive::{layout_spec, scene_layout};
use crate::image::RgbImage;
use crate::scene::{rasterize, scene_for_index, Scene, SceneConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"IDSW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardHeader {
    pub count: usize,
    pub seed: u64,
    /// Index of the first record within the dataset.
    pub offset: u64,
    pub config_hash: String,
    pub scene: SceneConfig,
    pub locations: LocationConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardRecord {
    pub scene: Scene,
    pub image: RgbImage,
    pub layout: LayoutSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    scene: Scene,
    layout: LayoutSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub header: ShardHeader,
    pub records: Vec<ShardRecord>,
}

pub fn config_hash(scene: &SceneConfig, locations: &LocationConfig) -> String {
    let text = serde_json::to_string(&(scene, locations)).expect("config serializes");
    format!("{:08x}", crc32fast::hash(text.as_bytes()))
}

/// Record `index` of the dataset `(seed, cfg)`.
pub fn make_record(seed: u64, index: u64, scene_cfg: &SceneConfig, loc: &LocationConfig) -> Result<ShardRecord> {
    let scene = scene_for_index(seed, index, scene_cfg)?;
    let rendered = rasterize(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ 0x5eed);
    let layout = layout_spec(&scene_layout(&scene, &rendered, &mut rng, loc)?);
    Ok(ShardRecord {
        scene,
        image: rendered.image,
        layout,
    })
}

pub fn build_shard(
    seed: u64,
    offset: u64,
    count: usize,
    scene_cfg: &SceneConfig,
    loc: &LocationConfig,
) -> Result<DatasetShard> {
    scene_cfg.validate()?;
    let records = (0..count as u64)
        .map(|i| make_record(seed, offset + i, scene_cfg, loc))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetShard {
        header: ShardHeader {
            count,
            seed,
            offset,
            config_hash: config_hash(scene_cfg, loc),
            scene: scene_cfg.clone(),
            locations: loc.clone(),
        },
        records,
    })
}

fn put_block(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

impl DatasetShard {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.count != self.records.len() {
            return Err(Error::Format(format!(
                "header count {} but {} records",
                self.header.count,
                self.records.len()
            )));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_block(&mut out, serde_json::to_string(&self.header).expect("header serializes").as_bytes());
        for r in &self.records {
            put_block(&mut out, &r.image.to_png()?);
            let meta = RecordMeta {
                scene: r.scene.clone(),
                layout: r.layout.clone(),
            };
            put_block(&mut out, serde_json::to_string(&meta).expect("record serializes").as_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses and verifies a shard. With `expected`, refuses shards built
    /// from another configuration.
    pub fn from_bytes(buf: &[u8], expected: Option<(&SceneConfig, &LocationConfig)>) -> Result<Self> {
        if buf.len() < 12 || &buf[..4] != MAGIC {
            return Err(Error::Format("not a shard file".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checksum);
        }
        let mut cur = Cursor { buf: body, pos: 4 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported shard version {version}")));
        }
        let header: ShardHeader =
            serde_json::from_slice(cur.block()?).map_err(|e| Error::Format(format!("header: {e}")))?;
        let own = config_hash(&header.scene, &header.locations);
        if own != header.config_hash {
            return Err(Error::ConfigMismatch {
                expected: own,
                found: header.config_hash,
            });
        }
        if let Some((s, l)) = expected {
            let want = config_hash(s, l);
            if want != header.config_hash {
                return Err(Error::ConfigMismatch {
                    expected: want,
                    found: header.config_hash,
                });
            }
        }
        let mut records = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let image = RgbImage::from_png(cur.block()?)?;
            let meta: RecordMeta =
                serde_json::from_slice(cur.block()?).map_err(|e| Error::Format(format!("record: {e}")))?;
            records.push(ShardRecord {
                scene: meta.scene,
                image,
                layout: meta.layout,
            });
        }
        if cur.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - cur.pos)));
        }
        Ok(Self { header, records })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated shard".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Writes through a temporary file so a crash never leaves a partial shard.
pub fn write_shard(path: impl AsRef<Path>, shard: &DatasetShard) -> Result<()> {
    let path = path.as_ref();
    let bytes = shard.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_shard(
    path: impl AsRef<Path>,
    expected: Option<(&SceneConfig, &LocationConfig)>,
) -> Result<DatasetShard> {
    DatasetShard::from_bytes(&std::fs::read(path)?, expected)
}
