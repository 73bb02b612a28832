//! Dataset files, training runs, checkpoints and the ablation driver.

use std::path::{Path, PathBuf};

use instdiff_core::layout::{LayoutSpec, SceneLayout};
use instdiff_core::model::{build_unet, Checkpoint, NoiseSchedule, TrainExample, Trainer, UNetConfig};
use instdiff_core::nn::ModelWeights;
use instdiff_core::sampler::{SampleOptions, SampleRequest, Sampler};
use instdiff_core::scaleu::ScaleUMode;
use instdiff_shapeworld::shard::build_shard;
use instdiff_shapeworld::{read_shard, write_shard, RgbImage, SceneConfig, ShardRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{LoadedConfig, RunConfig};
use crate::eval::{eval_run, EvalReport, TestItem, Variant};
use crate::{Error, Result};

/// Held-out scenes come from a different seed stream than training ones.
const TEST_SEED_SALT: u64 = 0x7e57_7e57_7e57_7e57;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn seed(self, cfg: &RunConfig) -> u64 {
        match self {
            Split::Train => cfg.dataset.seed,
            Split::Test => cfg.dataset.seed ^ TEST_SEED_SALT,
        }
    }

    fn scene(self, cfg: &RunConfig) -> &SceneConfig {
        match self {
            Split::Train => &cfg.dataset.scene,
            Split::Test => &cfg.dataset.test_scene,
        }
    }

    fn count(self, cfg: &RunConfig) -> usize {
        match self {
            Split::Train => cfg.dataset.train_count,
            Split::Test => cfg.dataset.test_count,
        }
    }
}

/// Writes `<split>-NNNNN.shard` files and returns their paths.
pub fn write_dataset(cfg: &RunConfig, split: Split, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (total, size) = (split.count(cfg), cfg.dataset.shard_size);
    let loc = &cfg.model.conditioning.location;
    let mut paths = Vec::new();
    let mut offset = 0;
    while offset < total {
        let n = size.min(total - offset);
        let shard = build_shard(split.seed(cfg), offset as u64, n, split.scene(cfg), loc)?;
        let p = dir.join(format!("{}-{:05}.shard", split.prefix(), paths.len()));
        write_shard(&p, &shard)?;
        paths.push(p);
        offset += n;
    }
    Ok(paths)
}

/// All records of one split, in shard order. Shards built from another
/// configuration are refused.
pub fn read_dataset(cfg: &RunConfig, split: Split, dir: &Path) -> Result<Vec<ShardRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "shard")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(split.prefix()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no {} shards in {}", split.prefix(), dir.display())));
    }
    let expected = (split.scene(cfg), &cfg.model.conditioning.location);
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_shard(&p, Some(expected))?.records);
    }
    Ok(out)
}

/// Training examples; mask point samples are seeded by record index.
pub fn train_examples(records: &[ShardRecord], cfg: &UNetConfig) -> Result<Vec<TrainExample<f32>>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(TrainExample {
                image: r.image.to_tensor(),
                layout: SceneLayout::from_spec(&r.layout, &cfg.conditioning.location, i as u64)?,
            })
        })
        .collect()
}

/// Held-out items with per-layout seeds `seed + index`; `limit` 0 keeps all.
pub fn test_items(records: &[ShardRecord], seed: u64, limit: usize) -> Vec<TestItem> {
    let n = if limit == 0 { records.len() } else { limit.min(records.len()) };
    records[..n]
        .iter()
        .enumerate()
        .map(|(i, r)| TestItem {
            layout: r.layout.clone(),
            seed: seed.wrapping_add(i as u64),
            image: Some(r.image.clone()),
        })
        .collect()
}

/// Inference-ready model restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub config: RunConfig,
    pub config_hash: String,
    pub sched: NoiseSchedule,
    pub weights: ModelWeights<f32>,
    pub step: usize,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        let config: RunConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        config.validate()?;
        Ok(Self {
            sched: NoiseSchedule::new(&config.schedule)?,
            config_hash: ck.meta["config_hash"].as_str().unwrap_or_default().to_string(),
            step: ck.meta["step"].as_u64().unwrap_or(0) as usize,
            weights: ck.inference_weights().clone(),
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Untrained weights for `config`, as a baseline.
    pub fn untrained(config: RunConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            sched: NoiseSchedule::new(&config.schedule)?,
            weights: build_unet(&config.model, seed)?,
            config_hash: String::new(),
            step: 0,
            config,
        })
    }

    /// Renders a wire layout. Mask point samples are seeded by `opts.seed`,
    /// so `(layout, opts)` fully determines the image.
    pub fn generate(&self, layout: &LayoutSpec, opts: &SampleOptions) -> Result<RgbImage> {
        opts.validate(&self.sched)?;
        let layout = SceneLayout::from_spec(layout, &self.config.model.conditioning.location, opts.seed)?;
        let sampler = Sampler::new(&self.weights, &self.config.model, &self.sched);
        let out = sampler.generate(&SampleRequest {
            layout,
            opts: opts.clone(),
        })?;
        Ok(RgbImage::new(out.width, out.height, out.rgb)?)
    }

    pub fn evaluate(&self, items: &[TestItem], variants: &[Variant]) -> Result<Vec<EvalReport>> {
        eval_run(
            &self.weights,
            &self.config.model,
            &self.sched,
            items,
            &self.config.sample,
            variants,
            |v, k| {
                if (k + 1) % 50 == 0 {
                    tracing::info!("eval {}: {} done", v.name(), k + 1);
                }
            },
        )
    }
}

pub fn checkpoint_meta(cfg: &LoadedConfig, step: usize) -> serde_json::Value {
    json!({
        "config": cfg.config,
        "config_hash": cfg.hash,
        "step": step,
    })
}

/// Trains from scratch, writing `out` every `checkpoint_every` steps and
/// at the end. `on_step` sees `(step, loss)`.
pub fn run_training(
    cfg: &LoadedConfig,
    data: &[TrainExample<f32>],
    out: &Path,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Checkpoint<f32>> {
    let rc = &cfg.config;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let sched = NoiseSchedule::new(&rc.schedule)?;
    let weights = build_unet(&rc.model, rc.train.seed)?;
    let mut trainer = Trainer::new(rc.model.clone(), rc.train.clone(), weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed ^ 0x7472_6169_6e);
    let snapshot = |t: &Trainer<f32>| Checkpoint {
        meta: checkpoint_meta(cfg, t.step),
        raw: t.weights.clone(),
        ema: Some(t.ema.shadow.clone()),
    };
    while trainer.step < rc.train.steps {
        let batch: Vec<TrainExample<f32>> = (0..rc.train.batch)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let loss = trainer.step(&batch, &sched, &mut rng)?;
        on_step(trainer.step, loss);
        if rc.checkpoint_every > 0 && trainer.step % rc.checkpoint_every == 0 && trainer.step < rc.train.steps {
            snapshot(&trainer).save(out)?;
        }
    }
    let ck = snapshot(&trainer);
    ck.save(out)?;
    Ok(ck)
}

/// Components the ablation can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    MaskedAttention,
    Scaleu,
    FormatAware,
    Mis,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::MaskedAttention, Ablation::Scaleu, Ablation::FormatAware, Ablation::Mis];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MaskedAttention => "masked-attention",
            Ablation::Scaleu => "scaleu",
            Ablation::FormatAware => "format-aware",
            Ablation::Mis => "mis",
        }
    }

    /// The metric expected to drop, and the conditioning variant it is
    /// measured on.
    pub fn target(self) -> (&'static str, Variant) {
        match self {
            Ablation::MaskedAttention => ("acc_color", Variant::Hybrid),
            Ablation::Scaleu => ("mean_iou", Variant::Mask),
            Ablation::FormatAware => ("pim_point", Variant::Point),
            Ablation::Mis => ("acc_color", Variant::Hybrid),
        }
    }

    /// Whether the switch changes the trained model or only sampling.
    pub fn needs_training(self) -> bool {
        self != Ablation::Mis
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::MaskedAttention => cfg.model.conditioning.masked_attention = false,
            Ablation::Scaleu => cfg.model.scaleu.mode = ScaleUMode::Off,
            Ablation::FormatAware => cfg.model.conditioning.format_aware = false,
            Ablation::Mis => cfg.sample.mis_fraction = 0.0,
        }
    }
}

pub fn metric(r: &EvalReport, name: &str) -> f64 {
    match name {
        "pim_point" => r.pim_point,
        "pim_scribble" => r.pim_scribble,
        "mean_iou" => r.mean_iou,
        "box_recall50" => r.box_recall50,
        _ => r.acc_color,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub off: Ablation,
    pub metric: String,
    pub variant: Variant,
    pub baseline: Vec<f64>,
    pub ablated: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Every per-seed delta is negative.
    pub all_negative: bool,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<18} {:<10} {:<9} {}\n", "off", "metric", "variant", "deltas (ablated - full)");
    for r in rows {
        let d: Vec<String> = r.deltas.iter().map(|d| format!("{d:+.3}")).collect();
        s.push_str(&format!(
            "{:<18} {:<10} {:<9} {}  {}\n",
            r.off.name(),
            r.metric,
            r.variant.name(),
            d.join(" "),
            if r.all_negative { "negative" } else { "not all negative" }
        ));
    }
    s
}

/// Trains the full model and each ablated variant per seed, evaluates the
/// target metric of each switch and reports per-seed deltas.
pub fn run_ablation(
    cfg: &LoadedConfig,
    data: &[TrainExample<f32>],
    items: &[TestItem],
    offs: &[Ablation],
    seeds: &[u64],
    work_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(work_dir)?;
    let with_seed = |c: &RunConfig, s: u64| {
        let mut c = c.clone();
        c.train.seed = s;
        c
    };
    let train = |c: RunConfig, tag: &str| -> Result<LoadedModel> {
        let lc = LoadedConfig {
            config: c,
            hash: format!("{}+{tag}", cfg.hash),
        };
        let ck = run_training(&lc, data, &work_dir.join(format!("{tag}.ckpt")), |s, l| {
            if s % 100 == 0 {
                tracing::info!("{tag} step {s} loss {l:.4}");
            }
        })?;
        LoadedModel::from_checkpoint(&ck)
    };
    let mut rows: Vec<AblationRow> = offs
        .iter()
        .map(|&o| AblationRow {
            off: o,
            metric: o.target().0.into(),
            variant: o.target().1,
            baseline: vec![],
            ablated: vec![],
            deltas: vec![],
            all_negative: false,
        })
        .collect();
    for &s in seeds {
        let base = train(with_seed(&cfg.config, s), &format!("full-s{s}"))?;
        for row in rows.iter_mut() {
            let (name, variant) = row.off.target();
            let b = metric(&base.evaluate(items, &[variant])?[0], name);
            let mut ac = with_seed(&cfg.config, s);
            row.off.apply(&mut ac);
            let ablated = if row.off.needs_training() {
                train(ac, &format!("{}-s{s}", row.off.name()))?
            } else {
                LoadedModel {
                    config: ac,
                    ..base.clone()
                }
            };
            let a = metric(&ablated.evaluate(items, &[variant])?[0], name);
            row.baseline.push(b);
            row.ablated.push(a);
            row.deltas.push(a - b);
        }
    }
    for row in rows.iter_mut() {
        row.all_negative = !row.deltas.is_empty() && row.deltas.iter().all(|d| *d < 0.0);
    }
    Ok(rows)
}
