#![allow(dead_code)]

use instdiff::pipeline::LoadedModel;
use instdiff::RunConfig;
use instdiff_core::layout::{InstanceSpec, LayoutSpec};
use instdiff_core::tensor::Tensor;

/// 16x16 model and data small enough for per-test generation.
pub const TINY_TOML: &str = r#"
checkpoint_every = 0
log_every = 1

[dataset]
train_count = 6
test_count = 4
shard_size = 4

[dataset.scene]
image_size = 16
max_instances = 2
min_size = 6.0
max_size = 6.5

[dataset.test_scene]
image_size = 16
max_instances = 2
min_size = 6.0
max_size = 6.5
allow_overlap = false

[model]
image_size = 16
widths = [8, 16]
res_blocks = 1
groups = 2
time_dim = 8
site_resolutions = [16, 8]

[model.conditioning]
text_dim = 8
token_dim = 8
tokenizer_hidden = 8
heads = 2

[model.conditioning.location]
bandwidth = 2
scribble_points = 4
mask_points = 8

[schedule]
steps = 50

[train]
steps = 2
batch = 2
micro_batch = 1
warmup = 1

[sample]
steps = 3
mis_fraction = 0.34

[eval]
layouts = 4
"#;

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_TOML, &[]).unwrap().config
}

/// Untrained tiny model with open fusion gates, so instances affect the
/// output.
pub fn tiny_model() -> LoadedModel {
    let mut m = LoadedModel::untrained(tiny_config(), 9).unwrap();
    let gates: Vec<String> = m.weights.iter().map(|(k, _)| k.clone()).filter(|k| k.ends_with(".gate")).collect();
    assert!(!gates.is_empty());
    for g in gates {
        m.weights.set(&g, Tensor::scalar(1.0f32)).unwrap();
    }
    m
}

pub fn one_box_layout(x0: f64, y0: f64, x1: f64, y1: f64) -> LayoutSpec {
    let mut i = InstanceSpec::new("red solid circle");
    i.bbox = Some([x0, y0, x1, y1]);
    LayoutSpec {
        caption: "a scene with one shape".into(),
        instances: vec![i],
    }
}
