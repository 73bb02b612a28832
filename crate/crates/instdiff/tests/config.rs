mod common;

use instdiff::RunConfig;

#[test]
fn defaults_validate_and_round_trip() {
    let d = RunConfig::default();
    d.validate().unwrap();
    let back = RunConfig::from_toml(&d.to_toml(), &[]).unwrap();
    assert_eq!(back.config, d);
    assert_eq!(RunConfig::from_toml("", &[]).unwrap().config, d);
}

#[test]
fn unknown_keys_are_rejected() {
    for bad in ["bogus = 1", "[train]\nstepz = 3", "[model.conditioning]\nheadz = 2"] {
        let e = RunConfig::from_toml(bad, &[]).unwrap_err();
        assert!(e.to_string().contains("unknown field"), "{e}");
    }
}

#[test]
fn overrides_apply_and_change_the_hash() {
    let base = RunConfig::from_toml(common::TINY_TOML, &[]).unwrap();
    let o = RunConfig::from_toml(common::TINY_TOML, &["train.steps=7".into(), "sample.mis_mode=\"off\"".into()]).unwrap();
    assert_eq!(o.config.train.steps, 7);
    assert_eq!(o.config.sample.mis_mode, instdiff_core::sampler::MisMode::Off);
    assert_ne!(o.hash, base.hash);
    let again = RunConfig::from_toml(common::TINY_TOML, &[]).unwrap();
    assert_eq!(again.hash, base.hash);
    assert!(RunConfig::from_toml("", &["nokey".into()]).is_err());
}

#[test]
fn mismatched_image_sizes_are_rejected() {
    assert!(RunConfig::from_toml("[model]\nimage_size = 32", &[]).is_err());
}
