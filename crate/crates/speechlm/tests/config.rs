use std::fs;

use speechlm::config::{config_hash, CompressorKind, ConfigDoc, MaskName, Variant};
use speechlm::Error;

#[test]
fn default_config_resolves_every_variant() {
    let doc = ConfigDoc::load(None).unwrap();
    for v in Variant::ALL {
        let cfg = doc.resolve(v).unwrap_or_else(|e| panic!("{v}: {e}"));
        assert_eq!(cfg.lora.enabled, matches!(v, Variant::E3 | Variant::E5), "{v}");
        assert_eq!(
            cfg.audio_encoder.mask == MaskName::PrefixNonCausal,
            matches!(v, Variant::E4 | Variant::E5),
            "{v}"
        );
        assert_eq!(cfg.compressor.kind == CompressorKind::Conv, v == Variant::E0, "{v}");
    }
    assert_eq!(doc.common().unwrap().decoding.beam, 4);
}

#[test]
fn e3_without_lora_names_the_constraint() {
    let text = r#"{"extends": "default", "variants": {"E3": {"lora": {"enabled": false}}}}"#;
    let doc = ConfigDoc::parse(text, "x.json".as_ref()).unwrap();
    let err = doc.resolve(Variant::E3).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("lora.enabled = true"), "{err}");
}

#[test]
fn e1_needs_blank_removal() {
    let text = r#"{"extends": "default", "variants": {"E1": {"compressor": {"mode": "frame_average"}}}}"#;
    let err = ConfigDoc::parse(text, "x.json".as_ref()).unwrap().resolve(Variant::E1).unwrap_err();
    assert!(err.to_string().contains("blank_remove"), "{err}");
}

#[test]
fn extends_a_file_relative_to_the_child() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("base.json"),
        r#"{"extends": "default", "seed": 11, "decoding": {"beam": 6}}"#,
    )
    .unwrap();
    let child = dir.path().join("child.json");
    fs::write(&child, r#"{"extends": "base.json", "seed": 12}"#).unwrap();
    let cfg = ConfigDoc::load(Some(&child)).unwrap().resolve(Variant::E2).unwrap();
    assert_eq!(cfg.seed, 12);
    assert_eq!(cfg.decoding.beam, 6);
    assert_eq!(cfg.decoding.max_len, 20);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = r#"{"extends": "default", "decoding": {"beams": 6}}"#;
    let err = ConfigDoc::parse(text, "x.json".as_ref()).unwrap().resolve(Variant::B1).unwrap_err();
    assert!(err.to_string().contains("beams"), "{err}");
}

#[test]
fn unknown_variant_names_are_rejected() {
    let text = r#"{"extends": "default", "variants": {"E9": {}}}"#;
    assert!(ConfigDoc::parse(text, "x.json".as_ref()).is_err());
    assert!("e3".parse::<Variant>().is_ok());
}

#[test]
fn hash_ignores_key_order() {
    let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
    let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1}"#).unwrap();
    assert_eq!(config_hash(&a), config_hash(&b));
    let c: serde_json::Value = serde_json::from_str(r#"{"b": [2, 1], "a": 1}"#).unwrap();
    assert_ne!(config_hash(&a), config_hash(&c));
}

#[test]
fn full_scale_reference_resolves() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/full_scale.json");
    let doc = ConfigDoc::load(Some(&path)).unwrap();
    for v in Variant::ALL {
        doc.resolve(v).unwrap_or_else(|e| panic!("{v}: {e}"));
    }
    let cfg = doc.resolve(Variant::E3).unwrap();
    let lora = speechlm::pipeline::lora_config(&cfg);
    assert_eq!(lora.scale(), 1.0);
    let d = cfg.lm.model_dim;
    assert_eq!(speechlm_core::lora::param_count(&lora, cfg.lm.n_layers, d, d).unwrap(), 2_097_152);
}
