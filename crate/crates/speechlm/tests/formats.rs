use std::fs;

use serde_json::json;
use speechlm::checkpoint::{Checkpoint, MAGIC};
use speechlm::corpus_io::{read_corpus, read_manifest, write_corpus, MANIFEST};
use speechlm::Error;
use speechlm_core::corpus::{Generator, GeneratorConfig};
use speechlm_core::{ParamStore, Tensor};

fn small_corpus() -> Vec<speechlm_core::corpus::CorpusExample> {
    let gen = Generator::new(GeneratorConfig {
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    gen.examples(0..6)
}

#[test]
fn corpus_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let examples = small_corpus();
    write_corpus(&examples, dir.path()).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.len(), examples.len());
    for (a, b) in examples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.source_tokens, b.source_tokens);
        assert_eq!(a.target_tokens, b.target_tokens);
        assert_eq!(a.features.shape(), b.features.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features), bits(&b.features));
    }
}

#[test]
fn truncated_feature_file_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let examples = small_corpus();
    write_corpus(&examples, dir.path()).unwrap();
    let path = dir.path().join(format!("features/{}.slfb", examples[2].id));
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match read_corpus(dir.path()) {
        Err(Error::Integrity { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn manifest_ignores_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&small_corpus()[..2], dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    let extended: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["speaker"] = json!("unknown");
            format!("{v}\n")
        })
        .collect();
    fs::write(&path, extended).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap().len(), 2);
    assert_eq!(read_corpus(dir.path()).unwrap().len(), 2);
}

#[test]
fn malformed_manifest_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&small_corpus()[..3], dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[1] = "{\"id\": 3".into();
    fs::write(&path, lines.join("\n")).unwrap();
    match read_manifest(dir.path()) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected manifest error, got {other:?}"),
    }
}

fn store() -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("lm.embed", Tensor::from_fn(&[3, 2], |i| i as f32 * 0.25 - 0.3), true).unwrap();
    s.add("lm.norm", Tensor::full(&[2], 1.0), true).unwrap();
    s.add("audio_encoder.proj.weight", Tensor::from_fn(&[2, 2], |i| (i as f32).sin()), false).unwrap();
    s
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let s = store();
    let mut ck = Checkpoint::from_store(&s, json!({"step": 7, "stage": "stage1"}));
    ck.push("extra.f64".into(), &Tensor::<f64>::from_fn(&[2, 3], |i| 1.0 / (i as f64 + 3.0)), false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.slmk");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode().unwrap(), fs::read(&path).unwrap());
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let mut bytes = Checkpoint::from_store(&store(), json!({})).encode().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[0] = b'X';
    let err = Checkpoint::decode(&bytes, "x.slmk".as_ref()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let bytes = Checkpoint::from_store(&store(), json!({"k": 1})).encode().unwrap();
    for cut in [5, 20, bytes.len() - 1] {
        let err = Checkpoint::decode(&bytes[..cut], "x.slmk".as_ref()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
    }
}

#[test]
fn prefix_load_leaves_other_params_untouched() {
    let src = store();
    let ck = Checkpoint::from_store(&src, json!({}));
    let mut dst = ParamStore::new();
    dst.add("lm.embed", Tensor::zeros(&[3, 2]), true).unwrap();
    dst.add("lm.norm", Tensor::zeros(&[2]), true).unwrap();
    let other = dst.add("audio_encoder.proj.weight", Tensor::full(&[2, 2], 9.0), false).unwrap();
    assert_eq!(ck.load_into(&mut dst, "lm.").unwrap(), 2);
    assert_eq!(dst.by_name("lm.embed").unwrap().tensor, src.by_name("lm.embed").unwrap().tensor);
    assert_eq!(dst.tensor(other), &Tensor::full(&[2, 2], 9.0));
}

#[test]
fn unknown_names_are_listed() {
    let ck = Checkpoint::from_store(&store(), json!({}));
    let mut dst = ParamStore::new();
    dst.add("lm.embed", Tensor::<f32>::zeros(&[3, 2]), true).unwrap();
    match ck.load_into(&mut dst, "") {
        Err(Error::UnknownTensors(names)) => {
            assert_eq!(names, vec!["lm.norm".to_string(), "audio_encoder.proj.weight".to_string()])
        }
        other => panic!("expected unknown tensors, got {other:?}"),
    }
}

#[test]
fn load_keeps_model_freeze_flags() {
    let ck = Checkpoint::from_store(&store(), json!({}));
    let mut dst = store();
    dst.get_mut(dst.id("lm.norm").unwrap()).frozen = false;
    ck.load_into(&mut dst, "").unwrap();
    assert!(!dst.by_name("lm.norm").unwrap().frozen);
}
