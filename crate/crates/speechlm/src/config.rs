//! Experiment configuration: one JSON document, optionally extending a base
//! file, with per-system overlays under `variants`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, Error, Result};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    B1,
    B2,
    D1,
    E0,
    E1,
    E2,
    E3,
    E4,
    E5,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::B1,
        Variant::B2,
        Variant::D1,
        Variant::E0,
        Variant::E1,
        Variant::E2,
        Variant::E3,
        Variant::E4,
        Variant::E5,
    ];

    pub fn is_speech_llm(self) -> bool {
        matches!(
            self,
            Variant::E0 | Variant::E1 | Variant::E2 | Variant::E3 | Variant::E4 | Variant::E5
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of B1 B2 D1 E0-E5")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub feature_dim: usize,
    pub duration_range: (usize, usize),
    pub noise_sigma: f64,
    pub utterance_length_range: (usize, usize),
    pub num_languages: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub instruction_fraction: f64,
    pub filler_prob: f64,
    pub repeat_prob: f64,
    pub doc_length_range: (usize, usize),
    /// Held-out documents for validation.
    pub n_valid_docs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Ctc,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionModeName {
    BlankRemove,
    FrameAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorSection {
    pub kind: CompressorKind,
    pub mode: CompressionModeName,
    pub drop_blank_runs: bool,
    pub channels: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskName {
    Causal,
    PrefixNonCausal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioEncoderSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub mask: MaskName,
    /// Insert BOS between the audio and the targets.
    pub bos_separator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    /// Defaults to `2 * rank` when absent.
    pub alpha: Option<f64>,
    pub init_std: f64,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2SeqSection {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub channels: usize,
    pub ctc_weight_train: f64,
    pub ctc_weight_decode: f64,
    pub n_best: usize,
    pub mu_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScratchSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub lm: StageConfig,
    pub ctc: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub scratch: StageConfig,
    pub seq2seq: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSection {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub lm: LmConfig,
    pub compressor: CompressorSection,
    pub audio_encoder: AudioEncoderSection,
    pub lora: LoraSection,
    pub seq2seq: Seq2SeqSection,
    pub scratch: ScratchSection,
    pub training: TrainingSection,
    pub decoding: DecodingSection,
}

/// A config document before a variant overlay is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDoc {
    pub base: Value,
    pub variants: BTreeMap<String, Value>,
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn parse_doc(text: &str, origin: &Path, depth: usize) -> Result<Value> {
    if depth > 8 {
        return Err(Error::Config(format!("{}: `extends` chain too deep", origin.display())));
    }
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
    let parent = match v.as_object_mut().and_then(|o| o.remove("extends")) {
        None => return Ok(v),
        Some(Value::String(p)) => p,
        Some(_) => return Err(Error::Config(format!("{}: `extends` must be a path string", origin.display()))),
    };
    let mut base = if parent == "default" {
        parse_doc(DEFAULT_CONFIG, Path::new("<default>"), depth + 1)?
    } else {
        let path = origin.parent().unwrap_or(Path::new(".")).join(&parent);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        parse_doc(&text, &path, depth + 1)?
    };
    merge(&mut base, &v);
    Ok(base)
}

impl ConfigDoc {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut base = parse_doc(text, origin, 0)?;
        let variants = match base.as_object_mut().and_then(|o| o.remove("variants")) {
            None => BTreeMap::new(),
            Some(Value::Object(m)) => m.into_iter().collect(),
            Some(_) => return Err(Error::Config("`variants` must be an object".into())),
        };
        for k in variants.keys() {
            k.parse::<Variant>()?;
        }
        Ok(Self { base, variants })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                Self::parse(&text, p)
            }
            None => Self::parse(DEFAULT_CONFIG, Path::new("<default>")),
        }
    }

    /// Shared settings (no overlay).
    pub fn common(&self) -> Result<ExperimentConfig> {
        serde_json::from_value(self.base.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Settings for one system, validated against its constraints.
    pub fn resolve(&self, variant: Variant) -> Result<ExperimentConfig> {
        let mut v = self.base.clone();
        if let Some(o) = self.variants.get(&variant.to_string()) {
            merge(&mut v, o);
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("{variant}: {e}")))?;
        cfg.validate_variant(variant)?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn validate_variant(&self, variant: Variant) -> Result<()> {
        let fail = |what: &str| Err(Error::Config(format!("variant {variant} requires {what}")));
        let c = &self.compressor;
        match variant {
            Variant::E0 if c.kind != CompressorKind::Conv => return fail("compressor.kind = conv"),
            Variant::E1 if (c.kind, c.mode) != (CompressorKind::Ctc, CompressionModeName::BlankRemove) => {
                return fail("compressor.kind = ctc with compressor.mode = blank_remove")
            }
            Variant::E2 | Variant::E3 | Variant::E4 | Variant::E5
                if (c.kind, c.mode) != (CompressorKind::Ctc, CompressionModeName::FrameAverage) =>
            {
                return fail("compressor.kind = ctc with compressor.mode = frame_average")
            }
            _ => {}
        }
        let lora = matches!(variant, Variant::E3 | Variant::E5);
        if variant.is_speech_llm() && self.lora.enabled != lora {
            return fail(if lora { "lora.enabled = true" } else { "lora.enabled = false" });
        }
        let non_causal = matches!(variant, Variant::E4 | Variant::E5);
        if variant.is_speech_llm() && (self.audio_encoder.mask == MaskName::PrefixNonCausal) != non_causal {
            return fail(if non_causal {
                "audio_encoder.mask = prefix_non_causal"
            } else {
                "audio_encoder.mask = causal"
            });
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if self.decoding.beam == 0 || self.decoding.max_len == 0 {
            return bad("decoding.beam and decoding.max_len must be positive".into());
        }
        for t in &self.lora.targets {
            if !["wq", "wk", "wv", "wo"].contains(&t.as_str()) {
                return bad(format!("lora target {t:?} is not one of wq wk wv wo"));
            }
        }
        if self.seq2seq.mu_grid.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("seq2seq.mu_grid values must lie in [0, 1]".into());
        }
        if self.data.n_train == 0 || self.data.n_valid == 0 || self.data.n_test == 0 {
            return bad("data splits must be non-empty".into());
        }
        Ok(())
    }
}

/// FNV-1a over the canonical JSON of `value` (keys are sorted).
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let text = serde_json::to_string(&serde_json::to_value(value).expect("serializable")).expect("json");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
