//! Artifact layout under the output directory and the training steps that
//! produce each artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use speechlm_core::bridge::{sample_prompt, AudioEncoderConfig, MaskVariant, PromptTemplate, Vocab, BOS, EVAL_TEMPLATE};
use speechlm_core::compressor::{CompressorConfig, CtcCompressor};
use speechlm_core::corpus::{CorpusExample, Generator, GeneratorConfig};
use speechlm_core::ctc::{collapse, CompressionMode, BLANK};
use speechlm_core::decoder::{Decoder, DecoderConfig};
use speechlm_core::lora::{self, LoraConfig, LoraTargets};
use speechlm_core::models::{ScratchDecoder, SpeechItem, SpeechLlm, SpeechLlmConfig, LM_PREFIX};
use speechlm_core::nn::EncoderConfig;
use speechlm_core::seq2seq::{EncDec, EncDecConfig};
use speechlm_core::textlm::{sample_document, LmDataConfig};
use speechlm_core::{Graph, ParamStore, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::config::{
    config_hash, CompressionModeName, CompressorKind, ExperimentConfig, MaskName, StageConfig, Variant,
};
use crate::corpus_io::{read_corpus, write_corpus, MANIFEST};
use crate::error::{io_err, Error, Result};
use crate::trainer::{train, LogPoint, Objective, TrainSpec, TrainState};

const NORM_EPS: f64 = 1e-5;
pub const COMPRESSOR_PREFIX: &str = "compressor.";
/// Utterances per forward pass when evaluating.
const EVAL_CHUNK: usize = 32;

/// Where every artifact lives.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.out.join("data").join(split.name())
    }

    pub fn lm(&self) -> PathBuf {
        self.out.join("lm.slmk")
    }

    pub fn compressor(&self) -> PathBuf {
        self.out.join("compressor.slmk")
    }

    pub fn compression_report(&self) -> PathBuf {
        self.out.join("compression.json")
    }

    pub fn stage1(&self, key: &str) -> PathBuf {
        self.out.join("stage1").join(format!("{key}.slmk"))
    }

    pub fn variant_dir(&self, v: Variant) -> PathBuf {
        self.out.join(v.to_string())
    }

    pub fn model(&self, v: Variant) -> PathBuf {
        self.variant_dir(v).join("model.slmk")
    }

    pub fn hyps(&self, v: Variant) -> PathBuf {
        self.variant_dir(v).join("hyps.jsonl")
    }

    pub fn nbest(&self, v: Variant, split: Split) -> PathBuf {
        self.variant_dir(v).join(format!("nbest_{}.jsonl", split.name()))
    }

    pub fn result(&self, v: Variant) -> PathBuf {
        self.variant_dir(v).join("result.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Independent seed for one named stage.
pub fn stage_seed(seed: u64, label: &str) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn dependency(what: impl Into<String>, producer: &str) -> Error {
    Error::Dependency {
        what: what.into(),
        producer: producer.into(),
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(dependency(path.display().to_string(), producer))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path, producer: &str) -> Result<D> {
    require(path, producer)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn log_stage(tag: &str, total: u64) -> impl FnMut(&LogPoint) + '_ {
    move |p| {
        eprintln!(
            "[{tag}] step {}/{total} train {:.4} valid {:.4} lr {:.2e}",
            p.step, p.train_loss, p.valid_loss, p.lr
        )
    }
}

// ---------------------------------------------------------------- data

pub fn vocab(cfg: &ExperimentConfig) -> Vocab {
    Vocab::new(cfg.data.num_languages, cfg.data.target_vocab_size)
}

pub fn generator(cfg: &ExperimentConfig) -> Result<Generator> {
    let d = &cfg.data;
    Ok(Generator::new(GeneratorConfig {
        source_vocab_size: d.source_vocab_size,
        target_vocab_size: d.target_vocab_size,
        feature_dim: d.feature_dim,
        duration_range: d.duration_range,
        noise_sigma: d.noise_sigma,
        utterance_length_range: d.utterance_length_range,
        seed: stage_seed(cfg.seed, "data"),
        num_languages: d.num_languages,
    })?)
}

/// Write the three splits: consecutive generator index ranges.
pub fn gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let gen = generator(cfg)?;
    let d = &cfg.data;
    let (a, b, c) = (d.n_train as u64, d.n_valid as u64, d.n_test as u64);
    for (split, range) in [(Split::Train, 0..a), (Split::Valid, a..a + b), (Split::Test, a + b..a + b + c)] {
        write_corpus(&gen.examples(range), &paths.split(split))?;
    }
    Ok(())
}

pub fn load_split(paths: &Paths, split: Split) -> Result<Vec<CorpusExample>> {
    let dir = paths.split(split);
    if !dir.join(MANIFEST).exists() {
        return Err(dependency(format!("{} corpus at {}", split.name(), dir.display()), "gen-data"));
    }
    read_corpus(&dir)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<CorpusExample>,
    pub valid: Vec<CorpusExample>,
    pub test: Vec<CorpusExample>,
}

impl Corpus {
    pub fn load(paths: &Paths) -> Result<Self> {
        Ok(Self {
            train: load_split(paths, Split::Train)?,
            valid: load_split(paths, Split::Valid)?,
            test: load_split(paths, Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[CorpusExample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

fn spec(cfg: &ExperimentConfig, stage: StageConfig, label: &str) -> TrainSpec {
    let t = &cfg.training;
    TrainSpec {
        stage,
        batch_size: t.batch_size,
        clip_norm: t.clip_norm,
        weight_decay: t.weight_decay,
        eval_every: t.eval_every,
        seed: stage_seed(cfg.seed, label),
    }
}

fn init_rng(cfg: &ExperimentConfig, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, &format!("init.{label}")))
}

/// Token-weighted mean of `loss` over `n` items taken `EVAL_CHUNK` at a time.
fn chunked_mean(
    store: &ParamStore<f32>,
    n: usize,
    weight: impl Fn(usize) -> usize,
    loss: impl Fn(&mut Graph<'_, f32>, std::ops::Range<usize>) -> speechlm_core::Result<Var>,
) -> speechlm_core::Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let range = start..(start + EVAL_CHUNK).min(n);
        let w: usize = range.clone().map(&weight).sum();
        let mut g = Graph::new(store);
        let l = loss(&mut g, range)?;
        sum += g.value(l).item() as f64 * w as f64;
        count += w;
    }
    Ok(sum / count.max(1) as f64)
}

// ---------------------------------------------------------------- text LM

pub fn lm_decoder_config(cfg: &ExperimentConfig) -> DecoderConfig {
    let l = &cfg.lm;
    DecoderConfig {
        n_layers: l.n_layers,
        n_heads: l.n_heads,
        model_dim: l.model_dim,
        ffn_dim: l.ffn_dim,
        vocab_size: vocab(cfg).size(),
        rope_base: l.rope_base,
        norm_eps: l.norm_eps,
        cross_attention: false,
    }
}

pub fn lm_data_config(cfg: &ExperimentConfig) -> LmDataConfig {
    LmDataConfig {
        instruction_fraction: cfg.lm.instruction_fraction,
        filler_prob: cfg.lm.filler_prob,
        repeat_prob: cfg.lm.repeat_prob,
        length_range: cfg.lm.doc_length_range,
    }
}

struct LmObjective<'a> {
    lm: &'a Decoder,
    vocab: Vocab,
    data: LmDataConfig,
    valid: Vec<Vec<usize>>,
}

impl Objective for LmObjective<'_> {
    fn train_size(&self) -> usize {
        // documents are drawn fresh each step; indices only set the count
        1 << 16
    }

    fn batch_loss(&self, g: &mut Graph<'_, f32>, batch: &[usize], rng: &mut ChaCha8Rng) -> speechlm_core::Result<Var> {
        let docs: Vec<Vec<usize>> = batch.iter().map(|_| sample_document(&self.vocab, &self.data, rng)).collect();
        self.lm.next_token_loss(g, &docs)
    }

    fn validation_loss(&self, store: &ParamStore<f32>) -> speechlm_core::Result<f64> {
        chunked_mean(store, self.valid.len(), |i| self.valid[i].len() - 1, |g, r| {
            self.lm.next_token_loss(g, &self.valid[r])
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmReport {
    pub valid_loss: f64,
    pub perplexity: f64,
    pub uniform_perplexity: f64,
    pub plain_perplexity: f64,
}

pub fn build_lm(cfg: &ExperimentConfig, store: &mut ParamStore<f32>) -> Result<Decoder> {
    Ok(Decoder::new(store, "lm", lm_decoder_config(cfg), &mut init_rng(cfg, "lm"))?)
}

/// Held-out documents for the LM, drawn from their own stream.
pub fn lm_valid_docs(cfg: &ExperimentConfig, data: &LmDataConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "lm.valid"));
    (0..cfg.lm.n_valid_docs).map(|_| sample_document(&vocab(cfg), data, &mut rng)).collect()
}

pub fn pretrain_lm(cfg: &ExperimentConfig, paths: &Paths) -> Result<LmReport> {
    let mut data = lm_data_config(cfg);
    data.validate()?;
    let mut store = ParamStore::new();
    let lm = build_lm(cfg, &mut store)?;
    let obj = LmObjective {
        lm: &lm,
        vocab: vocab(cfg),
        data,
        valid: lm_valid_docs(cfg, &data),
    };
    let spec = spec(cfg, cfg.training.lm, "lm");
    let state = train(&mut store, &obj, &spec, TrainState::new(spec.weight_decay), None, &mut log_stage("lm", spec.stage.steps))?;
    let valid_loss = obj.validation_loss(&store)?;
    data.instruction_fraction = 0.0;
    let plain = LmObjective {
        valid: lm_valid_docs(cfg, &data),
        ..obj
    };
    let report = LmReport {
        valid_loss,
        perplexity: valid_loss.exp(),
        uniform_perplexity: vocab(cfg).size() as f64,
        plain_perplexity: plain.validation_loss(&store)?.exp(),
    };
    let meta = json!({ "kind": "lm", "config_hash": config_hash(cfg), "report": report, "history": state.history });
    Checkpoint::from_store(&store, meta).save(&paths.lm())?;
    Ok(report)
}

/// Pretrained LM weights into a store holding an `lm` decoder.
pub fn load_lm(store: &mut ParamStore<f32>, paths: &Paths) -> Result<()> {
    require(&paths.lm(), "pretrain-lm")?;
    Checkpoint::load(&paths.lm())?.load_into(store, LM_PREFIX)?;
    Ok(())
}

// ---------------------------------------------------------------- compressor

pub fn compressor_config(cfg: &ExperimentConfig) -> CompressorConfig {
    let c = &cfg.compressor;
    CompressorConfig {
        feature_dim: cfg.data.feature_dim,
        channels: c.channels,
        layers: c.layers,
        dim: c.dim,
        heads: c.heads,
        ffn: c.ffn,
        classes: cfg.data.source_vocab_size,
        norm_eps: NORM_EPS,
    }
}

struct CtcObjective<'a> {
    comp: &'a CtcCompressor,
    train: &'a [CorpusExample],
    valid: &'a [CorpusExample],
}

fn ctc_loss(comp: &CtcCompressor, g: &mut Graph<'_, f32>, items: &[&CorpusExample]) -> speechlm_core::Result<Var> {
    let feats: Vec<&Tensor<f32>> = items.iter().map(|e| &e.features).collect();
    let targets: Vec<&[usize]> = items.iter().map(|e| e.source_tokens.as_slice()).collect();
    comp.loss(g, &feats, &targets)
}

impl Objective for CtcObjective<'_> {
    fn train_size(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(&self, g: &mut Graph<'_, f32>, batch: &[usize], _: &mut ChaCha8Rng) -> speechlm_core::Result<Var> {
        let items: Vec<&CorpusExample> = batch.iter().map(|&i| &self.train[i]).collect();
        ctc_loss(self.comp, g, &items)
    }

    fn validation_loss(&self, store: &ParamStore<f32>) -> speechlm_core::Result<f64> {
        chunked_mean(store, self.valid.len(), |_| 1, |g, r| {
            let items: Vec<&CorpusExample> = self.valid[r].iter().collect();
            ctc_loss(self.comp, g, &items)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub utterances: usize,
    pub ctc_valid_loss: f64,
    /// Mean over utterances of output rows / post-subsampling frames.
    pub frame_average_mean_ratio: f64,
    pub blank_remove_mean_ratio: f64,
    /// Utterances where blank removal kept exactly the non-blank frames.
    pub blank_remove_exact: usize,
    /// Greedy CTC transcripts equal to the source tokens.
    pub greedy_sequence_accuracy: f64,
}

pub fn build_compressor(cfg: &ExperimentConfig, store: &mut ParamStore<f32>) -> Result<CtcCompressor> {
    Ok(CtcCompressor::new(store, "compressor", compressor_config(cfg), &mut init_rng(cfg, "compressor"))?)
}

pub fn load_compressor(cfg: &ExperimentConfig, paths: &Paths) -> Result<(ParamStore<f32>, CtcCompressor)> {
    require(&paths.compressor(), "pretrain-ctc")?;
    let mut store = ParamStore::new();
    let comp = build_compressor(cfg, &mut store)?;
    Checkpoint::load(&paths.compressor())?.load_into(&mut store, "")?;
    store.set_frozen_prefix(COMPRESSOR_PREFIX, true);
    Ok((store, comp))
}

pub fn pretrain_ctc(cfg: &ExperimentConfig, paths: &Paths) -> Result<CompressionReport> {
    let train_set = load_split(paths, Split::Train)?;
    let valid = load_split(paths, Split::Valid)?;
    let test = load_split(paths, Split::Test)?;
    let mut store = ParamStore::new();
    let comp = build_compressor(cfg, &mut store)?;
    let obj = CtcObjective {
        comp: &comp,
        train: &train_set,
        valid: &valid,
    };
    let spec = spec(cfg, cfg.training.ctc, "ctc");
    let state = train(&mut store, &obj, &spec, TrainState::new(spec.weight_decay), None, &mut log_stage("ctc", spec.stage.steps))?;
    let ctc_valid_loss = obj.validation_loss(&store)?;
    let report = compression_report(&comp, &store, &test, ctc_valid_loss)?;
    let meta = json!({ "kind": "compressor", "config_hash": config_hash(cfg), "report": report, "history": state.history });
    Checkpoint::from_store(&store, meta).save(&paths.compressor())?;
    write_json(&paths.compression_report(), &report)?;
    Ok(report)
}

/// Compression statistics of a trained compressor on `set`.
pub fn compression_report(
    comp: &CtcCompressor,
    store: &ParamStore<f32>,
    set: &[CorpusExample],
    ctc_valid_loss: f64,
) -> Result<CompressionReport> {
    let (mut fa, mut br, mut exact, mut greedy_ok) = (0.0, 0.0, 0, 0);
    for ex in set {
        let f = comp.compress(store, &ex.features, CompressionMode::FrameAverage, false)?;
        let b = comp.compress(store, &ex.features, CompressionMode::BlankRemove, false)?;
        let frames = f.input_frames() as f64;
        fa += f.output_frames() as f64 / frames;
        br += b.output_frames() as f64 / frames;
        let nonblank = b.posteriorgram.alignment.iter().filter(|&&a| a != BLANK).count();
        exact += usize::from(b.output_frames() == nonblank);
        greedy_ok += usize::from(collapse(&b.posteriorgram.alignment) == ex.source_tokens);
    }
    let n = set.len().max(1) as f64;
    Ok(CompressionReport {
        utterances: set.len(),
        ctc_valid_loss,
        frame_average_mean_ratio: fa / n,
        blank_remove_mean_ratio: br / n,
        blank_remove_exact: exact,
        greedy_sequence_accuracy: greedy_ok as f64 / n,
    })
}

fn compression_mode(cfg: &ExperimentConfig) -> CompressionMode {
    match cfg.compressor.mode {
        CompressionModeName::BlankRemove => CompressionMode::BlankRemove,
        CompressionModeName::FrameAverage => CompressionMode::FrameAverage,
    }
}

/// Compressed hidden states for every utterance of `set`.
pub fn compress_set(
    cfg: &ExperimentConfig,
    comp: &CtcCompressor,
    store: &ParamStore<f32>,
    set: &[CorpusExample],
) -> Result<Vec<Tensor<f32>>> {
    let mode = compression_mode(cfg);
    set.iter()
        .map(|ex| Ok(comp.compress(store, &ex.features, mode, cfg.compressor.drop_blank_runs)?.hidden))
        .collect()
}

// ---------------------------------------------------------------- speech LLM

pub fn speech_llm_config(cfg: &ExperimentConfig) -> SpeechLlmConfig {
    let a = &cfg.audio_encoder;
    SpeechLlmConfig {
        audio: AudioEncoderConfig {
            layers: a.layers,
            dim: a.dim,
            heads: a.heads,
            ffn: a.ffn,
            input_dim: cfg.compressor.dim,
            output_dim: cfg.lm.model_dim,
            norm_eps: NORM_EPS,
        },
        mask: match a.mask {
            MaskName::Causal => MaskVariant::Causal,
            MaskName::PrefixNonCausal => MaskVariant::PrefixNonCausal,
        },
        separator: a.bos_separator.then_some(BOS),
    }
}

pub fn lora_config(cfg: &ExperimentConfig) -> LoraConfig {
    let l = &cfg.lora;
    let has = |n: &str| l.targets.iter().any(|t| t == n);
    LoraConfig {
        rank: l.rank,
        alpha: l.alpha.unwrap_or(2.0 * l.rank as f64),
        targets: LoraTargets {
            wq: has("wq"),
            wk: has("wk"),
            wv: has("wv"),
            wo: has("wo"),
        },
        init_std: l.init_std,
    }
}

/// Speech LLM plus, for compressor variants, the frozen CTC compressor
/// registered in the same store under `compressor.`.
pub struct SpeechSystem {
    pub model: SpeechLlm,
    pub compressor: Option<CtcCompressor>,
}

impl SpeechSystem {
    /// Model inputs for `set`: compressed states, or raw features for the
    /// convolutional variant.
    pub fn inputs(&self, cfg: &ExperimentConfig, store: &ParamStore<f32>, set: &[CorpusExample]) -> Result<Vec<Tensor<f32>>> {
        match &self.compressor {
            None => Ok(set.iter().map(|e| e.features.clone()).collect()),
            Some(comp) => compress_set(cfg, comp, store, set),
        }
    }
}

/// System with the pretrained LM (and compressor) loaded; for the
/// convolutional variant the subsampler starts from the compressor's body.
/// Adapters are attached when `with_lora`.
pub fn build_speech_llm(cfg: &ExperimentConfig, paths: &Paths, with_lora: bool) -> Result<(ParamStore<f32>, SpeechSystem)> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(cfg, "speech");
    let conv = cfg.compressor.kind == CompressorKind::Conv;
    let sub = conv.then(|| (cfg.data.feature_dim, cfg.compressor.channels, compressor_config(cfg).encoder()));
    let mut model = SpeechLlm::new(&mut store, vocab(cfg), lm_decoder_config(cfg), speech_llm_config(cfg), sub, &mut rng)?;
    load_lm(&mut store, paths)?;
    require(&paths.compressor(), "pretrain-ctc")?;
    let ck = Checkpoint::load(&paths.compressor())?;
    let compressor = if conv {
        ck.load_renamed(&mut store, "compressor.frontend.", "subsampler.frontend.")?;
        ck.load_renamed(&mut store, "compressor.encoder.", "subsampler.encoder.")?;
        None
    } else {
        let comp = build_compressor(cfg, &mut store)?;
        ck.load_into(&mut store, COMPRESSOR_PREFIX)?;
        store.set_frozen_prefix(COMPRESSOR_PREFIX, true);
        Some(comp)
    };
    if with_lora {
        let mut rng = init_rng(cfg, "lora");
        lora::inject(&mut store, model.lm.attention_linears_mut(), &lora_config(cfg), &mut rng)?;
    }
    Ok((store, SpeechSystem { model, compressor }))
}

pub fn eval_prompt(vocab: &Vocab, language_id: usize) -> Vec<usize> {
    PromptTemplate { index: EVAL_TEMPLATE }.tokens(vocab, language_id)
}

struct SpeechObjective<'a> {
    model: &'a SpeechLlm,
    train: (&'a [CorpusExample], &'a [Tensor<f32>]),
    valid: (&'a [CorpusExample], &'a [Tensor<f32>]),
}

impl SpeechObjective<'_> {
    fn item<'b>(&self, ex: &CorpusExample, audio: &'b Tensor<f32>, prompt: Vec<usize>) -> speechlm_core::Result<SpeechItem<'b, f32>> {
        Ok(SpeechItem {
            audio,
            prompt,
            targets: self.model.vocab.target_with_eos(&ex.target_tokens)?,
        })
    }
}

impl Objective for SpeechObjective<'_> {
    fn train_size(&self) -> usize {
        self.train.0.len()
    }

    fn batch_loss(&self, g: &mut Graph<'_, f32>, batch: &[usize], rng: &mut ChaCha8Rng) -> speechlm_core::Result<Var> {
        let items = batch
            .iter()
            .map(|&i| {
                let ex = &self.train.0[i];
                let prompt = sample_prompt(rng, true).tokens(&self.model.vocab, ex.language_id);
                self.item(ex, &self.train.1[i], prompt)
            })
            .collect::<speechlm_core::Result<Vec<_>>>()?;
        self.model.loss(g, &items)
    }

    fn validation_loss(&self, store: &ParamStore<f32>) -> speechlm_core::Result<f64> {
        let (set, audio) = self.valid;
        chunked_mean(store, set.len(), |i| set[i].target_tokens.len() + 1, |g, r| {
            let items = r
                .map(|i| self.item(&set[i], &audio[i], eval_prompt(&self.model.vocab, set[i].language_id)))
                .collect::<speechlm_core::Result<Vec<_>>>()?;
            self.model.loss(g, &items)
        })
    }
}

/// Key of the stage-1 checkpoint: everything stage 1 depends on.
pub fn stage1_key(cfg: &ExperimentConfig) -> String {
    config_hash(&json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "lm": cfg.lm,
        "compressor": cfg.compressor,
        "audio_encoder": cfg.audio_encoder,
        "batch_size": cfg.training.batch_size,
        "clip_norm": cfg.training.clip_norm,
        "weight_decay": cfg.training.weight_decay,
        "eval_every": cfg.training.eval_every,
        "lm_steps": cfg.training.lm,
        "ctc_steps": cfg.training.ctc,
        "stage1": cfg.training.stage1,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub trainable_params: usize,
    pub final_valid_loss: f64,
    pub stage1_key: Option<String>,
    pub stage1_reused: bool,
    pub seconds: f64,
}

fn train_speech_llm(cfg: &ExperimentConfig, variant: Variant, paths: &Paths, corpus: &Corpus) -> Result<TrainReport> {
    let t0 = Instant::now();
    let key = stage1_key(cfg);
    let stage1_path = paths.stage1(&key);
    let reused = stage1_path.exists();
    let (mut store, sys) = build_speech_llm(cfg, paths, false)?;
    let train_in = sys.inputs(cfg, &store, &corpus.train)?;
    let valid_in = sys.inputs(cfg, &store, &corpus.valid)?;
    let model = &sys.model;
    let mut valid_loss = f64::NAN;
    if reused {
        Checkpoint::load(&stage1_path)?.load_into(&mut store, "")?;
    } else {
        let obj = SpeechObjective {
            model,
            train: (&corpus.train, &train_in),
            valid: (&corpus.valid, &valid_in),
        };
        let spec = spec(cfg, cfg.training.stage1, "stage1");
        let tag = format!("{variant} stage1");
        let state = train(&mut store, &obj, &spec, TrainState::new(spec.weight_decay), None, &mut log_stage(&tag, spec.stage.steps))?;
        valid_loss = state.best_loss;
        Checkpoint::from_store(&store, json!({ "kind": "stage1", "config_hash": config_hash(cfg), "key": key, "history": state.history })).save(&stage1_path)?;
    }
    let (store, trainable, valid_loss) = if cfg.lora.enabled {
        let (mut s2, sys2) = build_speech_llm(cfg, paths, true)?;
        Checkpoint::load(&stage1_path)?.load_into(&mut s2, "")?;
        let obj = SpeechObjective {
            model: &sys2.model,
            train: (&corpus.train, &train_in),
            valid: (&corpus.valid, &valid_in),
        };
        let spec = spec(cfg, cfg.training.stage2, "stage2");
        let tag = format!("{variant} stage2");
        let state = train(&mut s2, &obj, &spec, TrainState::new(spec.weight_decay), None, &mut log_stage(&tag, spec.stage.steps))?;
        let n = s2.trainable_count();
        (s2, n, state.best_loss)
    } else {
        if valid_loss.is_nan() {
            let obj = SpeechObjective {
                model,
                train: (&corpus.train, &train_in),
                valid: (&corpus.valid, &valid_in),
            };
            valid_loss = obj.validation_loss(&store)?;
        }
        let n = store.trainable_count();
        (store, n, valid_loss)
    };
    let report = TrainReport {
        variant,
        trainable_params: trainable,
        final_valid_loss: valid_loss,
        stage1_key: Some(key),
        stage1_reused: reused,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Checkpoint::from_store(&store, json!({ "kind": "model", "variant": variant, "config_hash": config_hash(cfg), "report": report })).save(&paths.model(variant))?;
    Ok(report)
}

// ---------------------------------------------------------------- D1 and B1

pub fn scratch_config(cfg: &ExperimentConfig) -> DecoderConfig {
    let s = &cfg.scratch;
    DecoderConfig {
        n_layers: s.n_layers,
        n_heads: s.n_heads,
        model_dim: s.model_dim,
        ffn_dim: s.ffn_dim,
        vocab_size: vocab(cfg).size(),
        rope_base: cfg.lm.rope_base,
        norm_eps: NORM_EPS,
        cross_attention: false,
    }
}

pub fn build_scratch(cfg: &ExperimentConfig) -> Result<(ParamStore<f32>, ScratchDecoder)> {
    let mut store = ParamStore::new();
    let m = ScratchDecoder::new(
        &mut store,
        scratch_config(cfg),
        cfg.data.feature_dim,
        cfg.scratch.channels,
        &mut init_rng(cfg, "scratch"),
    )?;
    Ok((store, m))
}

pub fn encdec_config(cfg: &ExperimentConfig) -> EncDecConfig {
    let s = &cfg.seq2seq;
    EncDecConfig {
        feature_dim: cfg.data.feature_dim,
        channels: s.channels,
        encoder: EncoderConfig {
            layers: s.enc_layers,
            dim: s.dim,
            heads: s.heads,
            ffn: s.ffn,
            norm_eps: NORM_EPS,
        },
        decoder: DecoderConfig {
            n_layers: s.dec_layers,
            n_heads: s.heads,
            model_dim: s.dim,
            ffn_dim: s.ffn,
            vocab_size: vocab(cfg).size(),
            rope_base: cfg.lm.rope_base,
            norm_eps: NORM_EPS,
            cross_attention: true,
        },
        ctc_weight: s.ctc_weight_train,
    }
}

pub fn build_encdec(cfg: &ExperimentConfig) -> Result<(ParamStore<f32>, EncDec)> {
    let mut store = ParamStore::new();
    let m = EncDec::new(&mut store, encdec_config(cfg), &mut init_rng(cfg, "seq2seq"))?;
    Ok((store, m))
}

/// Raw-feature items with no prompt.
struct FeatureObjective<'a, F> {
    vocab: Vocab,
    train: &'a [CorpusExample],
    valid: &'a [CorpusExample],
    loss: F,
}

impl<F> FeatureObjective<'_, F>
where
    F: Fn(&mut Graph<'_, f32>, &[SpeechItem<'_, f32>]) -> speechlm_core::Result<Var>,
{
    fn run(&self, g: &mut Graph<'_, f32>, set: &[CorpusExample], idx: impl Iterator<Item = usize>) -> speechlm_core::Result<Var> {
        let items = idx
            .map(|i| {
                Ok(SpeechItem {
                    audio: &set[i].features,
                    prompt: Vec::new(),
                    targets: self.vocab.target_with_eos(&set[i].target_tokens)?,
                })
            })
            .collect::<speechlm_core::Result<Vec<_>>>()?;
        (self.loss)(g, &items)
    }
}

impl<F> Objective for FeatureObjective<'_, F>
where
    F: Fn(&mut Graph<'_, f32>, &[SpeechItem<'_, f32>]) -> speechlm_core::Result<Var>,
{
    fn train_size(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(&self, g: &mut Graph<'_, f32>, batch: &[usize], _: &mut ChaCha8Rng) -> speechlm_core::Result<Var> {
        self.run(g, self.train, batch.iter().copied())
    }

    fn validation_loss(&self, store: &ParamStore<f32>) -> speechlm_core::Result<f64> {
        chunked_mean(store, self.valid.len(), |i| self.valid[i].target_tokens.len() + 1, |g, r| {
            self.run(g, self.valid, r)
        })
    }
}

fn train_features(
    cfg: &ExperimentConfig,
    variant: Variant,
    paths: &Paths,
    corpus: &Corpus,
    mut store: ParamStore<f32>,
    stage: StageConfig,
    loss: impl Fn(&mut Graph<'_, f32>, &[SpeechItem<'_, f32>]) -> speechlm_core::Result<Var>,
) -> Result<TrainReport> {
    let t0 = Instant::now();
    let obj = FeatureObjective {
        vocab: vocab(cfg),
        train: &corpus.train,
        valid: &corpus.valid,
        loss,
    };
    let label = variant.to_string();
    let spec = spec(cfg, stage, &label);
    let state = train(&mut store, &obj, &spec, TrainState::new(spec.weight_decay), None, &mut log_stage(&label, spec.stage.steps))?;
    let report = TrainReport {
        variant,
        trainable_params: store.trainable_count(),
        final_valid_loss: state.best_loss,
        stage1_key: None,
        stage1_reused: false,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Checkpoint::from_store(&store, json!({ "kind": "model", "variant": variant, "config_hash": config_hash(cfg), "report": report })).save(&paths.model(variant))?;
    Ok(report)
}

/// Train one system and save `out/<variant>/model.slmk`.
pub fn train_variant(cfg: &ExperimentConfig, variant: Variant, paths: &Paths, corpus: &Corpus) -> Result<TrainReport> {
    let report = match variant {
        Variant::B2 => {
            return Err(Error::Config(
                "B2 rescoring reuses the B1 model; run `train --variant B1` then `rescore`".into(),
            ))
        }
        Variant::B1 => {
            let (store, m) = build_encdec(cfg)?;
            train_features(cfg, variant, paths, corpus, store, cfg.training.seq2seq, |g, items| {
                Ok(m.seq2seq_forward(g, items)?.total)
            })?
        }
        Variant::D1 => {
            let (store, m) = build_scratch(cfg)?;
            train_features(cfg, variant, paths, corpus, store, cfg.training.scratch, |g, items| m.loss(g, items))?
        }
        _ => train_speech_llm(cfg, variant, paths, corpus)?,
    };
    write_json(&paths.variant_dir(variant).join("train.json"), &report)?;
    Ok(report)
}

/// Load a trained system's weights into a freshly built model.
pub fn load_model<M>(
    paths: &Paths,
    variant: Variant,
    build: impl FnOnce() -> Result<(ParamStore<f32>, M)>,
) -> Result<(ParamStore<f32>, M)> {
    let path = paths.model(variant);
    require(&path, &format!("train --variant {variant}"))?;
    let (mut store, m) = build()?;
    Checkpoint::load(&path)?.load_into(&mut store, "")?;
    Ok((store, m))
}

/// Number of parameters per top-level name, for inspection.
pub fn group_counts(ck: &Checkpoint) -> BTreeMap<String, (usize, bool)> {
    let mut out: BTreeMap<String, (usize, bool)> = BTreeMap::new();
    for e in &ck.entries {
        let group = e.name.split('.').next().unwrap_or("").to_string();
        let n: usize = e.data.shape().iter().product();
        let slot = out.entry(group).or_insert((0, true));
        slot.0 += n;
        slot.1 &= e.frozen;
    }
    out
}
