//! Beam-search decoding of trained systems, n-best rescoring with the text
//! LM, and scoring against references.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use speechlm_core::bridge::{Vocab, BOS, EOS, PAD};
use speechlm_core::corpus::CorpusExample;
use speechlm_core::metrics::{corpus_bleu, token_accuracy, BleuReport};
use speechlm_core::models::LM_PREFIX;
use speechlm_core::search::{beam_search, BeamConfig};
use speechlm_core::seq2seq::{rescore_nbest, NbestEntry};
use speechlm_core::ParamStore;

use crate::config::{ExperimentConfig, Variant};
use crate::error::{io_err, Error, Result};
use crate::pipeline::{
    build_encdec, build_lm, build_scratch, build_speech_llm, eval_prompt, load_lm, load_model,
    vocab, write_json, Corpus, Paths, Split,
};

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypLine {
    pub id: String,
    pub rank: usize,
    /// Corpus target tokens.
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// One line of an n-best file; `lm_score` is filled in by rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbestLine {
    pub id: String,
    pub rank: usize,
    pub tokens: Vec<usize>,
    pub seq2seq_score: f64,
    pub lm_score: Option<f64>,
    pub final_score: f64,
}

/// `f` over `items` on up to `threads` workers; output order follows input.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<U>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Ranked hypotheses (model ids, score) for each utterance.
pub type Nbest = Vec<Vec<(Vec<usize>, f64)>>;

fn beam_cfg(cfg: &ExperimentConfig, beam: usize) -> BeamConfig {
    BeamConfig {
        beam,
        max_len: cfg.decoding.max_len,
        eos: Some(EOS),
        length_penalty: cfg.decoding.length_penalty,
    }
}

/// Decode `set` with a trained system.
pub fn decode_set(
    cfg: &ExperimentConfig,
    variant: Variant,
    paths: &Paths,
    set: &[CorpusExample],
    beam: usize,
    threads: usize,
) -> Result<Nbest> {
    if beam == 0 {
        return Err(Error::Config("beam must be positive".into()));
    }
    let bc = beam_cfg(cfg, beam);
    match variant {
        Variant::B2 => Err(Error::Config("B2 outputs come from `rescore`".into())),
        Variant::B1 => {
            let (store, m) = load_model(paths, variant, || build_encdec(cfg))?;
            let w = cfg.seq2seq.ctc_weight_decode;
            par_map(set, threads, |_, ex| {
                let hyps = m.decode(&store, &ex.features, bc, w)?;
                Ok(hyps.into_iter().map(|h| (h.tokens, h.score)).collect())
            })
        }
        Variant::D1 => {
            let (store, m) = load_model(paths, variant, || build_scratch(cfg))?;
            par_map(set, threads, |_, ex| {
                let (mut sc, init) = m.scorer(&store, &ex.features)?;
                let hyps = beam_search(&mut sc, init, bc)?;
                Ok(hyps.into_iter().map(|h| (h.tokens, h.score)).collect())
            })
        }
        _ => {
            let (store, sys) = load_model(paths, variant, || build_speech_llm(cfg, paths, cfg.lora.enabled))?;
            let inputs = sys.inputs(cfg, &store, set)?;
            let m = &sys.model;
            let v = vocab(cfg);
            par_map(set, threads, |i, ex| {
                let (mut sc, init) = m.scorer(&store, &inputs[i], &eval_prompt(&v, ex.language_id))?;
                let hyps = beam_search(&mut sc, init, bc)?;
                Ok(hyps.into_iter().map(|h| (h.tokens, h.score)).collect())
            })
        }
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, lines: &[S]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path, producer: &str) -> Result<Vec<D>> {
    if !path.exists() {
        return Err(Error::Dependency {
            what: path.display().to_string(),
            producer: producer.into(),
        });
    }
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn hyp_lines(vocab: &Vocab, set: &[CorpusExample], nbest: &Nbest) -> Vec<HypLine> {
    set.iter()
        .zip(nbest)
        .flat_map(|(ex, hyps)| {
            hyps.iter().enumerate().map(|(rank, (ids, score))| HypLine {
                id: ex.id.clone(),
                rank,
                tokens: vocab.decode_target(ids),
                score: *score,
            })
        })
        .collect()
}

fn nbest_lines(vocab: &Vocab, set: &[CorpusExample], nbest: &Nbest, n: usize) -> Vec<NbestLine> {
    set.iter()
        .zip(nbest)
        .flat_map(|(ex, hyps)| {
            hyps.iter().take(n).enumerate().map(|(rank, (ids, score))| NbestLine {
                id: ex.id.clone(),
                rank,
                tokens: vocab.decode_target(ids),
                seq2seq_score: *score,
                lm_score: None,
                final_score: *score,
            })
        })
        .collect()
}

/// Decode the test split into `out/<variant>/hyps.jsonl`. For B1 the
/// validation and test n-best lists for rescoring are written too.
pub fn decode_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    paths: &Paths,
    corpus: &Corpus,
    beam: usize,
    threads: usize,
) -> Result<Vec<HypLine>> {
    let v = vocab(cfg);
    let nbest = decode_set(cfg, variant, paths, &corpus.test, beam, threads)?;
    let lines = hyp_lines(&v, &corpus.test, &nbest);
    write_jsonl(&paths.hyps(variant), &lines)?;
    if variant == Variant::B1 {
        let n = cfg.seq2seq.n_best;
        for split in [Split::Valid, Split::Test] {
            let set = corpus.split(split);
            let nb = decode_set(cfg, variant, paths, set, beam.max(n), threads)?;
            write_jsonl(&paths.nbest(variant, split), &nbest_lines(&v, set, &nb, n))?;
        }
    }
    Ok(lines)
}

/// Top-ranked tokens per reference id, in reference order.
pub fn top_hyps(lines: &[HypLine], set: &[CorpusExample]) -> Result<Vec<Vec<usize>>> {
    let mut best: std::collections::HashMap<&str, &HypLine> = std::collections::HashMap::new();
    for l in lines {
        let slot = best.entry(l.id.as_str()).or_insert(l);
        if l.rank < slot.rank {
            *slot = l;
        }
    }
    set.iter()
        .map(|ex| {
            best.get(ex.id.as_str())
                .map(|l| l.tokens.clone())
                .ok_or_else(|| Error::Config(format!("no hypothesis for {}", ex.id)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub token_accuracy: f64,
    pub utterances: usize,
}

pub fn evaluate(lines: &[HypLine], set: &[CorpusExample]) -> Result<EvalReport> {
    let hyps = top_hyps(lines, set)?;
    let refs: Vec<Vec<usize>> = set.iter().map(|e| e.target_tokens.clone()).collect();
    let BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    } = corpus_bleu(&hyps, &refs)?;
    Ok(EvalReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        token_accuracy: token_accuracy(&hyps, &refs)?,
        utterances: set.len(),
    })
}

/// Score `out/<variant>/hyps.jsonl` against the test references.
pub fn eval_variant(variant: Variant, paths: &Paths, test: &[CorpusExample]) -> Result<EvalReport> {
    let producer = match variant {
        Variant::B2 => "rescore".to_string(),
        v => format!("decode --variant {v}"),
    };
    let lines: Vec<HypLine> = read_jsonl(&paths.hyps(variant), &producer)?;
    let report = evaluate(&lines, test)?;
    write_json(&paths.variant_dir(variant).join("eval.json"), &report)?;
    Ok(report)
}

/// LM text for corpus tokens; the reserved 0 maps to the filler id.
fn lm_text(vocab: &Vocab, tokens: &[usize]) -> Vec<usize> {
    let mut out = vec![BOS];
    out.extend(tokens.iter().map(|&t| if t == 0 || t >= vocab.target_vocab_size { PAD } else { vocab.target_base() + t - 1 }));
    out.push(EOS);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuPoint {
    pub mu: f64,
    pub valid_bleu: f64,
    pub test_bleu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RescoreReport {
    pub grid: Vec<MuPoint>,
    /// Chosen by validation BLEU.
    pub mu: f64,
}

fn group(lines: Vec<NbestLine>) -> Vec<Vec<NbestLine>> {
    let mut out: Vec<Vec<NbestLine>> = Vec::new();
    for l in lines {
        match out.last_mut() {
            Some(g) if g[0].id == l.id => g.push(l),
            _ => out.push(vec![l]),
        }
    }
    out
}

fn entries(g: &[NbestLine]) -> Vec<NbestEntry> {
    g.iter()
        .map(|l| NbestEntry {
            tokens: l.tokens.clone(),
            seq2seq_score: l.seq2seq_score,
            lm_score: l.lm_score.unwrap_or(0.0),
            final_score: l.final_score,
        })
        .collect()
}

fn rescored_lines(groups: &[Vec<NbestLine>], mu: f64) -> Result<Vec<NbestLine>> {
    let mut out = Vec::new();
    for g in groups {
        for (rank, e) in rescore_nbest(entries(g), mu)?.into_iter().enumerate() {
            out.push(NbestLine {
                id: g[0].id.clone(),
                rank,
                tokens: e.tokens,
                seq2seq_score: e.seq2seq_score,
                lm_score: Some(e.lm_score),
                final_score: e.final_score,
            });
        }
    }
    Ok(out)
}

fn as_hyps(lines: &[NbestLine]) -> Vec<HypLine> {
    lines
        .iter()
        .map(|l| HypLine {
            id: l.id.clone(),
            rank: l.rank,
            tokens: l.tokens.clone(),
            score: l.final_score,
        })
        .collect()
}

/// Rescore the B1 n-best lists with the text LM over the configured grid
/// and write the B2 outputs at the weight that does best on validation.
pub fn rescore(cfg: &ExperimentConfig, paths: &Paths, corpus: &Corpus, threads: usize) -> Result<RescoreReport> {
    if cfg.seq2seq.mu_grid.is_empty() {
        return Err(Error::Config("seq2seq.mu_grid is empty".into()));
    }
    let v = vocab(cfg);
    let mut store = ParamStore::new();
    let lm = build_lm(cfg, &mut store)?;
    load_lm(&mut store, paths)?;
    store.set_frozen_prefix(LM_PREFIX, true);
    let mut scored = Vec::new();
    for split in [Split::Valid, Split::Test] {
        let lines: Vec<NbestLine> = read_jsonl(&paths.nbest(Variant::B1, split), "decode --variant B1")?;
        let lm_scores = par_map(&lines, threads, |_, l| Ok(lm.sequence_logprob(&store, &lm_text(&v, &l.tokens))?))?;
        let lines: Vec<NbestLine> = lines
            .into_iter()
            .zip(lm_scores)
            .map(|(l, s)| NbestLine { lm_score: Some(s), ..l })
            .collect();
        scored.push(group(lines));
    }
    let (valid, test) = (&scored[0], &scored[1]);
    let mut grid = Vec::new();
    for &mu in &cfg.seq2seq.mu_grid {
        let bleu = |groups: &[Vec<NbestLine>], set: &[CorpusExample]| -> Result<f64> {
            Ok(evaluate(&as_hyps(&rescored_lines(groups, mu)?), set)?.bleu)
        };
        grid.push(MuPoint {
            mu,
            valid_bleu: bleu(valid, &corpus.valid)?,
            test_bleu: bleu(test, &corpus.test)?,
        });
    }
    let best = grid
        .iter()
        .fold(&grid[0], |b, p| if p.valid_bleu > b.valid_bleu { p } else { b });
    let report = RescoreReport { mu: best.mu, grid };
    let lines = rescored_lines(test, report.mu)?;
    write_jsonl(&paths.nbest(Variant::B2, Split::Test), &lines)?;
    write_jsonl(&paths.hyps(Variant::B2), &as_hyps(&lines))?;
    write_json(&paths.variant_dir(Variant::B2).join("mu_grid.json"), &report)?;
    Ok(report)
}
