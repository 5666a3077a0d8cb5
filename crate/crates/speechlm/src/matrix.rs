//! The full experiment: shared pretraining, then every system trained,
//! decoded and scored, with a results table at the end.

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigDoc, Variant};
use crate::decode::{decode_variant, eval_variant, rescore};
use crate::error::{io_err, Result};
use crate::pipeline::{gen_data, pretrain_ctc, pretrain_lm, train_variant, write_json, Corpus, Paths, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Variant,
    pub trainable_params: usize,
    pub bleu: f64,
    pub token_accuracy: f64,
    pub wall_seconds: f64,
}

/// Wall time and settings of a whole matrix run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_seconds: f64,
    pub threads: usize,
    pub beam: usize,
}

/// Jobs that can run side by side; each chain is sequential inside.
const CHAINS: [&[Variant]; 6] = [
    &[Variant::B1, Variant::B2],
    &[Variant::D1],
    &[Variant::E0],
    &[Variant::E1],
    &[Variant::E2, Variant::E3],
    &[Variant::E4, Variant::E5],
];

fn run_chain(doc: &ConfigDoc, chain: &[Variant], paths: &Paths, corpus: &Corpus, beam: usize, threads: usize) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let mut b1: Option<TrainReport> = None;
    for &v in chain {
        let t0 = Instant::now();
        let trainable = if v == Variant::B2 {
            let cfg = doc.resolve(v)?;
            rescore(&cfg, paths, corpus, threads)?;
            b1.as_ref().map_or(0, |r| r.trainable_params)
        } else {
            let cfg = doc.resolve(v)?;
            let report = train_variant(&cfg, v, paths, corpus)?;
            decode_variant(&cfg, v, paths, corpus, beam, threads)?;
            let n = report.trainable_params;
            if v == Variant::B1 {
                b1 = Some(report);
            }
            n
        };
        let eval = eval_variant(v, paths, &corpus.test)?;
        let row = ResultRow {
            variant: v,
            trainable_params: trainable,
            bleu: eval.bleu,
            token_accuracy: eval.token_accuracy,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        eprintln!(
            "[matrix] {} bleu {:.2} acc {:.4} params {} ({:.0}s)",
            v, row.bleu, row.token_accuracy, row.trainable_params, row.wall_seconds
        );
        write_json(&paths.result(v), &row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Aligned text rendering of the results table.
pub fn render_table(rows: &[ResultRow]) -> String {
    let mut out = format!(
        "{:<8} {:>16} {:>8} {:>14} {:>12}\n",
        "variant", "trainable_params", "bleu", "token_accuracy", "wall_seconds"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>16} {:>8.2} {:>14.4} {:>12.1}\n",
            r.variant.to_string(),
            r.trainable_params,
            r.bleu,
            r.token_accuracy,
            r.wall_seconds
        ));
    }
    out
}

/// Run everything from data generation to the results table. With
/// `threads > 1` independent chains of systems train concurrently.
pub fn run_matrix(doc: &ConfigDoc, paths: &Paths, beam: usize, threads: usize) -> Result<Vec<ResultRow>> {
    let t0 = Instant::now();
    let cfg = doc.common()?;
    for v in Variant::ALL {
        doc.resolve(v)?;
    }
    fs::create_dir_all(&paths.out).map_err(io_err(&paths.out))?;
    let stale = paths.out.join("stage1");
    if stale.exists() {
        fs::remove_dir_all(&stale).map_err(io_err(&stale))?;
    }
    gen_data(&cfg, paths)?;
    let lm = pretrain_lm(&cfg, paths)?;
    eprintln!("[matrix] lm perplexity {:.3} (uniform {})", lm.perplexity, lm.uniform_perplexity);
    let comp = pretrain_ctc(&cfg, paths)?;
    eprintln!(
        "[matrix] compressor frame-average ratio {:.3}, greedy accuracy {:.3}",
        comp.frame_average_mean_ratio, comp.greedy_sequence_accuracy
    );
    let corpus = Corpus::load(paths)?;

    let workers = threads.clamp(1, CHAINS.len());
    let inner = (threads / workers).max(1);
    let results: Mutex<Vec<Option<Result<Vec<ResultRow>>>>> = Mutex::new(CHAINS.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= CHAINS.len() {
            break;
        }
        let r = run_chain(doc, CHAINS[i], paths, &corpus, beam, inner);
        results.lock().expect("no panics while holding the lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(work);
        }
        work();
    });
    let mut rows = Vec::new();
    for r in results.into_inner().expect("workers joined") {
        rows.extend(r.expect("every chain ran")?);
    }
    rows.sort_by_key(|r| r.variant);
    write_json(&paths.out.join("results.json"), &rows)?;
    let run = RunSummary {
        total_seconds: t0.elapsed().as_secs_f64(),
        threads,
        beam,
    };
    write_json(&paths.out.join("run.json"), &run)?;
    let table = render_table(&rows);
    let txt = paths.out.join("results.txt");
    fs::write(&txt, &table).map_err(io_err(&txt))?;
    Ok(rows)
}
