use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use speechlm::checkpoint::Checkpoint;
use speechlm::config::{ConfigDoc, Variant};
use speechlm::decode::{decode_variant, eval_variant, rescore};
use speechlm::matrix::{render_table, run_matrix};
use speechlm::pipeline::{gen_data, group_counts, load_split, pretrain_ctc, pretrain_lm, train_variant, Corpus, Paths, Split};
use speechlm::Result;

#[derive(Parser)]
#[command(name = "speechlm", about = "Toy speech translation with a frozen text LM", version)]
struct Cli {
    /// Experiment config (JSON); the built-in default when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "SPEECHLM_OUT", default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "SPEECHLM_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/valid/test corpus.
    GenData,
    /// Pretrain the text LM.
    PretrainLm,
    /// Pretrain the CTC compressor and report compression statistics.
    PretrainCtc,
    /// Train one system.
    Train {
        #[arg(long)]
        variant: Variant,
    },
    /// Beam-search the test set with a trained system.
    Decode {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Rescore the B1 n-best lists with the text LM (produces B2).
    Rescore,
    /// Score a system's decoded test set.
    EvalBleu {
        #[arg(long)]
        variant: Variant,
    },
    /// List the tensors of a checkpoint.
    InspectCheckpoint { path: PathBuf },
    /// Run the whole experiment and write the results table.
    RunMatrix {
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
}

fn load_doc(cli: &Cli) -> Result<ConfigDoc> {
    let mut doc = ConfigDoc::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        doc.base["seed"] = json!(seed);
    }
    Ok(doc)
}

fn run(cli: Cli) -> Result<()> {
    let doc = load_doc(&cli)?;
    let paths = Paths::new(&cli.out);
    let threads = cli.threads.max(1);
    let print = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    match cli.cmd {
        Cmd::GenData => {
            gen_data(&doc.common()?, &paths)?;
            print(json!({ "data": paths.out.join("data") }));
        }
        Cmd::PretrainLm => print(json!(pretrain_lm(&doc.common()?, &paths)?)),
        Cmd::PretrainCtc => print(json!(pretrain_ctc(&doc.common()?, &paths)?)),
        Cmd::Train { variant } => {
            let cfg = doc.resolve(variant)?;
            let corpus = Corpus::load(&paths)?;
            print(json!(train_variant(&cfg, variant, &paths, &corpus)?));
        }
        Cmd::Decode { variant, beam } => {
            let cfg = doc.resolve(variant)?;
            let corpus = Corpus::load(&paths)?;
            let lines = decode_variant(&cfg, variant, &paths, &corpus, beam, threads)?;
            print(json!({ "hypotheses": lines.len(), "file": paths.hyps(variant) }));
        }
        Cmd::Rescore => {
            let cfg = doc.resolve(Variant::B2)?;
            let corpus = Corpus::load(&paths)?;
            print(json!(rescore(&cfg, &paths, &corpus, threads)?));
        }
        Cmd::EvalBleu { variant } => {
            let test = load_split(&paths, Split::Test)?;
            print(json!(eval_variant(variant, &paths, &test)?));
        }
        Cmd::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(&path)?;
            for e in &ck.entries {
                println!(
                    "{:<48} {:?} {:?}{}",
                    e.name,
                    e.data.dtype(),
                    e.data.shape(),
                    if e.frozen { " frozen" } else { "" }
                );
            }
            for (group, (n, frozen)) in group_counts(&ck) {
                println!("# {group}: {n} parameters{}", if frozen { " (frozen)" } else { "" });
            }
        }
        Cmd::RunMatrix { beam } => {
            let rows = run_matrix(&doc, &paths, beam, threads)?;
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
