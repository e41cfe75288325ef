use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use piern::config::RunConfig;
use piern::datagen::Task;
use piern::inference::extract_answer;
use piern::pipeline;

#[derive(Parser)]
#[command(name = "piern", version, about = "Token-routed LM with frozen numeric experts")]
struct Cli {
    /// Flat key-value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test datasets for every task.
    GenData,
    /// Build the vocabulary and train the backbone.
    TrainLm,
    /// Train and freeze one expert per task.
    TrainExpert,
    /// Train the text-to-computation aligners.
    TrainText2comp,
    /// Train the token router.
    TrainRouter,
    /// Routed generation for one prompt.
    Infer {
        /// Prompt text; defaults to a rendered test prompt.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value = "nonlinear")]
        task: String,
        /// Test prompt index used when no prompt is given.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Write the trace as JSONL to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Benchmark PiERN against the agent pipeline.
    Bench,
    /// Rewrite the markdown summary from the last bench.
    Report,
}

fn run(cli: Cli) -> piern::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    match cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&cfg)?;
            for (task, e) in &m.datasets {
                println!("{task}: {} train, {} test, sha256 {}", e.train, e.test, e.sha256);
            }
        }
        Command::TrainLm => {
            let r = pipeline::stage_train_lm(&cfg)?;
            println!(
                "vocab {} tokens, {} sequences, final loss {:.4}, backbone {}",
                r.vocab_size,
                r.sequences,
                r.train.final_loss(),
                r.backbone_hash
            );
        }
        Command::TrainExpert => {
            let r = pipeline::stage_train_experts(&cfg)?;
            for (id, e) in &r.experts {
                println!("{id}: {} epochs, raw test MSE {:.3e}, hash {}", e.epochs, e.test_mse_raw, r.hashes[id]);
            }
        }
        Command::TrainText2comp => {
            let r = pipeline::stage_train_text2comp(&cfg)?;
            for (id, a) in &r.aligners {
                println!(
                    "{id}: held-out MSE {:.3e}, max error {:.3e}, hash {}",
                    a.final_heldout_mse, a.max_abs_error, r.hashes[id]
                );
            }
        }
        Command::TrainRouter => {
            let r = pipeline::stage_train_router(&cfg)?;
            let q = &r.train.heldout;
            println!(
                "held-out accuracy {:.5}, expert recall {:.4} over {} positions, router {}",
                q.accuracy, q.expert_recall, q.positions, r.router_hash
            );
        }
        Command::Infer {
            prompt,
            task,
            index,
            trace,
        } => {
            let task: Task = task.parse()?;
            let prompt = match prompt {
                Some(p) => p,
                None => {
                    let texts = pipeline::bench_prompts(&cfg)?;
                    let t = texts
                        .get(&task)
                        .and_then(|v| v.get(index))
                        .ok_or_else(|| piern::PiernError::Config(format!("no test prompt {index} for {task}")))?;
                    t.prompt().to_string()
                }
            };
            let system = pipeline::load_system(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("infer"));
            let g = system.generate(&prompt, cfg.max_new_tokens, cfg.decode_mode()?, &mut rng)?;
            println!("{}", g.full_text());
            match extract_answer(&g.full_text(), task).value() {
                Some(v) => println!("answer: {v}"),
                None => println!("answer: format failure"),
            }
            println!("tokens: {}, op-count proxy: {} MAC", g.total_tokens(), g.macs);
            if let Some(path) = trace {
                let f = std::fs::File::create(&path).map_err(|e| piern::PiernError::Config(format!("{}: {e}", path.display())))?;
                g.trace.write_jsonl(f)?;
            }
        }
        Command::Bench => {
            pipeline::stage_bench(&cfg)?;
            println!("{}", pipeline::stage_report(&cfg)?);
        }
        Command::Report => println!("{}", pipeline::stage_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
