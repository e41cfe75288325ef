//! Run every stage end to end and print the benchmark summary.
//!
//! `cargo run --release --example pipeline -- [config.toml] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use piern::config::RunConfig;
use piern::pipeline;

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(1) {
        Some(p) => RunConfig::load(&PathBuf::from(p))?,
        None => RunConfig::default(),
    };
    if let Some(out) = args.get(2) {
        cfg.out_dir = PathBuf::from(out);
    }
    let t = Instant::now();
    let data = pipeline::gen_data(&cfg)?;
    println!("gen-data: {} datasets ({:.1}s)", data.datasets.len(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let lm = pipeline::stage_train_lm(&cfg)?;
    println!(
        "train-lm: vocab {}, {} sequences, final loss {:.4} ({:.1}s)",
        lm.vocab_size,
        lm.sequences,
        lm.train.final_loss(),
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let ex = pipeline::stage_train_experts(&cfg)?;
    for (id, r) in &ex.experts {
        println!("train-expert {id}: {} epochs, test MSE {:.3e}", r.epochs, r.test_mse_raw);
    }
    println!("  ({:.1}s)", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let al = pipeline::stage_train_text2comp(&cfg)?;
    for (id, r) in &al.aligners {
        println!(
            "train-text2comp {id}: held-out MSE {:.3e}, max error {:.3e}",
            r.final_heldout_mse, r.max_abs_error
        );
    }
    println!("  ({:.1}s)", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let rt = pipeline::stage_train_router(&cfg)?;
    let q = &rt.train.heldout;
    println!(
        "train-router: accuracy {:.5}, expert recall {:.4} on {} positions ({:.1}s)",
        q.accuracy,
        q.expert_recall,
        q.positions,
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    pipeline::stage_bench(&cfg)?;
    println!("bench ({:.1}s)\n", t.elapsed().as_secs_f64());
    println!("{}", pipeline::stage_report(&cfg)?);
    Ok(())
}
