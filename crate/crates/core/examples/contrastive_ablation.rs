//! Aligner training with and without the contrastive term on a trained run's
//! frozen backbone and experts; prints epochs to reach each held-out MSE level.
//!
//! `cargo run --example contrastive_ablation -- [run_dir] [texts] [epochs]`

use std::path::PathBuf;

use piern::config::RunConfig;
use piern::datagen::Task;
use piern::pipeline;
use piern::text2comp::{train_text2comp, AlignExample, AlignerConfig};

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig {
        out_dir: PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/desk")),
        ..RunConfig::default()
    };
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);

    let (vocab, backbone) = pipeline::load_backbone(&cfg)?;
    let experts = pipeline::load_experts(&cfg)?;
    let levels = [1e-2, 1e-4, 1e-6];
    for task in [Task::Nonlinear, Task::Linear] {
        let expert = experts.get(task.id())?;
        let split = pipeline::load_dataset(&cfg, task)?;
        let (train, test) = pipeline::task_texts(&cfg, task, &split)?;
        let examples = |texts: &[piern::templates::TaskText]| -> piern::Result<Vec<AlignExample>> {
            texts
                .iter()
                .map(|t| AlignExample::new(&backbone, t.context_ids(&vocab)?, expert.stats.normalize_x(&t.parse_features()?)))
                .collect()
        };
        let tr = examples(&train[..n.min(train.len())])?;
        let te = examples(&test[..200.min(test.len())])?;
        println!("{task}:");
        for contrastive in [false, true] {
            let config = piern::text2comp::Stage2Config {
                epochs,
                contrastive,
                restarts: 1,
                refit: false,
                ..pipeline::stage2_config(&cfg)
            };
            let (_, report) = train_text2comp(
                &expert.id,
                &expert.stats,
                &tr,
                &te,
                &vocab.number_tokens(),
                backbone.d_model(),
                AlignerConfig::default(),
                &config,
                3,
            )?;
            let reached: Vec<String> = levels
                .iter()
                .map(|&l| match report.epochs_to(l) {
                    Some(e) => format!("{l:.0e}@{e}"),
                    None => format!("{l:.0e}@-"),
                })
                .collect();
            println!(
                "  contrastive={contrastive:<5} final held-out {:.3e}  {}  ({:.1}s)",
                report.final_heldout_mse,
                reached.join(" "),
                report.seconds
            );
        }
    }
    Ok(())
}
