//! The multi-stage agent baseline on one prompt, next to PiERN: per-stage
//! token counts, the parsed tool call and both answers.
//!
//! `cargo run --example agent_baseline -- [run_dir] [task] [index]`

use std::path::PathBuf;

use piern::agent::{AgentConfig, AgentPipeline};
use piern::backbone::DecodeMode;
use piern::config::RunConfig;
use piern::datagen::Task;
use piern::inference::extract_answer;
use piern::pipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig {
        out_dir: PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/desk")),
        ..RunConfig::default()
    };
    let task: Task = args.get(2).map(String::as_str).unwrap_or("linear").parse()?;
    let index: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let system = pipeline::load_system(&cfg)?;
    let agent = AgentPipeline::new(&system, pipeline::stage_prompts(&cfg)?, AgentConfig::default());
    let text = &pipeline::bench_prompts(&cfg)?[&task][index];
    let oracle = task.oracle(&text.parse_features()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let run = agent.run(text.prompt(), DecodeMode::Greedy, &mut rng)?;
    println!("{:<14} {:>7} {:>11} {:>9}", "stage", "prompt", "completion", "seconds");
    for r in &run.records {
        println!("{:<14} {:>7} {:>11} {:>9.4}", r.stage, r.prompt_tokens, r.completion_tokens, r.seconds);
    }
    println!("tool call: {} {:?} ({:?})", run.tool_call.expert_id, run.tool_call.args, run.tool_call.status);
    println!("agent: {:?}", run.answer);
    println!("agent: {} tokens, {} MAC, value {:?}", run.total_tokens(), run.macs, run.value);

    let g = system.generate(text.prompt(), cfg.max_new_tokens, DecodeMode::Greedy, &mut rng)?;
    println!("piern: {}", g.full_text());
    println!(
        "piern: {} tokens, {} MAC, value {:?}",
        g.total_tokens(),
        g.macs,
        extract_answer(&g.full_text(), task).value()
    );
    println!("oracle {oracle:.6}");
    Ok(())
}
