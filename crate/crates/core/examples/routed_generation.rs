//! Routed generation on a trained run: prints each step of the trace with the
//! router's expert probability, then the extracted answer against the oracle.
//!
//! `cargo run --example routed_generation -- [run_dir] [task] [index]`

use std::path::PathBuf;

use piern::backbone::DecodeMode;
use piern::config::RunConfig;
use piern::datagen::Task;
use piern::inference::{extract_answer, TraceEvent};
use piern::pipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig {
        out_dir: PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/desk")),
        ..RunConfig::default()
    };
    let task: Task = args.get(2).map(String::as_str).unwrap_or("nonlinear").parse()?;
    let index: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let system = pipeline::load_system(&cfg)?;
    let prompts = pipeline::bench_prompts(&cfg)?;
    let text = &prompts[&task][index];
    let prompt = text.prompt();
    println!("prompt: {prompt}\n");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut st = system.begin(prompt, cfg.max_new_tokens, DecodeMode::Greedy)?;
    loop {
        let p = system.router.probs(st.lm.last_hidden())?;
        let seen = st.trace.events.len();
        let more = system.step(&mut st, &mut rng)?;
        for e in &st.trace.events[seen..] {
            match e {
                TraceEvent::Lm { text, .. } => println!("  lm      p(expert)={:.4}  {text:?}", 1.0 - p[0]),
                TraceEvent::Expert {
                    expert_id, x_hat, inserted, ..
                } => println!("  {expert_id:<7} p(expert)={:.4}  {inserted:?} from x_hat {x_hat:?}", 1.0 - p[0]),
            }
        }
        if !more {
            break;
        }
    }
    let full = format!("{prompt}{}", st.trace.text());
    let oracle = task.oracle(&text.parse_features()?)?;
    println!("\n{full}");
    println!("answer {:?}, oracle {oracle:.6}", extract_answer(&full, task).value());
    Ok(())
}
