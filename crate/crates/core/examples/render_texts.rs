//! Sample task inputs, render them through the templates and show how the
//! tokenizer splits each text around its numbers.
//!
//! `cargo run --example render_texts -- [count]`

use piern::datagen::{generate_dataset, Task};
use piern::templates::{build_stage_datasets, TemplateSet};
use piern::tokenizer::Vocabulary;

fn main() -> piern::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut rendered = Vec::new();
    for task in [Task::Nonlinear, Task::Linear] {
        let split = generate_dataset(task, (50, 10), 1)?;
        let (_, texts) = build_stage_datasets(&split.train, &TemplateSet::builtin(task), 1)?;
        println!("{task}: x={:?} y={:.6}", split.train[0].x, split.train[0].y);
        rendered.extend(texts.into_iter().take(count));
    }
    let vocab = Vocabulary::build(&rendered.iter().map(|t| t.text.as_str()).collect::<Vec<_>>())?;
    println!("vocabulary: {} tokens\n", vocab.len());
    for t in &rendered {
        println!("{}", t.text);
        println!("  prompt: {:?}", t.prompt());
        println!("  features: {:?}", t.parse_features()?);
        let pieces: Vec<String> = vocab
            .encode(&t.text)?
            .iter()
            .map(|&id| vocab.decode(&[id]))
            .collect::<piern::Result<_>>()?;
        println!("  tokens: {}\n", pieces.join("|"));
    }
    Ok(())
}
