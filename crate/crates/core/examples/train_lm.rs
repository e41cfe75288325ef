//! Train the backbone on rendered task texts and inspect greedy continuations.

use piern::backbone::{next_token, train_lm, DecodeMode, LmConfig, LmTrainConfig};
use piern::datagen::{generate_dataset, Task};
use piern::templates::{build_stage_datasets, TemplateSet};
use piern::tokenizer::{Vocabulary, BOS, EOS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let per_task: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut texts = Vec::new();
    let mut held_out = Vec::new();
    for task in [Task::Nonlinear, Task::Linear] {
        let split = generate_dataset(task, (per_task, 20), 5)?;
        let templates = TemplateSet::builtin(task);
        texts.extend(build_stage_datasets(&split.train, &templates, 5)?.1);
        held_out.extend(build_stage_datasets(&split.test, &templates, 6)?.1);
    }
    let vocab = Vocabulary::build(&texts.iter().map(|t| t.text.as_str()).collect::<Vec<_>>())?;
    let encode = |s: &str| -> piern::Result<Vec<u32>> {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(s)?);
        ids.push(EOS);
        Ok(ids)
    };
    let corpus: Vec<Vec<u32>> = texts.iter().map(|t| encode(&t.text)).collect::<piern::Result<_>>()?;
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
    println!("vocab {} tokens, {} sequences, longest {longest}", vocab.len(), corpus.len());
    let train = LmTrainConfig {
        epochs,
        ..LmTrainConfig::default()
    };
    let (lm, report) = train_lm(&corpus, LmConfig::desk(), vocab.len(), &train, 5)?;
    println!("losses {:?} in {:.1}s", report.epoch_losses, report.seconds);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut hits, mut total) = (0, 0);
    for tt in &held_out {
        let ids = encode(&tt.text)?;
            let (logits, _) = lm.forward_train(&ids)?;
        let v = vocab.len();
        for r in 0..ids.len() - 1 {
            let target = ids[r + 1];
            if vocab.is_digit_token(target) {
                continue;
            }
            let pred = next_token(&logits[r * v..(r + 1) * v], DecodeMode::Greedy, &mut rng);
            total += 1;
            hits += (pred == target) as usize;
        }
    }
    println!("held-out non-digit next-token accuracy {:.4}", hits as f64 / total as f64);
    for tt in held_out.iter().step_by(10) {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(tt.prompt())?);
        let mut st = lm.lm_forward(&ids)?;
        let mut out = Vec::new();
        let verb = vocab.id("is ").expect("answer verb token");
        for _ in 0..4 {
            let id = next_token(st.logits(), DecodeMode::Greedy, &mut rng);
            out.push(id);
            lm.append(&mut st, &[id])?;
            if id == verb {
                break;
            }
        }
        let ans = vocab.encode(&tt.text[tt.answer_span.clone()])?;
        lm.append(&mut st, &ans)?;
        out.extend(&ans);
        for _ in 0..20 {
            let id = next_token(st.logits(), DecodeMode::Greedy, &mut rng);
            out.push(id);
            if id == EOS {
                break;
            }
            lm.append(&mut st, &[id])?;
        }
        println!("...{:?} -> {:?}", &tt.prompt()[tt.prompt().len().saturating_sub(30)..], vocab.decode(&out)?);
    }
    Ok(())
}
