//! Train a text-to-computation aligner for each task on top of a frozen backbone.

use piern::backbone::{train_lm, Backbone, LmConfig, LmTrainConfig};
use piern::datagen::{generate_dataset, Task};
use piern::templates::{build_stage_datasets, TemplateSet};
use piern::text2comp::{train_text2comp, AlignExample, AlignerConfig, Stage2Config};
use piern::tokenizer::{Vocabulary, BOS, EOS};

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let contrastive = args.get(3).map(|s| s == "contrastive").unwrap_or(false);
    let work = std::env::temp_dir().join("piern-aligner-example");
    let mut splits = Vec::new();
    let mut texts = Vec::new();
    for task in [Task::Nonlinear, Task::Linear] {
        let split = generate_dataset(task, (n_train, 200), 11)?;
        let templates = TemplateSet::builtin(task);
        let (_, train) = build_stage_datasets(&split.train, &templates, 11)?;
        let (_, test) = build_stage_datasets(&split.test, &templates, 12)?;
        texts.extend(train.iter().take(400).cloned());
        splits.push((split, train, test));
    }
    let vocab_path = work.join("vocab.json");
    let lm_stem = work.join("backbone");
    let (vocab, lm) = if vocab_path.exists() {
        (Vocabulary::load(&vocab_path)?, Backbone::load(&lm_stem)?.0)
    } else {
        let vocab = Vocabulary::build(&texts.iter().map(|t| t.text.as_str()).collect::<Vec<_>>())?;
        let corpus: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| {
                let mut ids = vec![BOS];
                ids.extend(vocab.encode(&t.text)?);
                ids.push(EOS);
                Ok(ids)
            })
            .collect::<piern::Result<_>>()?;
        let train = LmTrainConfig {
            epochs: 6,
            ..LmTrainConfig::default()
        };
        let (lm, report) = train_lm(&corpus, LmConfig::desk(), vocab.len(), &train, 11)?;
        println!("backbone trained in {:.1}s, loss {:.4}", report.seconds, report.final_loss());
        let hash = vocab.save(&vocab_path)?;
        lm.save(&lm_stem, &hash)?;
        (vocab, lm)
    };
    for (split, train, test) in &splits {
        let stats = split.stats()?;
        let to_examples = |tts: &[piern::templates::TaskText]| -> piern::Result<Vec<AlignExample>> {
            tts.iter()
                .map(|t| AlignExample::new(&lm, t.context_ids(&vocab)?, stats.normalize_x(&t.parse_features()?)))
                .collect()
        };
        let tr = to_examples(train)?;
        let te = to_examples(test)?;
        let config = Stage2Config {
            epochs,
            contrastive,
            ..Stage2Config::default()
        };
        let (al, report) = train_text2comp(
            split.task.id(),
            stats,
            &tr,
            &te,
            &vocab.number_tokens(),
            lm.d_model(),
            AlignerConfig::default(),
            &config,
            11,
        )?;
        println!(
            "{}: held-out mse {:.3e}, max abs err {:.3e} ({:.1}s)",
            split.task, report.final_heldout_mse, report.max_abs_error, report.seconds
        );
        println!("  curve {:?}", report.heldout_mse.iter().step_by(10).map(|m| format!("{m:.2e}")).collect::<Vec<_>>());
        let k = stats.dim();
        for (name, set) in [("train", &tr), ("held-out", &te)] {
            let mut per = vec![0.0; k];
            let mut worst = vec![0.0f64; k];
            for e in set.iter() {
                let p = al.extract_inputs(&e.ids, &e.hidden)?;
                for i in 0..k {
                    let err = p[i] - e.x[i];
                    per[i] += err * err / set.len() as f64;
                    worst[i] = worst[i].max(err.abs());
                }
            }
            println!("  {name} per-slot mse {:?}", per.iter().map(|m| format!("{m:.1e}")).collect::<Vec<_>>());
            println!("  {name} per-slot max {:?}", worst.iter().map(|m| format!("{m:.1e}")).collect::<Vec<_>>());
        }
    }
    Ok(())
}
