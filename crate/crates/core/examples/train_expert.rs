//! Train a numeric expert for each task and print its accuracy.

use piern::datagen::{generate_dataset, Task};
use piern::expert::{train_expert, ExpertConfig};

fn main() -> piern::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    for task in [Task::Linear, Task::Nonlinear] {
        let split = generate_dataset(task, (n_train, 500), 7)?;
        let config = ExpertConfig {
            max_epochs: epochs,
            ..ExpertConfig::for_task(task)
        };
        let (model, report) = train_expert(&split, &config, 7)?;
        println!(
            "{task}: epochs={} train_mse={:.3e} test_mse={:.3e} ({:.1}s) hash={}",
            report.epochs,
            report.train_mse_raw,
            report.test_mse_raw,
            report.seconds,
            &model.compute_hash()[..12]
        );
        let mut worst = 0.0f64;
        let mut fails = 0;
        for s in &split.test {
            let p = model.predict(&s.x)?;
            let err = (p - s.y).abs();
            worst = worst.max(err);
            if err > (0.01 * s.y.abs()).max(1e-3) {
                fails += 1;
            }
        }
        println!("  max abs err {worst:.3e}, {fails}/{} outside tolerance", split.test.len());
    }
    Ok(())
}
