//! Request-level benchmark of PiERN against the agent pipeline: success
//! scoring, latency statistics, token and op-count accounting, CSV rows and
//! a markdown summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{decompose_tokens, AgentPipeline, AgentStageRecord, TokenDecomposition};
use crate::backbone::DecodeMode;
use crate::datagen::Task;
use crate::error::{PiernError, Result};
use crate::inference::{anchor_digit_violations, extract_answer, insertion_exact, AnswerOutcome, ComponentHashes, Piern, TraceEvent};
use crate::templates::TaskText;
use crate::tokenizer::QUANTIZATION_BOUND;

pub const PIERN: &str = "piern";
pub const AGENT: &str = "agent";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 0.01, abs: 1e-3 }
    }
}

/// Pass iff `|answer - oracle| <= max(rel * |oracle|, abs)`; a format failure never passes.
pub fn compute_success(answer: AnswerOutcome, oracle: f64, tol: Tolerance) -> bool {
    match answer {
        AnswerOutcome::Value(a) => (a - oracle).abs() <= (tol.rel * oracle.abs()).max(tol.abs),
        AnswerOutcome::FormatFailure => false,
    }
}

/// `(max, min, mean)` of the timed durations.
pub fn latency_stats(durations: &[f64]) -> Result<(f64, f64, f64)> {
    if durations.is_empty() {
        return Err(PiernError::Empty("latency samples"));
    }
    let max = durations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = durations.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = durations.iter().sum::<f64>() / durations.len() as f64;
    Ok((max, min, avg))
}

/// `(baseline - piern) / baseline`.
pub fn reduction(baseline: f64, piern: f64) -> f64 {
    (baseline - piern) / baseline
}

/// One request of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub system: String,
    pub task: String,
    pub request: usize,
    pub oracle: f64,
    /// Empty on a format failure.
    pub answer: Option<f64>,
    pub success: bool,
    pub tokens: usize,
    pub macs: u64,
    pub expert_calls: usize,
    pub inserted_exact: bool,
    pub anchor_digits: usize,
    /// Wall-clock seconds.
    pub latency_s: f64,
}

pub const WALL_CLOCK_COLUMNS: [&str; 1] = ["latency_s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub system: String,
    pub task: String,
    pub requests: usize,
    pub latency_max: f64,
    pub latency_min: f64,
    pub latency_avg: f64,
    pub tokens_avg: f64,
    pub macs_avg: f64,
    pub success_rate: f64,
    pub format_failures: usize,
    /// Over requests with a parsed answer.
    pub e2e_mse: f64,
    /// Frozen expert on the true inputs of the same requests.
    pub expert_mse: f64,
    pub all_inserted_exact: bool,
    pub anchor_digits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub requests: usize,
    pub warmup: usize,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    pub tolerance: Tolerance,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub rows: Vec<RequestRow>,
    pub metrics: Vec<MetricsRecord>,
    /// Agent stage tokens summed over all requests of a task.
    pub decomposition: BTreeMap<String, TokenDecomposition>,
}

fn request_rng(seed: u64, task: Task, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 8) ^ task.input_dim() as u64)
}

/// Runs every prompt through both systems, after `warmup` untimed requests each.
pub fn run_bench(
    system: &Piern,
    agent: &AgentPipeline,
    prompts: &BTreeMap<Task, Vec<TaskText>>,
    settings: &BenchSettings,
) -> Result<BenchOutput> {
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    let mut decomposition = BTreeMap::new();
    for (&task, texts) in prompts {
        let texts = &texts[..settings.requests.min(texts.len())];
        if texts.is_empty() {
            return Err(PiernError::Empty("bench prompts"));
        }
        let expert = system.experts.get(task.id())?;
        let mut truth = Vec::with_capacity(texts.len());
        for t in texts {
            let x = t.parse_features()?;
            truth.push((task.oracle(&x)?, expert.predict(&x)?));
        }
        let expert_mse = truth.iter().map(|(o, p)| (o - p).powi(2)).sum::<f64>() / truth.len() as f64;

        for t in texts.iter().cycle().take(settings.warmup) {
            let mut rng = request_rng(settings.seed, task, usize::MAX);
            system.generate(t.prompt(), settings.max_new_tokens, settings.mode, &mut rng)?;
            agent.run(t.prompt(), settings.mode, &mut rng)?;
        }

        let mut task_rows = Vec::with_capacity(texts.len());
        for (i, (t, &(oracle, _))) in texts.iter().zip(&truth).enumerate() {
            let mut rng = request_rng(settings.seed, task, i);
            let start = Instant::now();
            let g = system.generate(t.prompt(), settings.max_new_tokens, settings.mode, &mut rng)?;
            let latency_s = start.elapsed().as_secs_f64();
            let answer = extract_answer(&g.full_text(), task);
            task_rows.push(RequestRow {
                system: PIERN.into(),
                task: task.id().into(),
                request: i,
                oracle,
                answer: answer.value(),
                success: compute_success(answer, oracle, settings.tolerance),
                tokens: g.total_tokens(),
                macs: g.macs,
                expert_calls: g.trace.expert_events().count(),
                inserted_exact: insertion_exact(&g.trace, &system.vocab)? && exact_predictions(system, &g.trace)?,
                anchor_digits: anchor_digit_violations(&g.prompt, &g.trace, &system.vocab),
                latency_s,
            });
        }
        let mut agent_records: Vec<AgentStageRecord> = Vec::new();
        for (i, (t, &(oracle, _))) in texts.iter().zip(&truth).enumerate() {
            let mut rng = request_rng(settings.seed, task, i);
            let start = Instant::now();
            let run = agent.run(t.prompt(), settings.mode, &mut rng)?;
            let latency_s = start.elapsed().as_secs_f64();
            let answer = run
                .answer
                .as_deref()
                .map_or(AnswerOutcome::FormatFailure, |a| extract_answer(a, task));
            task_rows.push(RequestRow {
                system: AGENT.into(),
                task: task.id().into(),
                request: i,
                oracle,
                answer: answer.value(),
                success: compute_success(answer, oracle, settings.tolerance),
                tokens: run.total_tokens(),
                macs: run.macs,
                expert_calls: run.value.is_some() as usize,
                inserted_exact: true,
                anchor_digits: 0,
                latency_s,
            });
            agent_records.extend(run.records);
        }
        for system_name in [PIERN, AGENT] {
            let mine: Vec<&RequestRow> = task_rows.iter().filter(|r| r.system == system_name).collect();
            metrics.push(summarize(system_name, task, &mine, expert_mse)?);
        }
        decomposition.insert(task.id().to_string(), decompose_tokens(&agent_records)?);
        rows.extend(task_rows);
    }
    Ok(BenchOutput {
        rows,
        metrics,
        decomposition,
    })
}

/// Every expert event's value is the expert's own output on the event's inputs.
fn exact_predictions(system: &Piern, trace: &crate::inference::GenerationTrace) -> Result<bool> {
    for e in trace.expert_events() {
        if let TraceEvent::Expert {
            expert_id,
            x_hat,
            raw_value,
            ..
        } = e
        {
            if system.experts.predict(expert_id, x_hat)?.to_bits() != raw_value.to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn summarize(system: &str, task: Task, rows: &[&RequestRow], expert_mse: f64) -> Result<MetricsRecord> {
    let lat: Vec<f64> = rows.iter().map(|r| r.latency_s).collect();
    let (latency_max, latency_min, latency_avg) = latency_stats(&lat)?;
    let n = rows.len() as f64;
    let parsed: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.answer.map(|a| (a - r.oracle).powi(2)))
        .collect();
    Ok(MetricsRecord {
        system: system.into(),
        task: task.id().into(),
        requests: rows.len(),
        latency_max,
        latency_min,
        latency_avg,
        tokens_avg: rows.iter().map(|r| r.tokens as f64).sum::<f64>() / n,
        macs_avg: rows.iter().map(|r| r.macs as f64).sum::<f64>() / n,
        success_rate: rows.iter().filter(|r| r.success).count() as f64 / n,
        format_failures: rows.len() - parsed.len(),
        e2e_mse: if parsed.is_empty() {
            f64::NAN
        } else {
            parsed.iter().sum::<f64>() / parsed.len() as f64
        },
        expert_mse,
        all_inserted_exact: rows.iter().all(|r| r.inserted_exact),
        anchor_digits: rows.iter().map(|r| r.anchor_digits).sum(),
    })
}

pub fn write_csv(rows: &[RequestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PiernError::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| PiernError::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| PiernError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<RequestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PiernError::Config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| PiernError::Config(format!("{}: {e}", path.display())))
}

/// CSV text with the wall-clock columns removed, for run-to-run comparison.
pub fn csv_without_wall_clock(path: &Path) -> Result<String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PiernError::Config(e.to_string()))?;
    let headers = r.headers().map_err(|e| PiernError::Config(e.to_string()))?.clone();
    let keep: Vec<usize> = (0..headers.len())
        .filter(|&i| !WALL_CLOCK_COLUMNS.contains(&&headers[i]))
        .collect();
    let mut out = String::new();
    let line = |rec: &csv::StringRecord| keep.iter().map(|&i| &rec[i]).collect::<Vec<_>>().join(",");
    out.push_str(&line(&headers));
    out.push('\n');
    for rec in r.records() {
        let rec = rec.map_err(|e| PiernError::Config(e.to_string()))?;
        out.push_str(&line(&rec));
        out.push('\n');
    }
    Ok(out)
}

/// Run provenance embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub seeds: BTreeMap<String, u64>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub checkpoints: ComponentHashes,
    pub tolerance: Tolerance,
    pub decode: String,
}

fn find<'a>(metrics: &'a [MetricsRecord], system: &str, task: &str) -> Option<&'a MetricsRecord> {
    metrics.iter().find(|m| m.system == system && m.task == task)
}

pub fn markdown_report(
    ctx: &ReportContext,
    metrics: &[MetricsRecord],
    decomposition: &BTreeMap<String, TokenDecomposition>,
) -> String {
    let mut s = String::new();
    let tasks: Vec<String> = {
        let mut t: Vec<String> = metrics.iter().map(|m| m.task.clone()).collect();
        t.dedup();
        t
    };
    let _ = writeln!(s, "# PiERN benchmark\n");
    let _ = writeln!(
        s,
        "Success: |answer - oracle| <= max({} * |oracle|, {}). Decoding: {}.\n",
        ctx.tolerance.rel, ctx.tolerance.abs, ctx.decode
    );

    let _ = writeln!(s, "## Latency (s)\n");
    let _ = writeln!(s, "| task | stat | piern | agent |\n|---|---|---|---|");
    for t in &tasks {
        if let (Some(p), Some(a)) = (find(metrics, PIERN, t), find(metrics, AGENT, t)) {
            for (name, pv, av) in [
                ("Max", p.latency_max, a.latency_max),
                ("Min", p.latency_min, a.latency_min),
                ("Avg", p.latency_avg, a.latency_avg),
            ] {
                let _ = writeln!(s, "| {t} | {name} | {pv:.6} | {av:.6} |");
            }
        }
    }

    let _ = writeln!(s, "\n## Cost per request\n");
    let _ = writeln!(
        s,
        "| task | system | tokens | op-count proxy (MAC) | success rate | format failures |\n|---|---|---|---|---|---|"
    );
    for m in metrics {
        let _ = writeln!(
            s,
            "| {} | {} | {:.2} | {:.0} | {:.4} | {} |",
            m.task, m.system, m.tokens_avg, m.macs_avg, m.success_rate, m.format_failures
        );
    }

    let _ = writeln!(s, "\n## Reduction of PiERN relative to the agent\n");
    let _ = writeln!(s, "| task | tokens | latency (avg) | op-count proxy |\n|---|---|---|---|");
    for t in &tasks {
        if let (Some(p), Some(a)) = (find(metrics, PIERN, t), find(metrics, AGENT, t)) {
            let _ = writeln!(
                s,
                "| {t} | {:.2}% | {:.2}% | {:.2}% |",
                100.0 * reduction(a.tokens_avg, p.tokens_avg),
                100.0 * reduction(a.latency_avg, p.latency_avg),
                100.0 * reduction(a.macs_avg, p.macs_avg)
            );
        }
    }

    let _ = writeln!(s, "\n## End-to-end MSE\n");
    let _ = writeln!(
        s,
        "| task | frozen expert | piern | allowance (expert + {QUANTIZATION_BOUND:e}) | agent | finetune (LoRA) | finetune (full) |\n|---|---|---|---|---|---|---|"
    );
    for t in &tasks {
        if let (Some(p), Some(a)) = (find(metrics, PIERN, t), find(metrics, AGENT, t)) {
            let _ = writeln!(
                s,
                "| {t} | {:.6e} | {:.6e} | {:.6e} | {:.6e} | external | external |",
                p.expert_mse,
                p.e2e_mse,
                p.expert_mse + QUANTIZATION_BOUND,
                a.e2e_mse
            );
        }
    }
    let _ = writeln!(s, "\nPiERN insertion checks:\n");
    for m in metrics.iter().filter(|m| m.system == PIERN) {
        let _ = writeln!(
            s,
            "- {}: inserted values exact = {}, LM digits at answer anchors = {}",
            m.task, m.all_inserted_exact, m.anchor_digits
        );
    }

    let _ = writeln!(s, "\n## Agent token decomposition\n");
    let _ = writeln!(s, "| task | stage | tokens | share |\n|---|---|---|---|");
    for (t, d) in decomposition {
        for ((stage, n), share) in d.totals.iter().zip(&d.shares) {
            let _ = writeln!(s, "| {t} | {stage} | {n} | {:.4} |", share);
        }
    }

    let _ = writeln!(s, "\n## Provenance\n");
    for (k, v) in &ctx.seeds {
        let _ = writeln!(s, "- seed `{k}`: {v}");
    }
    for (k, v) in &ctx.dataset_hashes {
        let _ = writeln!(s, "- dataset `{k}`: {v}");
    }
    let c = &ctx.checkpoints;
    let _ = writeln!(s, "- vocabulary: {}", c.vocab);
    let _ = writeln!(s, "- backbone: {}", c.backbone);
    let _ = writeln!(s, "- router: {}", c.router);
    let _ = writeln!(s, "- expert registry: {}", c.registry);
    for (k, v) in &c.experts {
        let _ = writeln!(s, "- expert `{k}`: {v}");
    }
    for (k, v) in &c.aligners {
        let _ = writeln!(s, "- aligner `{k}`: {v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_thresholds() {
        let tol = Tolerance::default();
        assert!(compute_success(AnswerOutcome::Value(0.9736), 0.9736, tol));
        assert!(compute_success(AnswerOutcome::Value(0.9800), 0.9736, tol));
        assert!(!compute_success(AnswerOutcome::Value(0.9850), 0.9736, tol));
        assert!(compute_success(AnswerOutcome::Value(0.0005), 0.0, tol));
        assert!(!compute_success(AnswerOutcome::Value(0.0015), 0.0, tol));
        assert!(!compute_success(AnswerOutcome::FormatFailure, 0.0, tol));
    }

    #[test]
    fn latency_order_statistics() {
        assert_eq!(latency_stats(&[1.0, 2.0, 3.0]).unwrap(), (3.0, 1.0, 2.0));
        assert_eq!(latency_stats(&[0.25]).unwrap(), (0.25, 0.25, 0.25));
        assert!(latency_stats(&[]).is_err());
    }

    #[test]
    fn reductions_match_hand_arithmetic() {
        assert_eq!(reduction(200.0, 10.0), 0.95);
        assert_eq!(reduction(4.0, 1.0), 0.75);
        assert!(reduction(1.0, 2.0) < 0.0);
    }

    fn row(system: &str, i: usize, latency_s: f64) -> RequestRow {
        RequestRow {
            system: system.into(),
            task: "linear".into(),
            request: i,
            oracle: -6.0,
            answer: if i == 1 { None } else { Some(-6.0 + 0.001 * i as f64) },
            success: i != 1,
            tokens: 10 + i,
            macs: 1000,
            expert_calls: 1,
            inserted_exact: true,
            anchor_digits: 0,
            latency_s,
        }
    }

    #[test]
    fn summary_and_csv() {
        let rows: Vec<RequestRow> = (0..3).map(|i| row(PIERN, i, 0.1 * (i + 1) as f64)).collect();
        let refs: Vec<&RequestRow> = rows.iter().collect();
        let m = summarize(PIERN, Task::Linear, &refs, 0.0).unwrap();
        assert_eq!(m.format_failures, 1);
        assert!((m.success_rate - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.e2e_mse - (0.0 + 0.002f64.powi(2)) / 2.0).abs() < 1e-18);
        assert!(m.latency_min <= m.latency_avg && m.latency_avg <= m.latency_max);
        assert_eq!(m.tokens_avg, 11.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        write_csv(&rows, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), rows);
        let a = csv_without_wall_clock(&path).unwrap();
        let slower: Vec<RequestRow> = rows.iter().map(|r| RequestRow { latency_s: r.latency_s * 3.0, ..r.clone() }).collect();
        write_csv(&slower, &path).unwrap();
        assert_eq!(csv_without_wall_clock(&path).unwrap(), a);
        assert!(!a.contains("latency"));
    }
}
