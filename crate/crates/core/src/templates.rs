//! Natural-language task templates and the Stage-2/Stage-3 datasets built
//! from them.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::datagen::{DatasetSplit, Sample, Task};
use crate::error::{PiernError, Result};
use crate::tokenizer::{format_number, parse_number, Vocabulary, BOS};

pub const MIN_TEMPLATES: usize = 4;

const DEFAULT_NONLINEAR: &str = include_str!("../assets/templates/nonlinear.txt");
const DEFAULT_LINEAR: &str = include_str!("../assets/templates/linear.txt");

/// Word that introduces every answer; the prompt is cut right before it.
pub const ANSWER_VERB: &str = "is ";

/// Phrase that marks the answer clause of a task.
pub fn answer_cue(task: Task) -> &'static str {
    match task {
        Task::Nonlinear => "health is ",
        Task::Linear => "profit is ",
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Feature(usize),
    Answer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    source: String,
    pieces: Vec<Piece>,
}

/// A rendered task with its numeric annotations. All positions are byte offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskText {
    pub text: String,
    /// `(range, feature index)` for each embedded input number.
    pub numeric_spans: Vec<(Range<usize>, usize)>,
    /// The expert value starts at this offset.
    pub answer_anchor: usize,
    pub answer_span: Range<usize>,
    /// End of the generation prompt (just before the answer verb's preceding space).
    pub prompt_end: usize,
    pub expert_id: String,
    pub task: Task,
    pub template_id: usize,
}

impl TaskText {
    pub fn prompt(&self) -> &str {
        &self.text[..self.prompt_end]
    }

    /// Text the aligner sees when the router fires.
    pub fn context_at_anchor(&self) -> &str {
        &self.text[..self.answer_anchor]
    }

    /// BOS plus the tokens of the full text up to the answer anchor, as the
    /// model sees them when the answer is due.
    pub fn context_ids(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        let prefix = vocab
            .encode_prefix(&self.text, self.answer_anchor)?
            .ok_or(PiernError::AnchorNotOnBoundary(self.answer_anchor))?;
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend(prefix);
        Ok(ids)
    }

    /// Parses the embedded numbers back, in feature order.
    pub fn parse_features(&self) -> Result<Vec<f64>> {
        let mut x = vec![f64::NAN; self.numeric_spans.len()];
        for (r, k) in &self.numeric_spans {
            x[*k] = parse_number(&self.text[r.clone()])?;
        }
        Ok(x)
    }
}

impl Template {
    /// Parses and validates one template for a task with `n_features` inputs.
    pub fn parse(source: &str, n_features: usize) -> Result<Self> {
        let re = Regex::new(r"\{(feature_(\d+)|answer)\}").expect("static regex");
        let mut pieces = Vec::new();
        let mut last = 0;
        let mut seen = vec![0usize; n_features];
        let mut answers = 0;
        for cap in re.captures_iter(source) {
            let m = cap.get(0).unwrap();
            if m.start() > last {
                pieces.push(Piece::Literal(source[last..m.start()].to_string()));
            }
            match cap.get(2) {
                Some(idx) => {
                    let k: usize = idx.as_str().parse().map_err(|_| PiernError::Template(format!("bad index in {}", m.as_str())))?;
                    if k >= n_features {
                        return Err(PiernError::Template(format!("feature_{k} out of range for {n_features} features")));
                    }
                    if answers > 0 {
                        return Err(PiernError::Template("feature placeholder after the answer".into()));
                    }
                    seen[k] += 1;
                    pieces.push(Piece::Feature(k));
                }
                None => {
                    answers += 1;
                    pieces.push(Piece::Answer);
                }
            }
            last = m.end();
        }
        if last < source.len() {
            pieces.push(Piece::Literal(source[last..].to_string()));
        }
        if let Some(k) = seen.iter().position(|&c| c != 1) {
            return Err(PiernError::Template(format!(
                "feature_{k} used {} times, expected once",
                seen[k]
            )));
        }
        if answers != 1 {
            return Err(PiernError::Template(format!("expected one {{answer}}, found {answers}")));
        }
        for (i, p) in pieces.iter().enumerate() {
            match p {
                Piece::Literal(s) => {
                    if s.chars().any(|c| c.is_ascii_digit()) {
                        return Err(PiernError::Template(format!("literal text contains digits: {s:?}")));
                    }
                    if s.contains('{') || s.contains('}') {
                        return Err(PiernError::Template(format!("unknown placeholder in {s:?}")));
                    }
                }
                Piece::Feature(_) | Piece::Answer => {
                    let before = match i.checked_sub(1).map(|j| &pieces[j]) {
                        Some(Piece::Literal(s)) => s.as_str(),
                        _ => "",
                    };
                    let ok = before.ends_with(' ')
                        && before[..before.len() - 1]
                            .chars()
                            .last()
                            .is_some_and(|c| !c.is_whitespace() && !crate::tokenizer::is_numeric_char(c));
                    if !ok {
                        return Err(PiernError::Template(format!(
                            "placeholder {} must follow a word and one space",
                            i
                        )));
                    }
                    if matches!(p, Piece::Answer) && !before.ends_with(&format!(" {ANSWER_VERB}")) {
                        return Err(PiernError::Template(format!("answer must follow `{ANSWER_VERB}`")));
                    }
                    if let Some(Piece::Literal(after)) = pieces.get(i + 1) {
                        if after.starts_with(|c: char| crate::tokenizer::is_numeric_char(c) && c != '.') {
                            return Err(PiernError::Template("placeholder followed by a numeric character".into()));
                        }
                    }
                }
            }
        }
        Ok(Self {
            source: source.to_string(),
            pieces,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn render(&self, sample: &Sample, template_id: usize) -> Result<TaskText> {
        let mut text = String::new();
        let mut spans = Vec::new();
        let mut anchor = None;
        let mut answer_span = 0..0;
        for p in &self.pieces {
            match p {
                Piece::Literal(s) => text.push_str(s),
                Piece::Feature(k) => {
                    let v = sample
                        .x
                        .get(*k)
                        .ok_or_else(|| PiernError::Shape(format!("sample lacks feature {k}")))?;
                    let s = format_number(*v)?;
                    let start = text.len();
                    text.push_str(&s);
                    spans.push((start..text.len(), *k));
                }
                Piece::Answer => {
                    let start = text.len();
                    anchor = Some(start);
                    text.push_str(&format_number(sample.y)?);
                    answer_span = start..text.len();
                }
            }
        }
        let anchor = anchor.expect("validated at parse");
        let verb_start = anchor - ANSWER_VERB.len();
        let prompt_end = text[..verb_start].trim_end().len();
        Ok(TaskText {
            text,
            numeric_spans: spans,
            answer_anchor: anchor,
            answer_span,
            prompt_end,
            expert_id: sample.task.id().to_string(),
            task: sample.task,
            template_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub task: Task,
    templates: Vec<Template>,
}

impl TemplateSet {
    pub fn new(task: Task, sources: &[&str]) -> Result<Self> {
        if sources.len() < MIN_TEMPLATES {
            return Err(PiernError::Template(format!(
                "{task} needs at least {MIN_TEMPLATES} templates, got {}",
                sources.len()
            )));
        }
        let templates = sources
            .iter()
            .map(|s| Template::parse(s, task.input_dim()))
            .collect::<Result<Vec<_>>>()?;
        let cue = answer_cue(task);
        for t in &templates {
            if !t.source.contains(&format!("{cue}{{answer}}")) {
                return Err(PiernError::Template(format!("{task} template lacks answer cue `{cue}`")));
            }
        }
        Ok(Self { task, templates })
    }

    /// Plain-text format: one template per line, `#` comments, blank lines ignored.
    pub fn parse_file_contents(task: Task, contents: &str) -> Result<Self> {
        let lines: Vec<&str> = contents
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .collect();
        Self::new(task, &lines)
    }

    pub fn load(task: Task, path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| PiernError::io(path, e))?;
        Self::parse_file_contents(task, &s)
    }

    pub fn builtin(task: Task) -> Self {
        let src = match task {
            Task::Nonlinear => DEFAULT_NONLINEAR,
            Task::Linear => DEFAULT_LINEAR,
        };
        Self::parse_file_contents(task, src).expect("built-in templates are valid")
    }

    pub fn builtin_source(task: Task) -> &'static str {
        match task {
            Task::Nonlinear => DEFAULT_NONLINEAR,
            Task::Linear => DEFAULT_LINEAR,
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Template> {
        self.templates.get(id)
    }

    pub fn render(&self, sample: &Sample, template_id: usize) -> Result<TaskText> {
        if sample.task != self.task {
            return Err(PiernError::Template(format!("{} sample for {} templates", sample.task, self.task)));
        }
        let t = self
            .templates
            .get(template_id)
            .ok_or_else(|| PiernError::Template(format!("no template {template_id}")))?;
        t.render(sample, template_id)
    }
}

/// Stage-2 pair: the text the aligner reads and the expert input it must produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Text2CompPair {
    pub text: String,
    pub x: Vec<f64>,
    pub task: Task,
    pub template_id: usize,
}

/// Pairs every sample with a uniformly drawn template.
pub fn build_stage_datasets(
    samples: &[Sample],
    templates: &TemplateSet,
    seed: u64,
) -> Result<(Vec<Text2CompPair>, Vec<TaskText>)> {
    if templates.is_empty() {
        return Err(PiernError::Template("empty template set".into()));
    }
    if samples.is_empty() {
        return Err(PiernError::Empty("stage dataset samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for s in samples {
        let tid = rng.gen_range(0..templates.len());
        let tt = templates.render(s, tid)?;
        pairs.push(Text2CompPair {
            text: tt.context_at_anchor().to_string(),
            x: s.x.clone(),
            task: s.task,
            template_id: tid,
        });
        texts.push(tt);
    }
    Ok((pairs, texts))
}

/// Convenience wrapper over the training half of a split.
pub fn build_from_split(split: &DatasetSplit, templates: &TemplateSet, seed: u64) -> Result<(Vec<Text2CompPair>, Vec<TaskText>)> {
    build_stage_datasets(&split.train, templates, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    fn linear_sample() -> Sample {
        Sample {
            task: Task::Linear,
            x: vec![0.01, 0.1, 100.0, 0.5],
            y: 4.0,
            template_id: None,
        }
    }

    #[test]
    fn renders_canonical_numbers_with_spans() {
        let set = TemplateSet::builtin(Task::Linear);
        let tt = set.render(&linear_sample(), 0).unwrap();
        for s in ["0.0100", "0.1000", "100.0000", "0.5000"] {
            assert!(tt.text.contains(s), "{}", tt.text);
        }
        assert_eq!(tt.numeric_spans.len(), 4);
        assert_eq!(tt.parse_features().unwrap(), vec![0.01, 0.1, 100.0, 0.5]);
        assert!(tt.numeric_spans.iter().all(|(r, _)| r.end <= tt.answer_anchor));
        assert!(tt.text[..tt.answer_anchor].ends_with("profit is "));
        assert_eq!(&tt.text[tt.answer_span.clone()], "4.0000");
        assert!(tt.prompt().ends_with("profit"));
        assert_eq!(set.render(&linear_sample(), 0).unwrap(), tt);
    }

    #[test]
    fn battery_answer_slot() {
        let t = Template::parse("The battery health is {answer}.", 0).unwrap();
        let s = Sample {
            task: Task::Nonlinear,
            x: vec![],
            y: 0.95,
            template_id: None,
        };
        let tt = t.render(&s, 0).unwrap();
        assert_eq!(tt.text, "The battery health is 0.9500.");
        assert_eq!(&tt.text[..tt.answer_anchor], "The battery health is ");
        assert_eq!(tt.prompt(), "The battery health");
    }

    #[test]
    fn registration_errors() {
        assert!(Template::parse("a {feature_0} b is {answer}", 2).is_err());
        assert!(Template::parse("a {feature_0} b {feature_0} is {answer}", 1).is_err());
        assert!(Template::parse("a {feature_0} b", 1).is_err());
        assert!(Template::parse("has 3 items {feature_0} is {answer}", 1).is_err());
        assert!(Template::parse("is {answer} then {feature_0}", 1).is_err());
        assert!(TemplateSet::new(Task::Linear, &["x {feature_0} {feature_1} {feature_2} {feature_3} profit is {answer}"]).is_err());
    }

    #[test]
    fn builtin_sets_are_valid() {
        for task in Task::ALL {
            assert!(TemplateSet::builtin(task).len() >= MIN_TEMPLATES);
        }
    }

    #[test]
    fn stage_datasets_cover_templates() {
        let split = generate_dataset(Task::Linear, (100, 1), 0).unwrap();
        let set = TemplateSet::builtin(Task::Linear);
        let (pairs, texts) = build_stage_datasets(&split.train, &set, 3).unwrap();
        let mut counts = [0; 4];
        for p in &pairs {
            counts[p.template_id] += 1;
        }
        assert!(counts.iter().all(|&c| (10..=40).contains(&c)), "{counts:?}");
        for (p, t) in pairs.iter().zip(&texts) {
            assert_eq!(t.parse_features().unwrap(), p.x);
        }
        let again = build_stage_datasets(&split.train, &set, 3).unwrap();
        assert_eq!(again.0, pairs);
    }

    #[test]
    fn nonlinear_spans_parse_back() {
        let split = generate_dataset(Task::Nonlinear, (40, 1), 5).unwrap();
        let set = TemplateSet::builtin(Task::Nonlinear);
        for (i, s) in split.train.iter().enumerate() {
            let tt = set.render(s, i % set.len()).unwrap();
            assert_eq!(tt.parse_features().unwrap(), s.x);
        }
    }
}
