//! Routed generation: at every step the router reads the backbone's last
//! hidden state and either lets the LM emit one token or hands the sequence
//! to an expert, whose formatted output is inserted as one event.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backbone::{next_token, Backbone, DecodeMode, LmState};
use crate::datagen::Task;
use crate::error::{PiernError, Result};
use crate::expert::{ExpertSet, LM_CLASS};
use crate::router::RouterModel;
use crate::templates::{answer_cue, ANSWER_VERB};
use crate::text2comp::Aligner;
use crate::tokenizer::{format_number, is_canonical, parse_number, Vocabulary, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Lm {
        token: u32,
        text: String,
    },
    Expert {
        expert_id: String,
        /// Aligner estimate of the expert inputs, raw units.
        x_hat: Vec<f64>,
        raw_value: f64,
        inserted: String,
        tokens: Vec<u32>,
    },
}

impl TraceEvent {
    pub fn text(&self) -> &str {
        match self {
            TraceEvent::Lm { text, .. } => text,
            TraceEvent::Expert { inserted, .. } => inserted,
        }
    }

    pub fn token_count(&self) -> usize {
        match self {
            TraceEvent::Lm { .. } => 1,
            TraceEvent::Expert { tokens, .. } => tokens.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub events: Vec<TraceEvent>,
}

impl GenerationTrace {
    /// Concatenated event text.
    pub fn text(&self) -> String {
        self.events.iter().map(TraceEvent::text).collect()
    }

    pub fn generated_tokens(&self) -> usize {
        self.events.iter().map(TraceEvent::token_count).sum()
    }

    pub fn expert_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Expert { .. }))
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            let line = serde_json::to_string(e)?;
            writeln!(w, "{line}").map_err(|err| PiernError::io("<trace>", err))?;
        }
        Ok(())
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let events = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { events })
    }
}

/// Decoding state of one request.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub lm: LmState,
    pub prompt_tokens: usize,
    pub steps: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
    pub trace: GenerationTrace,
    pub finished: bool,
    /// Router, aligner and expert multiply-accumulates; backbone work lives in `lm`.
    pub side_macs: u64,
}

impl GenerationState {
    pub fn generated_tokens(&self) -> usize {
        self.trace.generated_tokens()
    }
}

/// Result of one routed generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: String,
    /// Generated continuation; equals the concatenated trace text.
    pub text: String,
    pub trace: GenerationTrace,
    pub prompt_tokens: usize,
    pub macs: u64,
}

impl Generation {
    pub fn full_text(&self) -> String {
        format!("{}{}", self.prompt, self.text)
    }

    /// Prompt tokens (with BOS) plus every generated token.
    pub fn total_tokens(&self) -> usize {
        self.prompt_tokens + self.trace.generated_tokens()
    }
}

/// Parameter hashes of every component of a loaded system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentHashes {
    pub vocab: String,
    pub backbone: String,
    pub router: String,
    pub registry: String,
    pub experts: BTreeMap<String, String>,
    pub aligners: BTreeMap<String, String>,
}

/// Frozen backbone, experts, aligners and router wired together.
#[derive(Debug, Clone)]
pub struct Piern {
    pub vocab: Vocabulary,
    pub backbone: Backbone,
    pub experts: ExpertSet,
    /// One aligner per expert, in registry order.
    pub aligners: Vec<Aligner>,
    pub router: RouterModel,
}

impl Piern {
    pub fn new(
        vocab: Vocabulary,
        backbone: Backbone,
        experts: ExpertSet,
        aligners: Vec<Aligner>,
        router: RouterModel,
    ) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(PiernError::NotFrozen("backbone".into()));
        }
        if !router.is_frozen() {
            return Err(PiernError::NotFrozen("router".into()));
        }
        if vocab.len() != backbone.vocab_size {
            return Err(PiernError::Shape(format!(
                "vocabulary has {} tokens, backbone {}",
                vocab.len(),
                backbone.vocab_size
            )));
        }
        router.check_registry(&experts)?;
        if router.net.input_dim() != backbone.d_model() {
            return Err(PiernError::Shape(format!(
                "router reads {} features, backbone has {}",
                router.net.input_dim(),
                backbone.d_model()
            )));
        }
        let mut ordered = Vec::with_capacity(experts.len());
        for id in experts.ids() {
            let al = aligners
                .iter()
                .find(|a| a.expert_id == id)
                .ok_or_else(|| PiernError::UnknownExpert(format!("no aligner for {id}")))?;
            if !al.is_frozen() {
                return Err(PiernError::NotFrozen(format!("aligner {id}")));
            }
            if al.d_model != backbone.d_model() || al.vocab_size != vocab.len() {
                return Err(PiernError::Shape(format!("aligner {id} does not match the backbone")));
            }
            if al.slots() != experts.get(id)?.input_dim() {
                return Err(PiernError::Shape(format!("aligner {id} has {} slots", al.slots())));
            }
            ordered.push(al.clone());
        }
        Ok(Self {
            vocab,
            backbone,
            experts,
            aligners: ordered,
            router,
        })
    }

    pub fn hashes(&self) -> ComponentHashes {
        ComponentHashes {
            vocab: self.vocab.hash(),
            backbone: self.backbone.hash(),
            router: self.router.hash(),
            registry: self.experts.registry_hash(),
            experts: self.experts.models().map(|m| (m.id.clone(), m.compute_hash())).collect(),
            aligners: self.aligners.iter().map(|a| (a.expert_id.clone(), a.hash())).collect(),
        }
    }

    pub fn begin(&self, prompt: &str, max_len: usize, mode: DecodeMode) -> Result<GenerationState> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(prompt)?);
        self.check_room(ids.len())?;
        let mut lm = self.backbone.start();
        self.backbone.append(&mut lm, &ids)?;
        Ok(GenerationState {
            lm,
            prompt_tokens: ids.len(),
            steps: 0,
            max_len,
            mode,
            trace: GenerationTrace::default(),
            finished: false,
            side_macs: 0,
        })
    }

    fn check_room(&self, len: usize) -> Result<()> {
        let max = self.backbone.config.context;
        if len > max {
            return Err(PiernError::ContextOverflow { len, max });
        }
        Ok(())
    }

    /// One routed step. Returns false once the request is finished.
    pub fn step<R: Rng + ?Sized>(&self, st: &mut GenerationState, rng: &mut R) -> Result<bool> {
        if st.finished || st.generated_tokens() >= st.max_len {
            st.finished = true;
            return Ok(false);
        }
        let class = self.router.route(st.lm.last_hidden())?;
        st.side_macs += self.router.macs();
        st.steps += 1;
        if class == LM_CLASS {
            let token = if matches!(st.trace.events.last(), Some(TraceEvent::Expert { .. })) {
                // an inserted number is closed: no digit may extend it
                let mut logits = st.lm.logits().to_vec();
                for (id, l) in logits.iter_mut().enumerate() {
                    if self.vocab.is_digit_token(id as u32) {
                        *l = f64::NEG_INFINITY;
                    }
                }
                next_token(&logits, st.mode, rng)
            } else {
                next_token(st.lm.logits(), st.mode, rng)
            };
            let text = self.vocab.decode(&[token])?;
            st.trace.events.push(TraceEvent::Lm { token, text });
            if token == EOS {
                st.finished = true;
                return Ok(false);
            }
            self.check_room(st.lm.len() + 1)?;
            self.backbone.append(&mut st.lm, &[token])?;
        } else {
            let expert = self
                .experts
                .by_class(class)
                .ok_or_else(|| PiernError::UnknownExpert(format!("routing class {class}")))?;
            let aligner = &self.aligners[class - 1];
            let z = aligner.extract_inputs(st.lm.ids(), st.lm.hidden())?;
            st.side_macs += aligner.macs(st.lm.ids());
            let x_hat = aligner.stats.denormalize_x(&z);
            let raw_value = expert.predict(&x_hat)?;
            st.side_macs += expert.macs_per_call();
            let inserted = format_number(raw_value)?;
            let tokens = self.vocab.encode(&inserted)?;
            self.check_room(st.lm.len() + tokens.len())?;
            self.backbone.append(&mut st.lm, &tokens)?;
            st.trace.events.push(TraceEvent::Expert {
                expert_id: expert.id.clone(),
                x_hat,
                raw_value,
                inserted,
                tokens,
            });
        }
        if st.generated_tokens() >= st.max_len {
            st.finished = true;
        }
        Ok(!st.finished)
    }

    pub fn generate<R: Rng + ?Sized>(&self, prompt: &str, max_len: usize, mode: DecodeMode, rng: &mut R) -> Result<Generation> {
        let mut st = self.begin(prompt, max_len, mode)?;
        while self.step(&mut st, rng)? {}
        Ok(Generation {
            prompt: prompt.to_string(),
            text: st.trace.text(),
            prompt_tokens: st.prompt_tokens,
            macs: st.lm.macs() + st.side_macs,
            trace: st.trace,
        })
    }
}

/// Outcome of reading the answer out of a generated text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnswerOutcome {
    Value(f64),
    FormatFailure,
}

impl AnswerOutcome {
    pub fn value(self) -> Option<f64> {
        match self {
            AnswerOutcome::Value(v) => Some(v),
            AnswerOutcome::FormatFailure => None,
        }
    }
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?[0-9]+(?:\.[0-9]+)?").expect("valid pattern"))
}

/// First canonical number after the task's answer clause.
pub fn extract_answer(text: &str, task: Task) -> AnswerOutcome {
    let cue = answer_cue(task);
    let Some(at) = text.find(cue) else {
        return AnswerOutcome::FormatFailure;
    };
    number_pattern()
        .find_iter(&text[at + cue.len()..])
        .map(|m| m.as_str())
        .find(|s| is_canonical(s))
        .and_then(|s| parse_number(s).ok())
        .map_or(AnswerOutcome::FormatFailure, AnswerOutcome::Value)
}

/// LM steps that emitted a digit or sign right after the answer verb.
pub fn anchor_digit_violations(prompt: &str, trace: &GenerationTrace, vocab: &Vocabulary) -> usize {
    let mut text = prompt.to_string();
    let minus = vocab.id("-");
    let mut count = 0;
    for e in &trace.events {
        if let TraceEvent::Lm { token, .. } = e {
            if (vocab.is_digit_token(*token) || Some(*token) == minus) && text.ends_with(ANSWER_VERB) {
                count += 1;
            }
        }
        text.push_str(e.text());
    }
    count
}

/// Checks that every expert event inserted exactly the formatted value.
pub fn insertion_exact(trace: &GenerationTrace, vocab: &Vocabulary) -> Result<bool> {
    for e in trace.expert_events() {
        if let TraceEvent::Expert {
            raw_value,
            inserted,
            tokens,
            ..
        } = e
        {
            let expect = format_number(*raw_value)?;
            if *inserted != expect || vocab.decode(tokens)? != expect || parse_number(inserted)? != parse_number(&expect)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_are_read_after_the_cue() {
        assert_eq!(
            extract_answer("So the battery health is 0.9500, which is fine.", Task::Nonlinear),
            AnswerOutcome::Value(0.95)
        );
        assert_eq!(extract_answer("The net profit is -6.0000.", Task::Linear), AnswerOutcome::Value(-6.0));
        assert_eq!(extract_answer("no number here", Task::Linear), AnswerOutcome::FormatFailure);
        assert_eq!(extract_answer("profit is 1.5 then 2.0000", Task::Linear), AnswerOutcome::Value(2.0));
        assert_eq!(extract_answer("first 0.1000 and the health is", Task::Nonlinear), AnswerOutcome::FormatFailure);
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let trace = GenerationTrace {
            events: vec![
                TraceEvent::Lm { token: 7, text: " is ".into() },
                TraceEvent::Expert {
                    expert_id: "linear".into(),
                    x_hat: vec![0.1, 2.0],
                    raw_value: -6.00001,
                    inserted: "-6.0000".into(),
                    tokens: vec![3, 4, 5, 4, 4, 4, 4],
                },
                TraceEvent::Lm { token: EOS, text: String::new() },
            ],
        };
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert_eq!(GenerationTrace::from_jsonl(&s).unwrap(), trace);
        assert_eq!(trace.text(), " is -6.0000");
        assert_eq!(trace.generated_tokens(), 9);
    }

    #[test]
    fn anchor_digits_are_counted() {
        let vocab = Vocabulary::build(&["the health is 0.5"]).unwrap();
        let five = vocab.id("5").unwrap();
        let trace = GenerationTrace {
            events: vec![
                TraceEvent::Lm { token: five, text: "5".into() },
                TraceEvent::Lm { token: five, text: "5".into() },
            ],
        };
        assert_eq!(anchor_digit_violations("the health is ", &trace, &vocab), 1);
        assert_eq!(anchor_digit_violations("the health", &trace, &vocab), 0);
    }
}
