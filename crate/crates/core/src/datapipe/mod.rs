//! Dataset pipeline: colloquialization, chain-of-thought generation and speech
//! synthesis behind pluggable providers, plus JSONL manifests and stratified
//! split assignment.

mod providers;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use providers::{
    CommandReasoner, CommandTts, MockTts, OracleReasoner, ProviderResult, ReasoningGenerator,
    SpeechSynthesizer, Synthesis,
};

use crate::env::{LogicTask, TaskConfig, TaskGenerator};
use crate::error::{Error, Result};
use crate::optimizer::stream_seed;
use crate::reward::{extract_answer, AnswerLabel, OutputModality, ANSWER_MARKER};

const DEFAULT_SYSTEM: &str = "Your task is to decide if the conclusion is \"entailed\" or \"not-entailed\" based on these premises. You are a wise person who answers two-choice questions, \"entailed\" or \"not entailed\". Use plain text for thought processes and answers, not markdown or LaTeX. The thought process and response style should be colloquial, which I can then translate directly into audio using the TTS model. The final output is the Answer, nothing else, and the format is Answer: YOUR ANSWER. For example: \"Answer: entailed.\" or \"Answer: not entailed.\" The final answer must contain nothing else! The thought process should be very complete, careful, and cautious. When you think and generate a chain of thought, you need to test your answer from various angles.";

const DEFAULT_BEFORE_MAJOR: &str = "Let's figure out the logical connection between these premises and the conclusion. You have two choices: \"entailed\" means the conclusion must be true based on the given premises, or \"not-entailed\" means the conclusion can't be true based on the premises. Here's the setup:";

const DEFAULT_BEHIND_CONCLUSION: &str = "Your task is to decide is the conclusion is \"entailed\" or \"not-entailed\" based on these premises.";

/// Window (in characters) searched for the answer in generated reasoning.
const ANSWER_WINDOW: usize = 30;

/// The three instructional prompts wrapped around every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub system: String,
    pub before_major: String,
    pub behind_conclusion: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.into(),
            before_major: DEFAULT_BEFORE_MAJOR.into(),
            behind_conclusion: DEFAULT_BEHIND_CONCLUSION.into(),
        }
    }
}

const SECTIONS: [&str; 3] = ["system", "before_major", "behind_conclusion"];

impl PromptTemplates {
    pub fn validate(&self) -> Result<()> {
        for (name, text) in SECTIONS.iter().zip(self.sections()) {
            if text.trim().is_empty() {
                return Err(Error::config(format!("template section [{name}] is empty")));
            }
        }
        if !self.system.contains(ANSWER_MARKER) {
            return Err(Error::config(format!(
                "the system template must state the `{ANSWER_MARKER}` answer format"
            )));
        }
        Ok(())
    }

    fn sections(&self) -> [&str; 3] {
        [&self.system, &self.before_major, &self.behind_conclusion]
    }

    /// Parses the template file format: `[system]`, `[before_major]` and
    /// `[behind_conclusion]` headers, each followed by its text. Lines before
    /// the first header that are blank or start with `#` are ignored; section
    /// bodies are trimmed and internal lines joined with single spaces.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bodies: [Option<Vec<&str>>; 3] = [None, None, None];
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let idx = SECTIONS.iter().position(|s| *s == name.trim()).ok_or_else(|| {
                    Error::config(format!("template line {}: unknown section [{name}]", lineno + 1))
                })?;
                if bodies[idx].is_some() {
                    return Err(Error::config(format!(
                        "template line {}: duplicate section [{name}]",
                        lineno + 1
                    )));
                }
                bodies[idx] = Some(Vec::new());
                current = Some(idx);
                continue;
            }
            match current {
                Some(i) => bodies[i].as_mut().expect("opened").push(line),
                None if line.is_empty() || line.starts_with('#') => {}
                None => {
                    return Err(Error::config(format!(
                        "template line {}: text before the first section header",
                        lineno + 1
                    )))
                }
            }
        }
        let take = |i: usize| -> Result<String> {
            let lines = bodies[i]
                .as_ref()
                .ok_or_else(|| Error::config(format!("template is missing [{}]", SECTIONS[i])))?;
            Ok(lines
                .iter()
                .filter(|l| !l.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join(" "))
        };
        let t = Self {
            system: take(0)?,
            before_major: take(1)?,
            behind_conclusion: take(2)?,
        };
        t.validate()?;
        Ok(t)
    }

    /// Inverse of [`PromptTemplates::parse`] for single-line sections.
    pub fn to_file_text(&self) -> String {
        SECTIONS
            .iter()
            .zip(self.sections())
            .map(|(name, body)| format!("[{name}]\n{body}\n"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// A major premise, a minor premise and a conclusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub major: String,
    pub minor: String,
    pub conclusion: String,
}

impl Triplet {
    pub fn new(major: impl Into<String>, minor: impl Into<String>, conclusion: impl Into<String>) -> Self {
        Self {
            major: major.into(),
            minor: minor.into(),
            conclusion: conclusion.into(),
        }
    }

    pub fn from_task(task: &LogicTask) -> Self {
        Self::new(
            task.major.to_string(),
            task.minor.to_string(),
            task.conclusion.to_string(),
        )
    }
}

const MAJOR_LEAD: &str = "Major premise is ";
const MINOR_LEAD: &str = " Minor premise is ";
const CONCLUSION_LEAD: &str = " Conclusion is ";

/// Wraps a triplet in the instructional prompts as conversational user content.
pub fn colloquialize(triplet: &Triplet, templates: &PromptTemplates) -> Result<String> {
    for (name, part) in [
        ("major premise", &triplet.major),
        ("minor premise", &triplet.minor),
        ("conclusion", &triplet.conclusion),
    ] {
        if part.trim().is_empty() {
            return Err(Error::config(format!("the {name} is empty")));
        }
    }
    Ok(format!(
        "{} {MAJOR_LEAD}{}.{MINOR_LEAD}{}.{CONCLUSION_LEAD}{}. {}",
        templates.before_major.trim(),
        triplet.major.trim(),
        triplet.minor.trim(),
        triplet.conclusion.trim(),
        templates.behind_conclusion.trim()
    ))
}

/// Recovers the triplet from user content produced by [`colloquialize`].
pub fn parse_user_content(content: &str, templates: &PromptTemplates) -> Result<Triplet> {
    let bad = |m: &str| Error::config(format!("user content does not follow the template: {m}"));
    let body = content
        .strip_prefix(templates.before_major.trim())
        .ok_or_else(|| bad("missing leading prompt"))?;
    let body = body
        .strip_suffix(templates.behind_conclusion.trim())
        .ok_or_else(|| bad("missing closing prompt"))?
        .trim();
    let body = body
        .strip_prefix(MAJOR_LEAD.trim_start())
        .ok_or_else(|| bad("missing major premise"))?;
    let (major, rest) = body
        .split_once(&format!(".{MINOR_LEAD}"))
        .ok_or_else(|| bad("missing minor premise"))?;
    let (minor, rest) = rest
        .rsplit_once(&format!(".{CONCLUSION_LEAD}"))
        .ok_or_else(|| bad("missing conclusion"))?;
    let conclusion = rest.strip_suffix('.').ok_or_else(|| bad("unterminated conclusion"))?;
    Ok(Triplet::new(major, minor, conclusion))
}

/// Dataset split of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "validation" | "valid" | "val" | "dev" => Ok(Split::Validation),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// One dataset entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub user_content_text: String,
    pub cot_text: String,
    pub answer: AnswerLabel,
    pub input_audio_ref: String,
    pub output_audio_ref: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_duration_s: f64,
    pub output_duration_s: f64,
    pub split: Split,
    /// Output modality the sample was prepared for, when it is restricted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_modality: Option<OutputModality>,
}

impl SampleRecord {
    /// Schema checks that serde cannot express.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        for (name, v) in [
            ("input_duration_s", self.input_duration_s),
            ("output_duration_s", self.output_duration_s),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Fractions of the corpus assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.804,
            test: 0.102,
            validation: 0.094,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.test, self.validation]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|f| !f.is_finite() || *f < 0.0 || *f > 1.0) {
            return Err(Error::config(format!("split fractions must lie in [0, 1], got {a:?}")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items by `fractions`; ties go to
/// the earlier split.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    // Guard against floating error pushing the floor sum above `n`.
    while counts.iter().sum::<usize>() > n {
        let i = (0..3).max_by_key(|&i| counts[i]).expect("three splits");
        counts[i] -= 1;
    }
    counts
}

/// Assigns splits: split totals by largest remainder over the whole corpus,
/// entailed quotas by largest remainder within the class, and a seeded
/// shuffle within each class decides which records go where. Record order
/// is unchanged.
pub fn assign_splits<R: Rng + ?Sized>(
    records: &mut [SampleRecord],
    fractions: &SplitFractions,
    rng: &mut R,
) -> Result<()> {
    fractions.validate()?;
    let f = fractions.as_array();
    let totals = apportion(records.len(), &f);
    let mut entailed_idx: Vec<usize> = Vec::new();
    let mut other_idx: Vec<usize> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.answer {
            AnswerLabel::Entailed => entailed_idx.push(i),
            AnswerLabel::NotEntailed => other_idx.push(i),
        }
    }
    let mut ent = apportion(entailed_idx.len(), &f);
    let mut not: [isize; 3] = [0; 3];
    for s in 0..3 {
        not[s] = totals[s] as isize - ent[s] as isize;
    }
    // Small corpora can leave a split with more entailed slots than total
    // slots; move those entailed slots to the split with the most room.
    while let Some(s) = (0..3).find(|&s| not[s] < 0) {
        let t = (0..3).max_by_key(|&t| (not[t], std::cmp::Reverse(t))).expect("three splits");
        ent[s] -= 1;
        not[s] += 1;
        ent[t] += 1;
        not[t] -= 1;
    }
    entailed_idx.shuffle(rng);
    other_idx.shuffle(rng);
    let mut place = |idx: &[usize], quotas: [usize; 3]| {
        let mut it = idx.iter();
        for (s, q) in Split::ALL.iter().zip(quotas) {
            for &i in it.by_ref().take(q) {
                records[i].split = *s;
            }
        }
    };
    place(&entailed_idx, ent);
    place(&other_idx, not.map(|x| x as usize));
    Ok(())
}

/// Runs the three pipeline stages for one sample.
pub fn build_sample(
    id: &str,
    triplet: &Triplet,
    label: AnswerLabel,
    generator: &dyn ReasoningGenerator,
    tts: &dyn SpeechSynthesizer,
    templates: &PromptTemplates,
) -> Result<SampleRecord> {
    let fail = |stage: &'static str, message: String| Error::Provider {
        stage,
        sample_id: id.to_string(),
        message,
    };
    let user = colloquialize(triplet, templates).map_err(|e| fail("colloquialize", e.to_string()))?;
    let cot = generator
        .generate(&templates.system, &user)
        .map_err(|m| fail("generate", m))?;
    let answer = extract_answer(&cot, ANSWER_WINDOW).ok_or_else(|| {
        fail(
            "generate",
            format!("output does not end with a parseable `{ANSWER_MARKER} <label>` tail"),
        )
    })?;
    if generator.is_oracle() && answer != label {
        return Err(fail(
            "generate",
            format!("oracle answered {answer} but the task is {label}"),
        ));
    }
    let input = tts.synthesize(&user).map_err(|m| fail("tts", m))?;
    let output = tts.synthesize(&cot).map_err(|m| fail("tts", m))?;
    Ok(SampleRecord {
        id: id.to_string(),
        input_tokens: user.split_whitespace().count() as u64,
        output_tokens: cot.split_whitespace().count() as u64,
        user_content_text: user,
        cot_text: cot,
        answer,
        input_audio_ref: input.handle,
        output_audio_ref: output.handle,
        input_duration_s: input.duration_s,
        output_duration_s: output.duration_s,
        split: Split::Train,
        output_modality: None,
    })
}

/// Settings for a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    pub task: TaskConfig,
    pub fractions: SplitFractions,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 7,
            task: TaskConfig::default(),
            fractions: SplitFractions::default(),
        }
    }
}

const CORPUS_TASKS: u64 = 11;
const CORPUS_SPLITS: u64 = 12;

/// Generates labelled tasks, runs the pipeline on each sample in parallel
/// (results kept in task order) and assigns splits.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    generator: &dyn ReasoningGenerator,
    tts: &dyn SpeechSynthesizer,
    templates: &PromptTemplates,
) -> Result<Vec<SampleRecord>> {
    if cfg.n == 0 {
        return Err(Error::config("the corpus needs at least one sample (n > 0)"));
    }
    templates.validate()?;
    cfg.fractions.validate()?;
    let mut gen = TaskGenerator::new(cfg.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, CORPUS_TASKS, 0));
    let tasks = gen.generate_batch(cfg.n, &mut rng)?;
    let mut records = tasks
        .par_iter()
        .map(|t| {
            let mut r = build_sample(
                &t.id,
                &Triplet::from_task(&t.task),
                t.task.label,
                generator,
                tts,
                templates,
            )?;
            r.output_modality = match cfg.task.modality {
                crate::env::ModalityMix::Fixed(_) => None,
                crate::env::ModalityMix::Mixed => Some(t.requested_output),
            };
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, CORPUS_SPLITS, 0));
    assign_splits(&mut records, &cfg.fractions, &mut split_rng)?;
    Ok(records)
}

/// Writes one JSON object per line.
pub fn write_manifest_to<W: Write>(mut out: W, records: &[SampleRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL manifest; `name` labels errors. Blank lines are skipped.
/// Every record is validated and ids must be unique.
pub fn read_manifest_from<R: BufRead>(reader: R, name: &str) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let err = |message: String| Error::Manifest {
            path: name.to_string(),
            line: lineno,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        record.validate().map_err(err)?;
        if let Some(prev) = seen.insert(record.id.clone(), lineno) {
            return Err(err(format!("duplicate id {:?} (first seen on line {prev})", record.id)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dataset_stats;
    use proptest::prelude::*;

    fn record(id: usize, answer: AnswerLabel) -> SampleRecord {
        SampleRecord {
            id: format!("s{id}"),
            user_content_text: "u".into(),
            cot_text: "Answer: entailed.".into(),
            answer,
            input_audio_ref: "mock:tts:0".into(),
            output_audio_ref: "mock:tts:1".into(),
            input_tokens: 158,
            output_tokens: 1424,
            input_duration_s: 63.2,
            output_duration_s: 569.6,
            split: Split::Train,
            output_modality: None,
        }
    }

    #[test]
    fn default_templates_are_valid_and_round_trip() {
        let t = PromptTemplates::default();
        t.validate().unwrap();
        assert!(t.system.contains("Answer: YOUR ANSWER"));
        assert_eq!(PromptTemplates::parse(&t.to_file_text()).unwrap(), t);
        let multi = "# comment\n[system]\nsay Answer: x\nplease\n\n[before_major]\nb\n[behind_conclusion]\nc\n";
        let p = PromptTemplates::parse(multi).unwrap();
        assert_eq!(p.system, "say Answer: x please");
        assert!(PromptTemplates::parse("[system]\nAnswer:\n[before_major]\nb\n").is_err());
        assert!(PromptTemplates::parse("[system]\nno marker\n[before_major]\nb\n[behind_conclusion]\nc").is_err());
        assert!(PromptTemplates::parse("stray\n[system]\nAnswer:").is_err());
        assert!(PromptTemplates::parse("[other]\nx").is_err());
    }

    #[test]
    fn colloquialize_examples() {
        let t = PromptTemplates::default();
        let tri = Triplet::new("if A then B", "A", "not B or A");
        let s = colloquialize(&tri, &t).unwrap();
        for part in ["if A then B", "A", "not B or A"] {
            assert!(s.contains(part));
        }
        assert!(s.contains("Major premise is if A then B."));
        assert!(s.ends_with("\"entailed\" or \"not-entailed\" based on these premises."));
        assert_eq!(s, colloquialize(&tri, &t).unwrap());
        assert_eq!(parse_user_content(&s, &t).unwrap(), tri);
        assert!(colloquialize(&Triplet::new("", "A", "B"), &t).is_err());
        assert!(colloquialize(&Triplet::new("A", "A", "  "), &t).is_err());
    }

    #[test]
    fn build_sample_with_mocks() {
        let t = PromptTemplates::default();
        let gen = OracleReasoner::new(t.clone());
        let r = build_sample(
            "x1",
            &Triplet::new("if A then B", "A", "B"),
            AnswerLabel::Entailed,
            &gen,
            &MockTts::default(),
            &t,
        )
        .unwrap();
        assert_eq!(r.answer, AnswerLabel::Entailed);
        assert!(r.cot_text.ends_with("Answer: entailed."));
        assert_eq!(r.input_tokens, r.user_content_text.split_whitespace().count() as u64);
        assert_eq!(r.input_duration_s, r.input_tokens as f64 * 0.4);
        assert_eq!(r.output_duration_s, r.output_tokens as f64 * 0.4);
        // The oracle disagrees with a wrong label.
        let e = build_sample("x2", &Triplet::new("if A then B", "A", "B"), AnswerLabel::NotEntailed, &gen, &MockTts::default(), &t)
            .unwrap_err();
        assert!(matches!(e, Error::Provider { stage: "generate", .. }));
    }

    struct FailingTts;
    impl SpeechSynthesizer for FailingTts {
        fn synthesize(&self, _: &str) -> ProviderResult<Synthesis> {
            Err("device unavailable".into())
        }
    }

    struct NoAnswer;
    impl ReasoningGenerator for NoAnswer {
        fn generate(&self, _: &str, _: &str) -> ProviderResult<String> {
            Ok("I think it is entailed".into())
        }
    }

    #[test]
    fn provider_errors_name_stage_and_sample() {
        let t = PromptTemplates::default();
        let tri = Triplet::new("A", "A", "A");
        let e = build_sample("s-42", &tri, AnswerLabel::Entailed, &OracleReasoner::new(t.clone()), &FailingTts, &t)
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("tts") && msg.contains("s-42"), "{msg}");
        let e = build_sample("s-43", &tri, AnswerLabel::Entailed, &NoAnswer, &MockTts::default(), &t).unwrap_err();
        assert!(matches!(e, Error::Provider { stage: "generate", ref sample_id, .. } if sample_id == "s-43"));
    }

    #[test]
    fn apportion_table3_totals() {
        let f = SplitFractions::default().as_array();
        assert_eq!(apportion(6446, &f), [5183, 657, 606]);
        assert_eq!(apportion(10, &[1.0, 0.0, 0.0]), [10, 0, 0]);
        assert_eq!(apportion(0, &f), [0, 0, 0]);
    }

    #[test]
    fn assign_splits_stratifies() {
        let mut recs: Vec<_> = (0..6446)
            .map(|i| record(i, if i % 100 < 45 { AnswerLabel::Entailed } else { AnswerLabel::NotEntailed }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assign_splits(&mut recs, &SplitFractions::default(), &mut rng).unwrap();
        let stats = dataset_stats(&recs).unwrap();
        let sizes: Vec<usize> = Split::ALL.iter().map(|s| stats.splits[s].count).collect();
        for (got, want) in sizes.iter().zip([5184usize, 656, 606]) {
            assert!(got.abs_diff(want) <= 1, "{sizes:?}");
        }
        let corpus = recs.iter().filter(|r| r.answer == AnswerLabel::Entailed).count() as f64 / 6446.0;
        for s in Split::ALL {
            assert!((stats.splits[&s].entailed_fraction() - corpus).abs() <= 0.02);
        }
        let mut again: Vec<_> = recs.iter().cloned().map(|mut r| { r.split = Split::Test; r }).collect();
        assign_splits(&mut again, &SplitFractions::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, recs);
    }

    #[test]
    fn assign_splits_edge_cases() {
        let mut recs: Vec<_> = (0..7).map(|i| record(i, AnswerLabel::Entailed)).collect();
        let all_train = SplitFractions { train: 1.0, test: 0.0, validation: 0.0 };
        assign_splits(&mut recs, &all_train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(recs.iter().all(|r| r.split == Split::Train));
        let bad = SplitFractions { train: 0.5, test: 0.2, validation: 0.2 };
        assert!(assign_splits(&mut recs, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let neg = SplitFractions { train: 1.2, test: -0.2, validation: 0.0 };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let good = serde_json::to_string(&record(1, AnswerLabel::Entailed)).unwrap();
        let truncated = &good[..good.len() / 2];
        let text = format!("{good}\n\n{truncated}\n");
        match read_manifest_from(text.as_bytes(), "m.jsonl").unwrap_err() {
            Error::Manifest { line, path, .. } => {
                assert_eq!(line, 3);
                assert_eq!(path, "m.jsonl");
            }
            e => panic!("{e}"),
        }
        let dup = format!("{good}\n{good}\n");
        assert!(matches!(read_manifest_from(dup.as_bytes(), "m").unwrap_err(), Error::Manifest { line: 2, .. }));
        let neg = good.replace("\"input_duration_s\":63.2", "\"input_duration_s\":-1.0");
        assert!(read_manifest_from(neg.as_bytes(), "m").is_err());
        let neg_tokens = good.replace("\"input_tokens\":158", "\"input_tokens\":-3");
        assert!(read_manifest_from(neg_tokens.as_bytes(), "m").is_err());
    }

    #[test]
    fn small_corpus_is_deterministic() {
        let cfg = CorpusConfig { n: 40, ..Default::default() };
        let t = PromptTemplates::default();
        let gen = OracleReasoner::new(t.clone());
        let a = generate_corpus(&cfg, &gen, &MockTts::default(), &t).unwrap();
        let b = generate_corpus(&cfg, &gen, &MockTts::default(), &t).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert!(generate_corpus(&CorpusConfig { n: 0, ..cfg }, &gen, &MockTts::default(), &t).is_err());
    }

    fn arb_record() -> impl Strategy<Value = SampleRecord> {
        (
            "[a-z0-9-]{1,12}",
            ".{0,40}",
            ".{0,40}",
            any::<bool>(),
            any::<u32>(),
            any::<u32>(),
            0.0f64..1e6,
            0.0f64..1e6,
            0usize..3,
            proptest::option::of(0usize..3),
        )
            .prop_map(|(id, u, c, e, it, ot, id_s, od_s, s, m)| SampleRecord {
                id,
                user_content_text: u,
                cot_text: c,
                answer: if e { AnswerLabel::Entailed } else { AnswerLabel::NotEntailed },
                input_audio_ref: "mock:tts:a".into(),
                output_audio_ref: "out.wav".into(),
                input_tokens: it as u64,
                output_tokens: ot as u64,
                input_duration_s: id_s,
                output_duration_s: od_s,
                split: Split::ALL[s],
                output_modality: m.map(|i| OutputModality::ALL[i]),
            })
    }

    proptest! {
        #[test]
        fn manifest_round_trip(recs in proptest::collection::vec(arb_record(), 0..20)) {
            let mut recs = recs;
            for (i, r) in recs.iter_mut().enumerate() {
                r.id = format!("{}-{i}", r.id);
            }
            let mut buf = Vec::new();
            write_manifest_to(&mut buf, &recs).unwrap();
            let back = read_manifest_from(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
