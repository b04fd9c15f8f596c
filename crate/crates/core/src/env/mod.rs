//! Synthetic bimodal entailment environment.
//!
//! Tasks are two-premise propositional problems whose label comes from an
//! exhaustive truth table. A task is rendered as text and audio prompt tokens,
//! encoded as a fixed-length feature vector for the policy, and rolled out
//! into trajectories scored by the composite reward.

mod episode;
mod logic;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Modality, TokenId, VocabSpec, Vocabulary};
use crate::reward::{AnswerLabel, LengthAnnotation, OutputModality};

pub use episode::{scripted_oracle, EpisodeResult, Env, EnvConfig, GreedyOutcome};
pub use logic::{truth_table_entailment, Formula, SyntaxCounts, MAX_ATOMS};

const TRUTH_ROWS: usize = 1 << MAX_ATOMS;
const ROW_FEATURES: usize = 3;
const SYNTAX_FEATURES: usize = MAX_ATOMS + 5;

/// Offset of the requested-output one-hot block in the task feature vector.
pub const MODALITY_OFFSET: usize = 0;
/// Offset of the truth-table block; row `r` occupies three slots:
/// premises hold, conclusion holds, counterexample (premises hold and conclusion fails).
pub const TRUTH_OFFSET: usize = 3;
pub const SYNTAX_OFFSET: usize = TRUTH_OFFSET + TRUTH_ROWS * ROW_FEATURES;
/// Length of the task feature vector.
pub const TASK_FEATURE_DIM: usize = SYNTAX_OFFSET + 3 * SYNTAX_FEATURES;

/// Index of the counterexample indicator for truth-table row `row`.
pub fn counterexample_feature(row: usize) -> usize {
    TRUTH_OFFSET + row * ROW_FEATURES + 2
}

/// A premise pair, a conclusion and the oracle label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicTask {
    pub n_atoms: usize,
    pub major: Formula,
    pub minor: Formula,
    pub conclusion: Formula,
    pub label: AnswerLabel,
}

impl LogicTask {
    /// Builds a task and labels it with the truth-table oracle.
    pub fn new(major: Formula, minor: Formula, conclusion: Formula) -> Result<Self> {
        let n_atoms = major
            .atom_span()
            .max(minor.atom_span())
            .max(conclusion.atom_span());
        if n_atoms > MAX_ATOMS {
            return Err(Error::config(format!(
                "tasks may use at most {MAX_ATOMS} atoms, found {n_atoms}"
            )));
        }
        let label = truth_table_entailment(&major, &minor, &conclusion);
        Ok(Self {
            n_atoms,
            major,
            minor,
            conclusion,
            label,
        })
    }
}

/// Tokens of the prompt side (a lexicon separate from the response vocabulary).
pub fn prompt_lexicon() -> Vocabulary {
    let words = [
        "major", "minor", "premise", "conclusion", "is", ".", "if", "then", "and", "or", "not",
        "true", "false", "(", ")", "A", "B", "C", "D",
    ];
    Vocabulary::from_spec(VocabSpec {
        words: words.iter().map(|w| w.to_string()).collect(),
        answer_tokens: false,
        audio: true,
    })
}

/// One environment problem with its renderings and reference lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    pub task: LogicTask,
    pub text_prompt_tokens: Vec<TokenId>,
    pub audio_prompt_tokens: Vec<TokenId>,
    pub reference_lengths: LengthAnnotation,
    pub requested_output: OutputModality,
    features: Arc<[f64]>,
}

impl TaskInstance {
    pub fn new(
        id: impl Into<String>,
        task: LogicTask,
        reference_lengths: LengthAnnotation,
        requested_output: OutputModality,
    ) -> Result<Self> {
        reference_lengths.validate()?;
        let lexicon = prompt_lexicon();
        let words = prompt_words(&task);
        let encode = |m: Modality| -> Vec<TokenId> {
            words
                .iter()
                .map(|w| lexicon.find(m, w).expect("prompt word missing from lexicon"))
                .collect()
        };
        let text_prompt_tokens = encode(Modality::Text);
        let audio_prompt_tokens = encode(Modality::Audio);
        let features = task_features(&task, requested_output).into();
        Ok(Self {
            id: id.into(),
            task,
            text_prompt_tokens,
            audio_prompt_tokens,
            reference_lengths,
            requested_output,
            features,
        })
    }

    /// Shared task feature vector of length [`TASK_FEATURE_DIM`].
    pub fn features(&self) -> Arc<[f64]> {
        Arc::clone(&self.features)
    }

    /// Same task, different requested output.
    pub fn with_output(&self, requested_output: OutputModality) -> Self {
        Self::new(
            self.id.clone(),
            self.task.clone(),
            self.reference_lengths,
            requested_output,
        )
        .expect("validated on construction")
    }
}

fn prompt_words(task: &LogicTask) -> Vec<String> {
    let mut words = Vec::new();
    for (head, f) in [
        (&["major", "premise", "is"][..], &task.major),
        (&["minor", "premise", "is"][..], &task.minor),
        (&["conclusion", "is"][..], &task.conclusion),
    ] {
        words.extend(head.iter().map(|w| w.to_string()));
        words.extend(f.words());
        words.push(".".into());
    }
    words
}

/// Encodes requested output, the truth table and formula syntax.
pub fn task_features(task: &LogicTask, requested_output: OutputModality) -> Vec<f64> {
    let mut x = vec![0.0; TASK_FEATURE_DIM];
    x[MODALITY_OFFSET + requested_output.index()] = 1.0;
    for row in 0..(1usize << task.n_atoms) {
        let a = row as u32;
        let premises = task.major.eval(a) && task.minor.eval(a);
        let conclusion = task.conclusion.eval(a);
        let base = TRUTH_OFFSET + row * ROW_FEATURES;
        x[base] = f64::from(u8::from(premises));
        x[base + 1] = f64::from(u8::from(conclusion));
        x[base + 2] = f64::from(u8::from(premises && !conclusion));
    }
    for (i, f) in [&task.major, &task.minor, &task.conclusion].iter().enumerate() {
        let c = f.syntax_counts();
        let base = SYNTAX_OFFSET + i * SYNTAX_FEATURES;
        for (j, &n) in c.atoms.iter().enumerate() {
            x[base + j] = f64::from(n);
        }
        x[base + MAX_ATOMS] = f64::from(c.not);
        x[base + MAX_ATOMS + 1] = f64::from(c.and);
        x[base + MAX_ATOMS + 2] = f64::from(c.or);
        x[base + MAX_ATOMS + 3] = f64::from(c.implies);
        x[base + MAX_ATOMS + 4] = f64::from(c.constants);
    }
    x
}

/// Which output modality generated tasks request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMix {
    Fixed(OutputModality),
    /// Uniform over the three modalities.
    Mixed,
}

impl std::str::FromStr for ModalityMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("mixed") {
            Ok(ModalityMix::Mixed)
        } else {
            s.parse().map(ModalityMix::Fixed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    pub n_atoms: usize,
    pub entailed_fraction: f64,
    pub modality: ModalityMix,
    /// Reasoning tokens in the reference response before `Answer: <label>`.
    pub reference_words: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_atoms: 2,
            entailed_fraction: 0.449,
            modality: ModalityMix::Fixed(OutputModality::TextOut),
            reference_words: 2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ATOMS).contains(&self.n_atoms) {
            return Err(Error::config(format!(
                "n_atoms must be in 1..={MAX_ATOMS}, got {}",
                self.n_atoms
            )));
        }
        if !(0.0..=1.0).contains(&self.entailed_fraction) {
            return Err(Error::config(format!(
                "entailed_fraction must be in [0, 1], got {}",
                self.entailed_fraction
            )));
        }
        Ok(())
    }

    /// Reference text/audio token counts: reasoning words + marker + label.
    pub fn reference_lengths(&self) -> LengthAnnotation {
        LengthAnnotation {
            text_len: self.reference_words + 2,
            audio_len: self.reference_words + 2,
        }
    }
}

const MAX_REJECTIONS: usize = 10_000;

/// Seeded generator of labelled tasks.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    config: TaskConfig,
    counter: u64,
}

impl TaskGenerator {
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, counter: 0 })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// Draws a target label with probability `entailed_fraction`, then
    /// rejection-samples a task carrying it.
    pub fn generate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<TaskInstance> {
        let target = if rng.gen_bool(self.config.entailed_fraction) {
            AnswerLabel::Entailed
        } else {
            AnswerLabel::NotEntailed
        };
        self.generate_with_label(target, rng)
    }

    /// `n` tasks with exactly `round(n · entailed_fraction)` entailed, in shuffled order.
    pub fn generate_batch<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<TaskInstance>> {
        let n_ent = (n as f64 * self.config.entailed_fraction).round() as usize;
        let mut labels: Vec<AnswerLabel> = (0..n)
            .map(|i| {
                if i < n_ent {
                    AnswerLabel::Entailed
                } else {
                    AnswerLabel::NotEntailed
                }
            })
            .collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .map(|l| self.generate_with_label(l, rng))
            .collect()
    }

    pub fn generate_with_label<R: Rng + ?Sized>(
        &mut self,
        target: AnswerLabel,
        rng: &mut R,
    ) -> Result<TaskInstance> {
        let n = self.config.n_atoms;
        for _ in 0..MAX_REJECTIONS {
            let task = random_task(n, rng)?;
            if task.label == target {
                let modality = match self.config.modality {
                    ModalityMix::Fixed(m) => m,
                    ModalityMix::Mixed => OutputModality::ALL[rng.gen_range(0..3)],
                };
                let id = format!("task-{:06}", self.counter);
                self.counter += 1;
                return TaskInstance::new(id, task, self.config.reference_lengths(), modality);
            }
        }
        Err(Error::config(format!(
            "could not generate a {target} task with {n} atoms"
        )))
    }
}

fn random_literal<R: Rng + ?Sized>(atom: u8, rng: &mut R) -> Formula {
    if rng.gen_bool(0.5) {
        Formula::atom(atom)
    } else {
        Formula::not(Formula::atom(atom))
    }
}

fn two_atoms<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (u8, u8) {
    let a = rng.gen_range(0..n) as u8;
    if n == 1 {
        return (a, a);
    }
    let mut b = rng.gen_range(0..n - 1) as u8;
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Major premise: implication or disjunction of two literals. Minor premise:
/// a literal or a conjunction. Conclusion: a literal, conjunction or disjunction.
fn random_task<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<LogicTask> {
    let (a, b) = two_atoms(n, rng);
    let (la, lb) = (random_literal(a, rng), random_literal(b, rng));
    let major = if rng.gen_bool(0.5) {
        Formula::implies(la, lb)
    } else {
        Formula::or(la, lb)
    };
    let minor = if n > 1 && rng.gen_bool(0.25) {
        let (c, d) = two_atoms(n, rng);
        Formula::and(random_literal(c, rng), random_literal(d, rng))
    } else {
        random_literal(rng.gen_range(0..n) as u8, rng)
    };
    let conclusion = match rng.gen_range(0..6) {
        0 if n > 1 => {
            let (c, d) = two_atoms(n, rng);
            Formula::and(random_literal(c, rng), random_literal(d, rng))
        }
        1 if n > 1 => {
            let (c, d) = two_atoms(n, rng);
            Formula::or(random_literal(c, rng), random_literal(d, rng))
        }
        _ => random_literal(rng.gen_range(0..n) as u8, rng),
    };
    LogicTask::new(major, minor, conclusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(major: &str, minor: &str, conclusion: &str) -> LogicTask {
        LogicTask::new(
            Formula::parse(major).unwrap(),
            Formula::parse(minor).unwrap(),
            Formula::parse(conclusion).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn labels_from_oracle() {
        assert_eq!(task("if A then B", "A", "B").label, AnswerLabel::Entailed);
        assert_eq!(task("if A then B", "B", "A").label, AnswerLabel::NotEntailed);
    }

    #[test]
    fn feature_vector_layout() {
        let t = task("if A then B", "B", "A");
        let x = task_features(&t, OutputModality::AudioOut);
        assert_eq!(x.len(), TASK_FEATURE_DIM);
        assert_eq!(&x[..3], &[0.0, 1.0, 0.0]);
        // Row 2: A=0, B=1 satisfies both premises and falsifies the conclusion.
        assert_eq!(x[counterexample_feature(2)], 1.0);
        let counterexamples: f64 = (0..16).map(|r| x[counterexample_feature(r)]).sum();
        assert_eq!(counterexamples, 1.0);
        // rows beyond 2^n stay zero
        assert!(x[TRUTH_OFFSET + 4 * 3..SYNTAX_OFFSET].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conclusion_change_changes_features() {
        let ann = LengthAnnotation::new(4, 4).unwrap();
        let a = TaskInstance::new("a", task("A or B", "not A", "B"), ann, OutputModality::TextOut).unwrap();
        let b = TaskInstance::new("b", task("A or B", "not A", "B and B"), ann, OutputModality::TextOut).unwrap();
        assert_ne!(a.features(), b.features());
        let c = TaskInstance::new("c", task("A or B", "not A", "not A"), ann, OutputModality::TextOut).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn prompt_tokens_render_the_triplet() {
        let ann = LengthAnnotation::new(4, 4).unwrap();
        let inst = TaskInstance::new("x", task("if A then B", "A", "B"), ann, OutputModality::TextOut).unwrap();
        let lex = prompt_lexicon();
        assert_eq!(
            lex.render(&inst.text_prompt_tokens),
            "major premise is if A then B . minor premise is A . conclusion is B ."
        );
        assert_eq!(
            lex.render(&inst.audio_prompt_tokens),
            lex.render(&inst.text_prompt_tokens)
        );
        assert!(inst
            .audio_prompt_tokens
            .iter()
            .all(|&t| lex.modality(t) == Modality::Audio));
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let mut g1 = TaskGenerator::new(TaskConfig::default()).unwrap();
        let mut g2 = TaskGenerator::new(TaskConfig::default()).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            assert_eq!(g1.generate(&mut r1).unwrap(), g2.generate(&mut r2).unwrap());
        }

        let mut g = TaskGenerator::new(TaskConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let ent = (0..n)
            .filter(|_| g.generate(&mut rng).unwrap().task.label == AnswerLabel::Entailed)
            .count();
        assert!((ent as f64 / n as f64 - 0.449).abs() < 0.02);

        let batch = g.generate_batch(5000, &mut rng).unwrap();
        let ent = batch.iter().filter(|t| t.task.label == AnswerLabel::Entailed).count();
        assert_eq!(ent, 2245);
    }

    #[test]
    fn generated_labels_match_oracle_for_all_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 1..=4 {
            for frac in [0.0, 0.5, 1.0] {
                let cfg = TaskConfig {
                    n_atoms: n,
                    entailed_fraction: frac,
                    ..Default::default()
                };
                let mut g = TaskGenerator::new(cfg).unwrap();
                for _ in 0..20 {
                    let t = g.generate(&mut rng).unwrap();
                    assert!(t.task.n_atoms <= n);
                    assert_eq!(
                        t.task.label,
                        truth_table_entailment(&t.task.major, &t.task.minor, &t.task.conclusion)
                    );
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TaskConfig { n_atoms: 0, ..Default::default() },
            TaskConfig { n_atoms: 5, ..Default::default() },
            TaskConfig { entailed_fraction: 1.5, ..Default::default() },
            TaskConfig { entailed_fraction: -0.1, ..Default::default() },
        ] {
            assert!(TaskGenerator::new(cfg).is_err());
        }
    }
}
