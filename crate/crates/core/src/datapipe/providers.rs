//! Reasoning and speech providers: deterministic mocks and external commands.

use std::io::Write;
use std::process::{Command, Stdio};

use sha2::{Digest, Sha256};

use super::{parse_user_content, PromptTemplates};
use crate::env::{truth_table_entailment, Formula, MAX_ATOMS};
use crate::reward::AnswerLabel;

/// Provider results carry a plain message; the pipeline adds stage and sample id.
pub type ProviderResult<T> = std::result::Result<T, String>;

/// Produces a chain of thought ending in `Answer: <label>.` for a user prompt.
pub trait ReasoningGenerator: Send + Sync {
    fn generate(&self, system: &str, user_content: &str) -> ProviderResult<String>;

    /// True when the provider's answers are guaranteed correct, in which case
    /// the pipeline checks them against the task label.
    fn is_oracle(&self) -> bool {
        false
    }
}

/// Speech for a piece of text.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    /// File path or mock handle.
    pub handle: String,
    pub duration_s: f64,
}

pub trait SpeechSynthesizer: Send + Sync {
    fn synthesize(&self, text: &str) -> ProviderResult<Synthesis>;
}

/// Template-based reasoner that reads the premises back out of the prompt and
/// decides entailment by truth table.
#[derive(Debug, Clone, Default)]
pub struct OracleReasoner {
    templates: PromptTemplates,
}

impl OracleReasoner {
    pub fn new(templates: PromptTemplates) -> Self {
        Self { templates }
    }
}

const ATOM_NAMES: [&str; MAX_ATOMS] = ["A", "B", "C", "D"];

fn describe_row(bits: u32, n_atoms: usize) -> String {
    let parts: Vec<String> = (0..n_atoms)
        .map(|i| {
            let v = if bits >> i & 1 == 1 { "true" } else { "false" };
            format!("{} is {v}", ATOM_NAMES[i])
        })
        .collect();
    parts.join(" and ")
}

impl ReasoningGenerator for OracleReasoner {
    fn generate(&self, _system: &str, user_content: &str) -> ProviderResult<String> {
        let triplet = parse_user_content(user_content, &self.templates).map_err(|e| e.to_string())?;
        let parse = |s: &str| Formula::parse(s).map_err(|e| format!("{e} in {s:?}"));
        let (major, minor, conclusion) = (
            parse(&triplet.major)?,
            parse(&triplet.minor)?,
            parse(&triplet.conclusion)?,
        );
        let n = major
            .atom_span()
            .max(minor.atom_span())
            .max(conclusion.atom_span())
            .max(1);
        if n > MAX_ATOMS {
            return Err(format!("at most {MAX_ATOMS} atoms are supported"));
        }
        let label = truth_table_entailment(&major, &minor, &conclusion);

        let mut cot = format!(
            "Okay, let's work through this carefully. The major premise says {major}. \
             The minor premise says {minor}. The question is whether {conclusion} has to follow. \
             I'll check every way the statements {} could be true or false.",
            ATOM_NAMES[..n].join(", ")
        );
        let mut supporting = 0;
        for bits in 0..(1u32 << n) {
            if major.eval(bits) && minor.eval(bits) {
                supporting += 1;
                let holds = conclusion.eval(bits);
                cot.push_str(&format!(
                    " When {}, both premises hold and the conclusion is {}.",
                    describe_row(bits, n),
                    if holds { "true" } else { "false" }
                ));
            }
        }
        if supporting == 0 {
            cot.push_str(" The premises can never both hold, so anything follows from them.");
        }
        cot.push_str(match label {
            AnswerLabel::Entailed => {
                " In every case where the premises are true the conclusion is true as well, so it must follow."
            }
            AnswerLabel::NotEntailed => {
                " There is a case where the premises are true but the conclusion is false, so it doesn't have to follow."
            }
        });
        cot.push_str(&format!(" Answer: {}.", label.spoken()));
        Ok(cot)
    }

    fn is_oracle(&self) -> bool {
        true
    }
}

/// Fixed-rate synthesizer: duration is whitespace words × `seconds_per_word`,
/// the handle is a content hash.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockTts {
    pub seconds_per_word: f64,
}

impl Default for MockTts {
    fn default() -> Self {
        Self {
            seconds_per_word: crate::policy::AUDIO_TOKEN_SECONDS,
        }
    }
}

impl SpeechSynthesizer for MockTts {
    fn synthesize(&self, text: &str) -> ProviderResult<Synthesis> {
        let words = text.split_whitespace().count();
        if words == 0 {
            return Err("cannot synthesize empty text".into());
        }
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Synthesis {
            handle: format!("mock:tts:{hex}"),
            duration_s: words as f64 * self.seconds_per_word,
        })
    }
}

/// Runs `program args…`, feeding `input` on stdin and returning stdout.
fn run_command(
    program: &str,
    args: &[String],
    input: &str,
    envs: &[(&str, &str)],
) -> ProviderResult<String> {
    let mut child = Command::new(program)
        .args(args)
        .envs(envs.iter().copied())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start {program:?}: {e}"))?;
    let mut stdin = child.stdin.take().expect("stdin is piped");
    let input = input.to_owned();
    let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
    let out = child
        .wait_with_output()
        .map_err(|e| format!("{program:?} failed: {e}"))?;
    writer
        .join()
        .map_err(|_| "stdin writer panicked".to_string())?
        .map_err(|e| format!("writing to {program:?}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{program:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    String::from_utf8(out.stdout).map_err(|_| format!("{program:?} wrote invalid UTF-8"))
}

fn split_command(command: &str) -> ProviderResult<(String, Vec<String>)> {
    let mut parts = command.split_whitespace().map(str::to_owned);
    let program = parts.next().ok_or("empty provider command")?;
    Ok((program, parts.collect()))
}

/// Reasoner backed by an external program: user content on stdin, chain of
/// thought on stdout. The system prompt is passed in `SOUNDMIND_SYSTEM_PROMPT`.
#[derive(Debug, Clone)]
pub struct CommandReasoner {
    program: String,
    args: Vec<String>,
}

impl CommandReasoner {
    /// `command` is a program followed by whitespace-separated arguments.
    pub fn new(command: &str) -> ProviderResult<Self> {
        let (program, args) = split_command(command)?;
        Ok(Self { program, args })
    }
}

impl ReasoningGenerator for CommandReasoner {
    fn generate(&self, system: &str, user_content: &str) -> ProviderResult<String> {
        let out = run_command(
            &self.program,
            &self.args,
            user_content,
            &[("SOUNDMIND_SYSTEM_PROMPT", system)],
        )?;
        Ok(out.trim().to_string())
    }
}

/// Synthesizer backed by an external program: text on stdin, a line
/// `<duration_seconds> <audio_path>` on stdout.
#[derive(Debug, Clone)]
pub struct CommandTts {
    program: String,
    args: Vec<String>,
}

impl CommandTts {
    pub fn new(command: &str) -> ProviderResult<Self> {
        let (program, args) = split_command(command)?;
        Ok(Self { program, args })
    }
}

impl SpeechSynthesizer for CommandTts {
    fn synthesize(&self, text: &str) -> ProviderResult<Synthesis> {
        let out = run_command(&self.program, &self.args, text, &[])?;
        let line = out.lines().next().unwrap_or("").trim();
        let (dur, path) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| format!("expected `<duration> <path>`, got {line:?}"))?;
        let duration_s: f64 = dur
            .parse()
            .map_err(|_| format!("invalid duration {dur:?}"))?;
        if !duration_s.is_finite() || duration_s < 0.0 {
            return Err(format!("invalid duration {duration_s}"));
        }
        Ok(Synthesis {
            handle: path.trim().to_string(),
            duration_s,
        })
    }
}
