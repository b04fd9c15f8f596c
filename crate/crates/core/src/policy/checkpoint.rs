//! Plain-text checkpoint format.
//!
//! ```text
//! soundmind-policy-checkpoint 1
//! vocab_size 11
//! feature_dim 122
//! task_dim 78
//! prefix_k 4
//! vocab_hash <sha256 hex>
//! vocab words=so,therefore;answer=1;audio=1
//! weights
//! <feature_dim lines of vocab_size floats>
//! bias
//! <vocab_size floats>
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so write/read is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PolicyParams, VocabSpec, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &str = "soundmind-policy-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(vocab: Vocabulary, params: PolicyParams) -> Result<Self> {
        if vocab.len() != params.vocab_size() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} tokens, params expect {}",
                vocab.len(),
                params.vocab_size()
            )));
        }
        Ok(Self { vocab, params })
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let v = p.vocab_size();
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "vocab_size {v}");
        let _ = writeln!(out, "feature_dim {}", p.feature_dim());
        let _ = writeln!(out, "task_dim {}", p.task_dim());
        let _ = writeln!(out, "prefix_k {}", p.prefix_k());
        let _ = writeln!(out, "vocab_hash {}", self.vocab.hash());
        let _ = writeln!(out, "vocab {}", self.vocab.spec().encode());
        out.push_str("weights\n");
        for row in p.weights().chunks(v) {
            push_row(&mut out, row);
        }
        out.push_str("bias\n");
        push_row(&mut out, p.bias());
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: msg,
        };
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
        };

        let (_, magic) = next("header")?;
        if magic.trim() != MAGIC {
            return Err(bad(format!("not a policy checkpoint (header {magic:?})")));
        }
        let mut header_field = |name: &str| -> Result<String> {
            let (n, line) = next(name)?;
            let rest = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(format!("line {}: expected `{name}`", n + 1)))?;
            Ok(rest.trim().to_string())
        };
        let parse_usize = |s: String, name: &str| {
            s.parse::<usize>()
                .map_err(|e| bad(format!("{name}: {e}")))
        };
        let vocab_size = parse_usize(header_field("vocab_size")?, "vocab_size")?;
        let feature_dim = parse_usize(header_field("feature_dim")?, "feature_dim")?;
        let task_dim = parse_usize(header_field("task_dim")?, "task_dim")?;
        let prefix_k = parse_usize(header_field("prefix_k")?, "prefix_k")?;
        let vocab_hash = header_field("vocab_hash")?;
        let spec = VocabSpec::decode(&header_field("vocab")?)
            .map_err(|e| bad(e.to_string()))?;
        let vocab = Vocabulary::from_spec(spec);
        if vocab.hash() != vocab_hash {
            return Err(bad("vocabulary hash does not match its description".into()));
        }
        if vocab.len() != vocab_size {
            return Err(bad(format!(
                "vocab_size {vocab_size} disagrees with vocabulary of {} tokens",
                vocab.len()
            )));
        }
        if feature_dim != task_dim + prefix_k * vocab_size {
            return Err(bad(format!(
                "feature_dim {feature_dim} != task_dim {task_dim} + k {prefix_k} x V {vocab_size}"
            )));
        }

        let (n, line) = next("weights")?;
        if line.trim() != "weights" {
            return Err(bad(format!("line {}: expected `weights`", n + 1)));
        }
        let mut weights = Vec::with_capacity(feature_dim * vocab_size);
        for _ in 0..feature_dim {
            let (n, line) = next("weight row")?;
            weights.extend(parse_row(line, vocab_size).map_err(|m| bad(format!("line {}: {m}", n + 1)))?);
        }
        let (n, line) = next("bias")?;
        if line.trim() != "bias" {
            return Err(bad(format!("line {}: expected `bias`", n + 1)));
        }
        let (n, line) = next("bias row")?;
        let bias = parse_row(line, vocab_size).map_err(|m| bad(format!("line {}: {m}", n + 1)))?;

        let params = PolicyParams::from_parts(vocab_size, task_dim, prefix_k, weights, bias)?;
        if !params.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(Self { vocab, params })
    }
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

fn parse_row(line: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let row = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if row.len() != expected {
        return Err(format!("expected {expected} values, found {}", row.len()));
    }
    Ok(row)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text, path)
}
