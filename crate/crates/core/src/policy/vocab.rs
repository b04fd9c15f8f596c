use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::reward::{AnswerLabel, ANSWER_MARKER};

/// Dense token id in `0..V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
}

impl Modality {
    fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenInfo {
    pub modality: Modality,
    /// Text fragment the token renders to; empty for end-of-sequence.
    pub fragment: String,
    /// Spoken duration in seconds; zero for text tokens.
    pub duration_s: f64,
}

/// Seconds of speech per audio token.
pub const AUDIO_TOKEN_SECONDS: f64 = 0.4;

/// Reproducible description of a vocabulary; stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub words: Vec<String>,
    pub answer_tokens: bool,
    pub audio: bool,
}

impl VocabSpec {
    /// Response vocabulary used by the default environment.
    pub fn default_response() -> Self {
        Self {
            words: vec!["so".into(), "therefore".into()],
            answer_tokens: true,
            audio: true,
        }
    }

    /// Smallest response vocabulary: end-of-sequence, marker and both labels, text only.
    pub fn minimal() -> Self {
        Self {
            words: Vec::new(),
            answer_tokens: true,
            audio: false,
        }
    }

    pub fn encode(&self) -> String {
        format!(
            "words={};answer={};audio={}",
            self.words.join(","),
            u8::from(self.answer_tokens),
            u8::from(self.audio)
        )
    }

    pub fn decode(s: &str) -> Result<Self> {
        let mut words = None;
        let mut answer = None;
        let mut audio = None;
        for part in s.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad vocabulary field {part:?}")))?;
            match k {
                "words" => {
                    words = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(str::to_string).collect()
                    })
                }
                "answer" => answer = Some(v == "1"),
                "audio" => audio = Some(v == "1"),
                _ => return Err(Error::config(format!("unknown vocabulary field {k:?}"))),
            }
        }
        match (words, answer, audio) {
            (Some(words), Some(answer_tokens), Some(audio)) => Ok(Self {
                words,
                answer_tokens,
                audio,
            }),
            _ => Err(Error::config(format!("incomplete vocabulary description {s:?}"))),
        }
    }
}

/// Joint text/audio token vocabulary.
///
/// Layout: id 0 is end-of-sequence (text-tagged, empty fragment); then, per
/// modality, the answer marker, the two labels (when enabled) and the words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    spec: VocabSpec,
    tokens: Vec<TokenInfo>,
    marker: [Option<TokenId>; 2],
    labels: [[Option<TokenId>; 2]; 2],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_spec(VocabSpec::default_response())
    }
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Text => 0,
        Modality::Audio => 1,
    }
}

impl Vocabulary {
    pub fn from_spec(spec: VocabSpec) -> Self {
        let mut tokens = vec![TokenInfo {
            modality: Modality::Text,
            fragment: String::new(),
            duration_s: 0.0,
        }];
        let mut marker = [None; 2];
        let mut labels = [[None; 2]; 2];
        let modalities: &[Modality] = if spec.audio {
            &[Modality::Text, Modality::Audio]
        } else {
            &[Modality::Text]
        };
        for &m in modalities {
            let duration_s = match m {
                Modality::Text => 0.0,
                Modality::Audio => AUDIO_TOKEN_SECONDS,
            };
            let mut push = |fragment: &str| {
                let id = TokenId(tokens.len() as u32);
                tokens.push(TokenInfo {
                    modality: m,
                    fragment: fragment.to_string(),
                    duration_s,
                });
                id
            };
            if spec.answer_tokens {
                marker[modality_slot(m)] = Some(push(ANSWER_MARKER));
                for label in AnswerLabel::ALL {
                    let frag = format!("{}.", label.spoken());
                    labels[modality_slot(m)][label.index()] = Some(push(&frag));
                }
            }
            for w in &spec.words {
                push(w);
            }
        }
        Self {
            spec,
            tokens,
            marker,
            labels,
        }
    }

    pub fn minimal() -> Self {
        Self::from_spec(VocabSpec::minimal())
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        TokenId(0)
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> {
        (0..self.tokens.len() as u32).map(TokenId)
    }

    pub fn info(&self, t: TokenId) -> &TokenInfo {
        &self.tokens[t.index()]
    }

    pub fn modality(&self, t: TokenId) -> Modality {
        self.tokens[t.index()].modality
    }

    pub fn fragment(&self, t: TokenId) -> &str {
        &self.tokens[t.index()].fragment
    }

    pub fn marker(&self, m: Modality) -> Option<TokenId> {
        self.marker[modality_slot(m)]
    }

    pub fn label(&self, m: Modality, label: AnswerLabel) -> Option<TokenId> {
        self.labels[modality_slot(m)][label.index()]
    }

    /// Non-special tokens of one modality.
    pub fn words(&self, m: Modality) -> Vec<TokenId> {
        self.ids()
            .filter(|&t| {
                t != self.eos()
                    && self.modality(t) == m
                    && Some(t) != self.marker(m)
                    && !AnswerLabel::ALL.iter().any(|&l| Some(t) == self.label(m, l))
            })
            .collect()
    }

    /// Looks up a token by modality and fragment.
    pub fn find(&self, m: Modality, fragment: &str) -> Option<TokenId> {
        self.ids()
            .find(|&t| t != self.eos() && self.modality(t) == m && self.fragment(t) == fragment)
    }

    /// Space-joined fragments; empty fragments are skipped.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            let frag = self.fragment(t);
            if frag.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(frag);
        }
        out
    }

    /// Total spoken duration of the audio tokens in `tokens`.
    pub fn duration_s(&self, tokens: &[TokenId]) -> f64 {
        tokens.iter().map(|&t| self.info(t).duration_s).sum()
    }

    /// Hex SHA-256 over the ordered (modality, fragment) table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tokens.iter().enumerate() {
            h.update(format!("{i}\t{}\t{}\n", t.modality.tag(), t.fragment).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
