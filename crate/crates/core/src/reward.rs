//! Rule-based reward terms and their composition into a scalar trajectory reward.
//!
//! Five terms are scored on a bimodal response:
//!
//! ```text
//! S_format(1) = λ1 if the text rendering ends with a well-formed answer, else 0
//! S_format(2) = λ2 if the audio transcript ends with a well-formed answer, else 0
//! S_answer    = λ3 if the extracted answer equals the ground truth, else 0
//! S_len(1)    = λ4 · min(1, L_model / L_annotation)
//! S_len(2)    = λ5 · min(1, T_model / T_annotation)
//! ```
//!
//! The composite reward is the plain sum of the terms that are active for the
//! requested output modality.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::policy::{Modality, TokenId, Vocabulary};

/// The literal answer marker that must close a response.
pub const ANSWER_MARKER: &str = "Answer:";

/// Two-class entailment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnswerLabel {
    Entailed,
    NotEntailed,
}

impl AnswerLabel {
    pub const ALL: [AnswerLabel; 2] = [AnswerLabel::Entailed, AnswerLabel::NotEntailed];

    /// Parses a label, tolerating case, surrounding quotes, a trailing period
    /// and hyphen/space variants (`not-entailed` == `Not Entailed.`).
    pub fn parse(s: &str) -> Option<Self> {
        let mut t = s.trim();
        t = t.trim_matches('"').trim();
        if let Some(stripped) = t.strip_suffix('.') {
            t = stripped;
        }
        t = t.trim_matches('"').trim();
        let normalized = t
            .to_lowercase()
            .replace(['-', '_'], " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        match normalized.as_str() {
            "entailed" => Some(AnswerLabel::Entailed),
            "not entailed" => Some(AnswerLabel::NotEntailed),
            _ => None,
        }
    }

    /// Canonical manifest spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerLabel::Entailed => "entailed",
            AnswerLabel::NotEntailed => "not-entailed",
        }
    }

    /// Spelling used after the answer marker ("Answer: not entailed.").
    pub fn spoken(self) -> &'static str {
        match self {
            AnswerLabel::Entailed => "entailed",
            AnswerLabel::NotEntailed => "not entailed",
        }
    }

    pub fn index(self) -> usize {
        match self {
            AnswerLabel::Entailed => 0,
            AnswerLabel::NotEntailed => 1,
        }
    }
}

impl fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnswerLabel::parse(s).ok_or_else(|| Error::config(format!("unrecognized answer label {s:?}")))
    }
}

impl Serialize for AnswerLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AnswerLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        AnswerLabel::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unrecognized answer label {s:?}")))
    }
}

/// Which output streams a task asks for; decides the active reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputModality {
    TextOut,
    AudioOut,
    Both,
}

impl OutputModality {
    pub const ALL: [OutputModality; 3] = [
        OutputModality::TextOut,
        OutputModality::AudioOut,
        OutputModality::Both,
    ];

    pub fn index(self) -> usize {
        match self {
            OutputModality::TextOut => 0,
            OutputModality::AudioOut => 1,
            OutputModality::Both => 2,
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, OutputModality::TextOut | OutputModality::Both)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, OutputModality::AudioOut | OutputModality::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OutputModality::TextOut => "text_out",
            OutputModality::AudioOut => "audio_out",
            OutputModality::Both => "both",
        }
    }
}

impl fmt::Display for OutputModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutputModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "text_out" | "text" => Ok(OutputModality::TextOut),
            "audio_out" | "audio" => Ok(OutputModality::AudioOut),
            "both" => Ok(OutputModality::Both),
            other => Err(Error::config(format!("unknown output modality {other:?}"))),
        }
    }
}

/// Hyperparameters of the reward and of the clipped update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Clip radius of the surrogate objective.
    pub epsilon: f64,
    /// Size, in characters, of the tail region the answer marker must start in.
    pub answer_window: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 2.0,
            lambda4: 1.0,
            lambda5: 0.75,
            beta: 0.01,
            epsilon: 0.2,
            answer_window: 30,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("beta", self.beta),
        ];
        for (name, v) in lambdas {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.answer_window < ANSWER_MARKER.len() {
            return Err(Error::config(format!(
                "answer_window must be >= {}, got {}",
                ANSWER_MARKER.len(),
                self.answer_window
            )));
        }
        Ok(())
    }

    /// Sum of all five reward weights; the upper bound of the composite reward.
    pub fn max_total(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.lambda3 + self.lambda4 + self.lambda5
    }

    /// Upper bound of the composite reward for one output modality.
    pub fn max_for(&self, modality: OutputModality) -> f64 {
        match modality {
            OutputModality::TextOut => self.lambda1 + self.lambda3 + self.lambda4,
            OutputModality::AudioOut => self.lambda2 + self.lambda3 + self.lambda5,
            OutputModality::Both => self.max_total(),
        }
    }

    /// Copy with every λ multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda1: self.lambda1 * c,
            lambda2: self.lambda2 * c,
            lambda3: self.lambda3 * c,
            lambda4: self.lambda4 * c,
            lambda5: self.lambda5 * c,
            ..*self
        }
    }
}

/// Reference lengths of the annotated response, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthAnnotation {
    pub text_len: u64,
    pub audio_len: u64,
}

impl LengthAnnotation {
    pub fn new(text_len: u64, audio_len: u64) -> Result<Self> {
        let ann = Self { text_len, audio_len };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_len == 0 {
            return Err(Error::InvalidAnnotation("text_len must be positive".into()));
        }
        if self.audio_len == 0 {
            return Err(Error::InvalidAnnotation("audio_len must be positive".into()));
        }
        Ok(())
    }
}

/// A generated reply split into its text and audio streams.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalResponse {
    text_tokens: Vec<TokenId>,
    audio_tokens: Vec<TokenId>,
    text_rendering: String,
    audio_transcript: String,
    text_len: usize,
    audio_len: usize,
    extracted_answer: Option<AnswerLabel>,
}

impl BimodalResponse {
    /// Splits generated tokens by modality tag. End-of-sequence is dropped.
    pub fn from_tokens(vocab: &Vocabulary, tokens: &[TokenId], window: usize) -> Self {
        let mut text_tokens = Vec::new();
        let mut audio_tokens = Vec::new();
        for &t in tokens {
            if t == vocab.eos() {
                continue;
            }
            match vocab.modality(t) {
                Modality::Text => text_tokens.push(t),
                Modality::Audio => audio_tokens.push(t),
            }
        }
        let text_rendering = vocab.render(&text_tokens);
        let audio_transcript = vocab.render(&audio_tokens);
        let text_len = text_tokens.len();
        let audio_len = audio_tokens.len();
        let extracted_answer = extract_answer(&text_rendering, window)
            .or_else(|| extract_answer(&audio_transcript, window));
        Self {
            text_tokens,
            audio_tokens,
            text_rendering,
            audio_transcript,
            text_len,
            audio_len,
            extracted_answer,
        }
    }

    /// Builds a response from already-rendered strings (offline scoring).
    /// Token counts are the whitespace word counts of each stream.
    pub fn from_renderings(text: &str, audio: &str, window: usize) -> Self {
        let text_len = text.split_whitespace().count();
        let audio_len = audio.split_whitespace().count();
        Self::from_renderings_with_counts(text, audio, text_len, audio_len, window)
    }

    pub fn from_renderings_with_counts(
        text: &str,
        audio: &str,
        text_len: usize,
        audio_len: usize,
        window: usize,
    ) -> Self {
        let extracted_answer =
            extract_answer(text, window).or_else(|| extract_answer(audio, window));
        Self {
            text_tokens: Vec::new(),
            audio_tokens: Vec::new(),
            text_rendering: text.to_string(),
            audio_transcript: audio.to_string(),
            text_len,
            audio_len,
            extracted_answer,
        }
    }

    pub fn text_tokens(&self) -> &[TokenId] {
        &self.text_tokens
    }

    pub fn audio_tokens(&self) -> &[TokenId] {
        &self.audio_tokens
    }

    pub fn text_rendering(&self) -> &str {
        &self.text_rendering
    }

    pub fn audio_transcript(&self) -> &str {
        &self.audio_transcript
    }

    /// L_model: number of text tokens.
    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// T_model: number of audio tokens.
    pub fn audio_len(&self) -> usize {
        self.audio_len
    }

    /// Answer from the text rendering, falling back to the audio transcript.
    pub fn extracted_answer(&self) -> Option<AnswerLabel> {
        self.extracted_answer
    }

    /// Answer extracted from the stream(s) active for `modality`; text wins under `Both`.
    pub fn answer_for(&self, modality: OutputModality, window: usize) -> Option<AnswerLabel> {
        match modality {
            OutputModality::TextOut => extract_answer(&self.text_rendering, window),
            OutputModality::AudioOut => extract_answer(&self.audio_transcript, window),
            OutputModality::Both => extract_answer(&self.text_rendering, window)
                .or_else(|| extract_answer(&self.audio_transcript, window)),
        }
    }
}

/// Finds the label after the last `Answer:` marker, provided the marker starts
/// inside the final `window` characters and is followed by nothing but a label.
pub fn extract_answer(rendering: &str, window: usize) -> Option<AnswerLabel> {
    let byte_pos = rendering.rfind(ANSWER_MARKER)?;
    let total_chars = rendering.chars().count();
    let start_char = rendering[..byte_pos].chars().count();
    if start_char + window < total_chars {
        return None;
    }
    AnswerLabel::parse(&rendering[byte_pos + ANSWER_MARKER.len()..])
}

pub fn score_format_text(resp: &BimodalResponse, w: &RewardWeights) -> f64 {
    if extract_answer(&resp.text_rendering, w.answer_window).is_some() {
        w.lambda1
    } else {
        0.0
    }
}

pub fn score_format_audio(resp: &BimodalResponse, w: &RewardWeights) -> f64 {
    if extract_answer(&resp.audio_transcript, w.answer_window).is_some() {
        w.lambda2
    } else {
        0.0
    }
}

pub fn score_answer(predicted: Option<AnswerLabel>, truth: AnswerLabel, w: &RewardWeights) -> f64 {
    match predicted {
        Some(p) if p == truth => w.lambda3,
        _ => 0.0,
    }
}

fn length_ratio_score(weight: f64, model: u64, annotation: u64, what: &str) -> Result<f64> {
    if annotation == 0 {
        return Err(Error::InvalidAnnotation(format!(
            "{what} annotation length must be positive"
        )));
    }
    let ratio = model as f64 / annotation as f64;
    Ok(weight * ratio.min(1.0))
}

pub fn score_length_text(l_model: u64, l_annotation: u64, w: &RewardWeights) -> Result<f64> {
    length_ratio_score(w.lambda4, l_model, l_annotation, "text")
}

pub fn score_length_audio(t_model: u64, t_annotation: u64, w: &RewardWeights) -> Result<f64> {
    length_ratio_score(w.lambda5, t_model, t_annotation, "audio")
}

/// Per-term scores of one response. Inactive terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_text: Option<f64>,
    pub format_audio: Option<f64>,
    pub answer: f64,
    pub length_text: Option<f64>,
    pub length_audio: Option<f64>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn compute(
        resp: &BimodalResponse,
        truth: AnswerLabel,
        ann: &LengthAnnotation,
        w: &RewardWeights,
        modality: OutputModality,
    ) -> Result<Self> {
        let format_text = modality.uses_text().then(|| score_format_text(resp, w));
        let format_audio = modality.uses_audio().then(|| score_format_audio(resp, w));
        let answer = score_answer(resp.answer_for(modality, w.answer_window), truth, w);
        let length_text = if modality.uses_text() {
            Some(score_length_text(resp.text_len as u64, ann.text_len, w)?)
        } else {
            None
        };
        let length_audio = if modality.uses_audio() {
            Some(score_length_audio(resp.audio_len as u64, ann.audio_len, w)?)
        } else {
            None
        };
        let total = format_text.unwrap_or(0.0)
            + format_audio.unwrap_or(0.0)
            + answer
            + length_text.unwrap_or(0.0)
            + length_audio.unwrap_or(0.0);
        Ok(Self {
            format_text,
            format_audio,
            answer,
            length_text,
            length_audio,
            total,
        })
    }
}

/// R(x, y): sum of the reward terms active for `modality`.
pub fn composite_reward(
    resp: &BimodalResponse,
    truth: AnswerLabel,
    ann: &LengthAnnotation,
    w: &RewardWeights,
    modality: OutputModality,
) -> Result<f64> {
    RewardBreakdown::compute(resp, truth, ann, w, modality).map(|b| b.total)
}
