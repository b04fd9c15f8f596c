//! Evaluation metrics: accuracy, word error rate and dataset statistics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datapipe::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::reward::{AnswerLabel, OutputModality};

/// Fraction of predictions that are present and equal to the truth.
pub fn accuracy(predictions: &[Option<AnswerLabel>], truths: &[AnswerLabel]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("accuracy needs at least one sample"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    let correct = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| **p == Some(**t))
        .count();
    Ok(correct as f64 / truths.len() as f64)
}

/// Unit-cost Levenshtein distance over arbitrary tokens.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Word edit distance divided by the reference length.
pub fn word_error_rate<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("word error rate needs a non-empty reference"));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Lowercases, replaces punctuation (except apostrophes and hyphens inside
/// words) with spaces, and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' || c == '-' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .map(|w| w.trim_matches(|c| c == '\'' || c == '-').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// WER between two raw strings after [`normalize_words`].
pub fn text_word_error_rate(hypothesis: &str, reference: &str) -> Result<f64> {
    word_error_rate(&normalize_words(hypothesis), &normalize_words(reference))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: OutputModality,
    pub n_samples: usize,
    pub accuracy: f64,
    /// Accuracy of the free generation alone (no answer forcing).
    pub strict_accuracy: f64,
    pub format_rate: f64,
    /// Mean per-sample WER; present only for audio-output evaluations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    pub per_class: BTreeMap<String, ClassCounts>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub errors: Vec<String>,
}

impl EvalReport {
    /// Builds a report from per-sample outcomes. `wers` must be non-empty
    /// exactly when the modality produces audio.
    pub fn from_outcomes(
        modality: OutputModality,
        predictions: &[Option<AnswerLabel>],
        strict: &[Option<AnswerLabel>],
        truths: &[AnswerLabel],
        wers: &[f64],
        errors: Vec<String>,
    ) -> Result<Self> {
        let acc = accuracy(predictions, truths)?;
        let strict_acc = accuracy(strict, truths)?;
        let mut per_class = BTreeMap::new();
        for label in AnswerLabel::ALL {
            per_class.insert(label.as_str().to_string(), ClassCounts::default());
        }
        for (p, t) in predictions.iter().zip(truths) {
            let c = per_class.get_mut(t.as_str()).expect("both labels present");
            c.total += 1;
            if *p == Some(*t) {
                c.correct += 1;
            }
        }
        let wer = if modality.uses_audio() && !wers.is_empty() {
            Some(wers.iter().sum::<f64>() / wers.len() as f64)
        } else {
            None
        };
        Ok(Self {
            modality,
            n_samples: truths.len(),
            accuracy: acc,
            strict_accuracy: strict_acc,
            format_rate: strict.iter().filter(|p| p.is_some()).count() as f64
                / truths.len() as f64,
            wer,
            per_class,
            errors,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub entailed: usize,
    pub not_entailed: usize,
    pub avg_input_tokens: f64,
    pub avg_output_tokens: f64,
    pub avg_input_duration_s: f64,
    pub avg_output_duration_s: f64,
}

impl SplitStats {
    pub fn entailed_fraction(&self) -> f64 {
        self.entailed as f64 / self.count as f64
    }
}

/// Per-split statistics; splits without records are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub splits: BTreeMap<Split, SplitStats>,
    pub total: usize,
}

/// Exact counts and arithmetic means per split. Malformed records are
/// reported by index; none are skipped.
pub fn dataset_stats(records: &[SampleRecord]) -> Result<DatasetStats> {
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if let Err(e) = r.validate() {
            problems.push(format!("record {i}: {e}"));
        }
        if !seen.insert(r.id.as_str()) {
            problems.push(format!("record {i}: duplicate id {:?}", r.id));
        }
    }
    if !problems.is_empty() {
        return Err(Error::MalformedRecords(problems.join("; ")));
    }

    #[derive(Default)]
    struct Acc {
        count: usize,
        entailed: usize,
        in_tok: u64,
        out_tok: u64,
        in_dur: f64,
        out_dur: f64,
    }
    let mut accs: BTreeMap<Split, Acc> = BTreeMap::new();
    for r in records {
        let a = accs.entry(r.split).or_default();
        a.count += 1;
        if r.answer == AnswerLabel::Entailed {
            a.entailed += 1;
        }
        a.in_tok += r.input_tokens;
        a.out_tok += r.output_tokens;
        a.in_dur += r.input_duration_s;
        a.out_dur += r.output_duration_s;
    }
    let splits = accs
        .into_iter()
        .map(|(split, a)| {
            let n = a.count as f64;
            (
                split,
                SplitStats {
                    count: a.count,
                    entailed: a.entailed,
                    not_entailed: a.count - a.entailed,
                    avg_input_tokens: a.in_tok as f64 / n,
                    avg_output_tokens: a.out_tok as f64 / n,
                    avg_input_duration_s: a.in_dur / n,
                    avg_output_duration_s: a.out_dur / n,
                },
            )
        })
        .collect();
    Ok(DatasetStats {
        splits,
        total: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use AnswerLabel::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[Some(Entailed), Some(NotEntailed)], &[Entailed, NotEntailed]).unwrap(), 1.0);
        assert_eq!(accuracy(&[None, None], &[Entailed, NotEntailed]).unwrap(), 0.0);
        let truths = vec![Entailed; 656];
        let preds: Vec<_> = (0..656).map(|i| if i < 534 { Some(Entailed) } else { Some(NotEntailed) }).collect();
        assert!((accuracy(&preds, &truths).unwrap() - 0.8140).abs() < 0.00005);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[None], &[Entailed, Entailed]).is_err());
    }

    #[test]
    fn wer_examples() {
        assert_eq!(word_error_rate(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        assert!((word_error_rate(&words("a x c"), &words("a b c")).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty: Vec<&str> = vec![];
        assert_eq!(word_error_rate(&empty, &words("a b c d e")).unwrap(), 1.0);
        assert!(word_error_rate(&words("a"), &empty).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_words("So, Answer: Not-Entailed."), vec!["so", "answer", "not-entailed"]);
        assert_eq!(text_word_error_rate("Hello, world!", "hello world").unwrap(), 0.0);
    }

    #[test]
    fn report_has_wer_only_for_audio() {
        let p = [Some(Entailed)];
        let t = [Entailed];
        let r = EvalReport::from_outcomes(OutputModality::AudioOut, &p, &p, &t, &[0.25], vec![]).unwrap();
        assert_eq!(r.wer, Some(0.25));
        let r = EvalReport::from_outcomes(OutputModality::TextOut, &p, &p, &t, &[], vec![]).unwrap();
        assert_eq!(r.wer, None);
        assert!(!serde_json::to_string(&r).unwrap().contains("wer"));
        assert_eq!(r.per_class["entailed"], ClassCounts { total: 1, correct: 1 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn wer_bounds(h in proptest::collection::vec(0u8..4, 0..8), r in proptest::collection::vec(0u8..4, 1..8)) {
                let w = word_error_rate(&h, &r).unwrap();
                prop_assert!(w <= h.len().max(r.len()) as f64 / r.len() as f64);
                prop_assert_eq!(w == 0.0, h == r);
            }

            #[test]
            fn accuracy_permutation_invariant(pairs in proptest::collection::vec((any::<Option<bool>>(), any::<bool>()), 1..40), rot in 0usize..40) {
                let lab = |b: bool| if b { Entailed } else { NotEntailed };
                let preds: Vec<_> = pairs.iter().map(|(p, _)| p.map(lab)).collect();
                let truths: Vec<_> = pairs.iter().map(|(_, t)| lab(*t)).collect();
                let a = accuracy(&preds, &truths).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                let k = rot % preds.len();
                let mut p2 = preds.clone();
                let mut t2 = truths.clone();
                p2.rotate_left(k);
                t2.rotate_left(k);
                prop_assert_eq!(accuracy(&p2, &t2).unwrap(), a);
            }
        }
    }
}
