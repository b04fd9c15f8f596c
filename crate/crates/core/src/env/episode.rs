use rand::Rng;

use super::{counterexample_feature, TaskInstance, MODALITY_OFFSET, TASK_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::optimizer::Trajectory;
use crate::policy::{
    featurize, sample_action, Modality, PolicyParams, TokenId, VocabSpec, Vocabulary,
    DEFAULT_PREFIX_K,
};
use crate::reward::{
    composite_reward, AnswerLabel, BimodalResponse, OutputModality, RewardWeights,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub vocab: VocabSpec,
    pub prefix_k: usize,
    pub max_len: usize,
    pub weights: RewardWeights,
    /// End the episode as soon as the answer marker and a label have been
    /// emitted in the last stream the requested modality uses (audio for
    /// `audio_out` and `both`, text for `text_out`). When false, episodes run
    /// until end-of-sequence or `max_len` only.
    pub stop_after_answer: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab: VocabSpec::default_response(),
            prefix_k: DEFAULT_PREFIX_K,
            max_len: 12,
            weights: RewardWeights::default(),
            stop_after_answer: true,
        }
    }
}

/// Rollout machinery shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct Env {
    vocab: Vocabulary,
    prefix_k: usize,
    max_len: usize,
    weights: RewardWeights,
    stop_after_answer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub response: BimodalResponse,
    pub reward: f64,
}

/// Greedy decode of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub tokens: Vec<TokenId>,
    pub response: BimodalResponse,
    /// Answer extracted from the active modality of the free generation.
    pub prediction: Option<AnswerLabel>,
    /// `prediction`, or, when absent, the more likely label right after a forced answer marker.
    pub forced: AnswerLabel,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        if config.prefix_k == 0 {
            return Err(Error::config("prefix_k must be >= 1"));
        }
        if config.max_len == 0 {
            return Err(Error::config("max_len must be >= 1"));
        }
        config.weights.validate()?;
        Ok(Self {
            vocab: Vocabulary::from_spec(config.vocab),
            prefix_k: config.prefix_k,
            max_len: config.max_len,
            weights: config.weights,
            stop_after_answer: config.stop_after_answer,
        })
    }

    /// Whether generation stops after `tokens` (end-of-sequence, or a
    /// completed answer when `stop_after_answer` is set).
    pub fn is_terminal(&self, tokens: &[TokenId], requested: OutputModality) -> bool {
        let Some(&last) = tokens.last() else {
            return false;
        };
        if last == self.vocab.eos() {
            return true;
        }
        if !self.stop_after_answer || tokens.len() < 2 {
            return false;
        }
        let stream = if requested.uses_audio() && self.vocab.marker(Modality::Audio).is_some() {
            Modality::Audio
        } else {
            Modality::Text
        };
        self.vocab.marker(stream) == Some(tokens[tokens.len() - 2])
            && AnswerLabel::ALL
                .iter()
                .any(|&l| self.vocab.label(stream, l) == Some(last))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prefix_k(&self) -> usize {
        self.prefix_k
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    /// Zero (uniform) parameters of the right shape.
    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.vocab.len(), TASK_FEATURE_DIM, self.prefix_k)
    }

    fn check_params(&self, params: &PolicyParams) -> Result<()> {
        if params.vocab_size() != self.vocab.len()
            || params.task_dim() != TASK_FEATURE_DIM
            || params.prefix_k() != self.prefix_k
        {
            return Err(Error::Dimension(format!(
                "params (V={}, task_dim={}, k={}) do not fit the environment (V={}, task_dim={}, k={})",
                params.vocab_size(),
                params.task_dim(),
                params.prefix_k(),
                self.vocab.len(),
                TASK_FEATURE_DIM,
                self.prefix_k
            )));
        }
        Ok(())
    }

    pub fn response(&self, tokens: &[TokenId]) -> BimodalResponse {
        BimodalResponse::from_tokens(&self.vocab, tokens, self.weights.answer_window)
    }

    pub fn score(&self, tokens: &[TokenId], instance: &TaskInstance) -> Result<(BimodalResponse, f64)> {
        let response = self.response(tokens);
        let reward = composite_reward(
            &response,
            instance.task.label,
            &instance.reference_lengths,
            &self.weights,
            instance.requested_output,
        )?;
        Ok((response, reward))
    }

    /// Samples until end-of-sequence or `max_len`, recording behaviour and
    /// reference log-probabilities, then scores the response.
    pub fn run_episode<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        reference: &PolicyParams,
        instance: &TaskInstance,
        rng: &mut R,
    ) -> Result<EpisodeResult> {
        self.check_params(params)?;
        self.check_params(reference)?;
        let mut tokens = Vec::with_capacity(self.max_len);
        let mut states = Vec::with_capacity(self.max_len);
        let mut logp_old = Vec::with_capacity(self.max_len);
        let mut logp_ref = Vec::with_capacity(self.max_len);
        while tokens.len() < self.max_len {
            let state = featurize(instance, &tokens, self.prefix_k);
            let dist = params.action_distribution(&state)?;
            let a = sample_action(&dist, rng);
            logp_old.push(dist.log_prob(a));
            logp_ref.push(reference.log_prob(&state, a)?);
            states.push(state);
            tokens.push(a);
            if self.is_terminal(&tokens, instance.requested_output) {
                break;
            }
        }
        let (response, reward) = self.score(&tokens, instance)?;
        let trajectory = Trajectory::new(
            instance.id.clone(),
            states,
            tokens,
            logp_old,
            logp_ref,
            reward,
        )?;
        Ok(EpisodeResult {
            trajectory,
            response,
            reward,
        })
    }

    /// The canonical spoken answer for `label`: every audio reasoning word,
    /// the marker and the label, rendered as plain text. Used as the WER
    /// reference for audio outputs.
    pub fn reference_transcript(&self, label: AnswerLabel) -> String {
        let mut tokens = self.vocab.words(Modality::Audio);
        tokens.extend(self.vocab.marker(Modality::Audio));
        tokens.extend(self.vocab.label(Modality::Audio, label));
        self.vocab.render(&tokens)
    }

    /// Argmax decoding (ties to the lowest id). When the free generation has no
    /// answer in the active modality, the marker is appended and the likelier
    /// label token decides `forced`; exact ties are broken by `rng`.
    pub fn decode_greedy<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        instance: &TaskInstance,
        rng: &mut R,
    ) -> Result<GreedyOutcome> {
        self.check_params(params)?;
        let mut tokens = Vec::with_capacity(self.max_len);
        while tokens.len() < self.max_len {
            let state = featurize(instance, &tokens, self.prefix_k);
            let a = params.action_distribution(&state)?.argmax();
            tokens.push(a);
            if self.is_terminal(&tokens, instance.requested_output) {
                break;
            }
        }
        let response = self.response(&tokens);
        let prediction =
            response.answer_for(instance.requested_output, self.weights.answer_window);
        let forced = match prediction {
            Some(p) => p,
            None => self.forced_label(params, instance, &tokens, rng)?,
        };
        Ok(GreedyOutcome {
            tokens,
            response,
            prediction,
            forced,
        })
    }

    fn forced_label<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        instance: &TaskInstance,
        tokens: &[TokenId],
        rng: &mut R,
    ) -> Result<AnswerLabel> {
        let modality = match instance.requested_output {
            OutputModality::AudioOut => Modality::Audio,
            _ => Modality::Text,
        };
        let (marker, ent, not) = match (
            self.vocab.marker(modality),
            self.vocab.label(modality, AnswerLabel::Entailed),
            self.vocab.label(modality, AnswerLabel::NotEntailed),
        ) {
            (Some(m), Some(e), Some(n)) => (m, e, n),
            _ => {
                return Err(Error::config(format!(
                    "vocabulary has no answer tokens for {modality:?}"
                )))
            }
        };
        let mut prefix: Vec<TokenId> = tokens
            .iter()
            .copied()
            .filter(|&t| t != self.vocab.eos())
            .collect();
        prefix.push(marker);
        let state = featurize(instance, &prefix, self.prefix_k);
        let dist = params.action_distribution(&state)?;
        let (le, ln) = (dist.log_prob(ent), dist.log_prob(not));
        Ok(if le > ln {
            AnswerLabel::Entailed
        } else if ln > le {
            AnswerLabel::NotEntailed
        } else if rng.gen_bool(0.5) {
            AnswerLabel::Entailed
        } else {
            AnswerLabel::NotEntailed
        })
    }
}

/// Hand-set parameters that greedily emit every reasoning word of the active
/// modality once, then `Answer:` and the oracle label, and stop. Under `both`
/// the text block is followed by the audio block.
///
/// The label is read off the counterexample indicators of the task features.
pub fn scripted_oracle(vocab: &Vocabulary, prefix_k: usize) -> Result<PolicyParams> {
    let v = vocab.len();
    let mut p = PolicyParams::zeros(v, TASK_FEATURE_DIM, prefix_k);
    let slot0 = |t: TokenId| TASK_FEATURE_DIM + t.index();

    let block = |m: Modality| -> Result<(Vec<TokenId>, TokenId, TokenId)> {
        let marker = vocab
            .marker(m)
            .ok_or_else(|| Error::config(format!("vocabulary lacks {m:?} answer tokens")))?;
        let mut seq = vocab.words(m);
        seq.push(marker);
        let e = vocab.label(m, AnswerLabel::Entailed).expect("labels accompany marker");
        let n = vocab.label(m, AnswerLabel::NotEntailed).expect("labels accompany marker");
        Ok((seq, e, n))
    };

    const STEP: f64 = 20.0;
    let (text_seq, te, tn) = block(Modality::Text)?;
    *p.bias_mut(text_seq[0].index()) = 10.0;
    *p.weight_mut(MODALITY_OFFSET + OutputModality::TextOut.index(), vocab.eos().index()) = 5.0;

    let mut blocks = vec![(text_seq, te, tn)];
    if vocab.marker(Modality::Audio).is_some() {
        blocks.push(block(Modality::Audio)?);
    }
    for (seq, e, n) in &blocks {
        for pair in seq.windows(2) {
            *p.weight_mut(slot0(pair[0]), pair[1].index()) = STEP;
        }
        let marker = *seq.last().unwrap();
        *p.weight_mut(slot0(marker), e.index()) = STEP;
        *p.weight_mut(slot0(marker), n.index()) = STEP;
        for label in [e, n] {
            *p.weight_mut(slot0(*label), vocab.eos().index()) = STEP;
        }
        *p.bias_mut(e.index()) = 0.25;
        for row in 0..16 {
            *p.weight_mut(counterexample_feature(row), n.index()) = 0.5;
        }
    }
    if let Some((audio_seq, ..)) = blocks.get(1) {
        let first_audio = audio_seq[0].index();
        *p.weight_mut(MODALITY_OFFSET + OutputModality::AudioOut.index(), first_audio) = 15.0;
        *p.weight_mut(MODALITY_OFFSET + OutputModality::Both.index(), first_audio) = 5.0;
        for label in [blocks[0].1, blocks[0].2] {
            *p.weight_mut(slot0(label), first_audio) = STEP;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Formula, LogicTask, TaskConfig, TaskGenerator};
    use crate::policy::snapshot;
    use crate::reward::LengthAnnotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(m: OutputModality) -> TaskInstance {
        let t = LogicTask::new(
            Formula::parse("if A then B").unwrap(),
            Formula::parse("A").unwrap(),
            Formula::parse("B").unwrap(),
        )
        .unwrap();
        TaskInstance::new("t", t, LengthAnnotation::new(4, 4).unwrap(), m).unwrap()
    }

    #[test]
    fn scripted_oracle_is_perfect_in_every_modality() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let params = scripted_oracle(env.vocab(), env.prefix_k()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n_atoms in 1..=4 {
            for m in OutputModality::ALL {
                let cfg = TaskConfig {
                    n_atoms,
                    entailed_fraction: 0.5,
                    modality: crate::env::ModalityMix::Fixed(m),
                    reference_words: 2,
                };
                let mut g = TaskGenerator::new(cfg).unwrap();
                for _ in 0..40 {
                    let inst = g.generate(&mut rng).unwrap();
                    let out = env.decode_greedy(&params, &inst, &mut rng).unwrap();
                    assert_eq!(out.prediction, Some(inst.task.label), "{m} {:?}", out.response);
                    let (_, reward) = env.score(&out.tokens, &inst).unwrap();
                    assert_eq!(reward, env.weights().max_for(m));
                }
            }
        }
    }

    #[test]
    fn point_mass_episode_reward() {
        // Deterministic policy emitting "Answer: entailed." then EOS.
        let env = Env::new(EnvConfig {
            stop_after_answer: false,
            ..Default::default()
        })
        .unwrap();
        let v = env.vocab();
        let m = v.marker(Modality::Text).unwrap();
        let e = v.label(Modality::Text, AnswerLabel::Entailed).unwrap();
        let mut p = env.initial_params();
        let big = 1e3;
        *p.bias_mut(m.index()) = big;
        *p.weight_mut(TASK_FEATURE_DIM + m.index(), e.index()) = 2.0 * big;
        *p.weight_mut(TASK_FEATURE_DIM + e.index(), v.eos().index()) = 3.0 * big;
        let inst = instance(OutputModality::TextOut);
        let frozen = snapshot(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = env.run_episode(&p, &frozen, &inst, &mut rng).unwrap();
        assert_eq!(r.trajectory.actions(), &[m, e, v.eos()]);
        assert_eq!(r.response.text_rendering(), "Answer: entailed.");
        let w = env.weights();
        // two text tokens of a four-token reference
        assert_eq!(r.reward, w.lambda1 + w.lambda3 + w.lambda4 * 0.5);
        assert!(r.trajectory.logp_ref().iter().all(|&lp| lp == 0.0));
    }

    #[test]
    fn answer_in_final_stream_ends_the_episode() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let v = env.vocab();
        let (tm, am) = (v.marker(Modality::Text).unwrap(), v.marker(Modality::Audio).unwrap());
        let te = v.label(Modality::Text, AnswerLabel::Entailed).unwrap();
        let an = v.label(Modality::Audio, AnswerLabel::NotEntailed).unwrap();
        assert!(env.is_terminal(&[tm, te], OutputModality::TextOut));
        assert!(!env.is_terminal(&[tm, te], OutputModality::Both));
        assert!(!env.is_terminal(&[tm, te], OutputModality::AudioOut));
        assert!(env.is_terminal(&[tm, te, am, an], OutputModality::Both));
        assert!(!env.is_terminal(&[te], OutputModality::TextOut));
        assert!(!env.is_terminal(&[], OutputModality::TextOut));
        assert!(env.is_terminal(&[v.eos()], OutputModality::AudioOut));
        let plain = Env::new(EnvConfig {
            stop_after_answer: false,
            ..Default::default()
        })
        .unwrap();
        assert!(!plain.is_terminal(&[tm, te], OutputModality::TextOut));
    }

    #[test]
    fn too_short_episodes_earn_no_format_or_answer() {
        let cfg = EnvConfig {
            max_len: 1,
            ..Default::default()
        };
        let env = Env::new(cfg).unwrap();
        let p = scripted_oracle(env.vocab(), env.prefix_k()).unwrap();
        let frozen = snapshot(&p);
        let inst = instance(OutputModality::TextOut);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = env.run_episode(&p, &frozen, &inst, &mut rng).unwrap();
        assert_eq!(r.trajectory.len(), 1);
        assert!(r.response.answer_for(OutputModality::TextOut, 30).is_none());
        assert_eq!(r.reward, 0.25); // one of four reference text tokens
    }

    #[test]
    fn episodes_are_deterministic_and_consistent() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let p = env.initial_params();
        let frozen = snapshot(&p);
        let inst = instance(OutputModality::Both);
        let a = env
            .run_episode(&p, &frozen, &inst, &mut ChaCha8Rng::seed_from_u64(42))
            .unwrap();
        let b = env
            .run_episode(&p, &frozen, &inst, &mut ChaCha8Rng::seed_from_u64(42))
            .unwrap();
        assert_eq!(a, b);
        let (_, again) = env.score(a.trajectory.actions(), &inst).unwrap();
        assert_eq!(again, a.reward);
        assert_eq!(a.trajectory.terminal_reward(), a.reward);
    }

    #[test]
    fn uniform_greedy_falls_back_to_forced_coin() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let p = env.initial_params();
        let inst = instance(OutputModality::TextOut);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ent = 0;
        for _ in 0..200 {
            let out = env.decode_greedy(&p, &inst, &mut rng).unwrap();
            assert_eq!(out.tokens, vec![env.vocab().eos()]);
            assert_eq!(out.prediction, None);
            if out.forced == AnswerLabel::Entailed {
                ent += 1;
            }
        }
        assert!((60..140).contains(&ent), "{ent}");
    }

    #[test]
    fn mismatched_params_rejected() {
        let env = Env::new(EnvConfig::default()).unwrap();
        let p = PolicyParams::zeros(4, TASK_FEATURE_DIM, 4);
        let inst = instance(OutputModality::TextOut);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(env.decode_greedy(&p, &inst, &mut rng).is_err());
    }
}
