//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls the library routine it is used to check.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use soundmind::env::{Env, Formula, LogicTask, TaskInstance, MAX_ATOMS};
use soundmind::policy::{PolicyParams, State, TokenId};
use soundmind::reward::{AnswerLabel, LengthAnnotation, OutputModality};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters with independent normal-ish entries of scale `scale`.
pub fn random_params(template: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = template.zeros_like();
    for i in 0..p.len() {
        // Sum of uniforms: cheap, bounded, roughly Gaussian.
        let u: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum();
        p.set_flat(i, scale * u);
    }
    p
}

// ---------------------------------------------------------------- logic ---

pub fn random_formula(n_atoms: usize, depth: usize, rng: &mut ChaCha8Rng) -> Formula {
    let leaf = depth == 0 || rng.gen_bool(0.3);
    if leaf {
        if rng.gen_bool(0.08) {
            return Formula::Const(rng.gen());
        }
        return Formula::Atom(rng.gen_range(0..n_atoms as u8));
    }
    let a = random_formula(n_atoms, depth - 1, rng);
    match rng.gen_range(0..4) {
        0 => Formula::not(a),
        1 => Formula::and(a, random_formula(n_atoms, depth - 1, rng)),
        2 => Formula::or(a, random_formula(n_atoms, depth - 1, rng)),
        _ => Formula::implies(a, random_formula(n_atoms, depth - 1, rng)),
    }
}

/// Truth value with atoms looked up in an explicit value table.
fn value(f: &Formula, vals: &[bool; MAX_ATOMS]) -> bool {
    match f {
        Formula::Const(b) => *b,
        Formula::Atom(i) => vals[*i as usize],
        Formula::Not(a) => !value(a, vals),
        Formula::And(a, b) => {
            if !value(a, vals) {
                false
            } else {
                value(b, vals)
            }
        }
        Formula::Or(a, b) => {
            if value(a, vals) {
                true
            } else {
                value(b, vals)
            }
        }
        Formula::Implies(a, b) => {
            if value(a, vals) {
                value(b, vals)
            } else {
                true
            }
        }
    }
}

/// Enumerates all `2^MAX_ATOMS` assignments, counting down from all-true and
/// with atom 0 as the most significant position, looking for a counterexample.
pub fn reverse_order_entailment(major: &Formula, minor: &Formula, conclusion: &Formula) -> AnswerLabel {
    let total = 1u32 << MAX_ATOMS;
    for code in (0..total).rev() {
        let mut vals = [false; MAX_ATOMS];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = code >> (MAX_ATOMS - 1 - i) & 1 == 1;
        }
        if value(major, &vals) && value(minor, &vals) && !value(conclusion, &vals) {
            return AnswerLabel::NotEntailed;
        }
    }
    AnswerLabel::Entailed
}

// ------------------------------------------------------- edit distance ---

/// Every word sequence of length `0..=max_len` over `0..alphabet`.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// All-pairs shortest-path distances on the graph whose nodes are the given
/// sequences and whose edges are single insertions, deletions and
/// substitutions. Optimal edit scripts never need sequences longer than the
/// longer endpoint, so restricting the graph to `max_len` is exact.
pub struct EditGraph {
    pub nodes: Vec<Vec<u8>>,
    adjacency: Vec<Vec<usize>>,
}

impl EditGraph {
    pub fn new(alphabet: u8, max_len: usize) -> Self {
        let nodes = all_sequences(alphabet, max_len);
        let index: HashMap<Vec<u8>, usize> =
            nodes.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let adjacency = nodes
            .iter()
            .map(|s| {
                let mut adj = Vec::new();
                for pos in 0..=s.len() {
                    for c in 0..alphabet {
                        let mut t = s.clone();
                        t.insert(pos, c);
                        if let Some(&j) = index.get(&t) {
                            adj.push(j);
                        }
                    }
                }
                for pos in 0..s.len() {
                    let mut t = s.clone();
                    t.remove(pos);
                    adj.push(index[&t]);
                    for c in 0..alphabet {
                        if c != s[pos] {
                            let mut t = s.clone();
                            t[pos] = c;
                            adj.push(index[&t]);
                        }
                    }
                }
                adj
            })
            .collect();
        Self { nodes, adjacency }
    }

    /// Breadth-first distances from node `src` to every node.
    pub fn distances_from(&self, src: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.nodes.len()];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

// ------------------------------------------------ arbitrary precision ---

/// Fractional bits of the fixed-point representation.
pub const FRAC_BITS: u64 = 200;

fn one() -> BigInt {
    BigInt::one() << FRAC_BITS
}

/// Exact value of a finite f64 as `(mantissa, exponent)` with value `m · 2^e`.
fn decompose(x: f64) -> (BigInt, i64) {
    assert!(x.is_finite());
    if x == 0.0 {
        return (BigInt::zero(), 0);
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    (BigInt::from(sign) * BigInt::from(m), e)
}

/// Fixed-point value of `Σ a_i · b_i` for f64 inputs, with every product
/// and sum formed exactly before a single truncation.
pub fn exact_dot_fixed(pairs: &[(f64, f64)], constant: f64) -> BigInt {
    // Common exponent low enough for every product.
    const BASE: i64 = -2200;
    let mut acc = BigInt::zero();
    let mut add = |m: BigInt, e: i64| {
        assert!(e >= BASE);
        acc += m << (e - BASE) as usize;
    };
    for &(a, b) in pairs {
        let (ma, ea) = decompose(a);
        let (mb, eb) = decompose(b);
        add(ma * mb, ea + eb);
    }
    let (mc, ec) = decompose(constant);
    add(mc, ec);
    // Rescale from 2^BASE to 2^-FRAC_BITS (floor toward −∞ is fine: error 2^-200).
    let shift = (-BASE) as u64 - FRAC_BITS;
    floor_shift(&acc, shift)
}

fn floor_shift(x: &BigInt, shift: u64) -> BigInt {
    if x.is_negative() {
        let mask: BigInt = (BigInt::one() << shift) - 1;
        let up: BigInt = (-x + mask) >> shift;
        -up
    } else {
        x >> shift
    }
}

fn mul(a: &BigInt, b: &BigInt) -> BigInt {
    floor_shift(&(a * b), FRAC_BITS)
}

fn div(a: &BigInt, b: &BigInt) -> BigInt {
    (a << FRAC_BITS) / b
}

/// exp(x) for fixed-point `x ≤ 0` by halving into the unit interval, Taylor
/// series, then repeated squaring.
pub fn fixed_exp(x: &BigInt) -> BigInt {
    let mut halvings = 0u32;
    let mut y = x.clone();
    let half = one() >> 1;
    while y.abs() > half {
        y = floor_shift(&y, 1);
        halvings += 1;
    }
    let mut sum = one();
    let mut term = one();
    for n in 1..80u32 {
        term = mul(&term, &y) / BigInt::from(n);
        if term.is_zero() {
            break;
        }
        sum += &term;
    }
    for _ in 0..halvings {
        sum = mul(&sum, &sum);
    }
    sum
}

/// 2·atanh(z) = ln((1+z)/(1−z)) for fixed-point |z| ≤ 1/3.
fn two_atanh(z: &BigInt) -> BigInt {
    let z2 = mul(z, z);
    let mut power = z.clone();
    let mut sum = BigInt::zero();
    let mut k = 1u32;
    while !power.is_zero() {
        sum += &power / BigInt::from(k);
        power = mul(&power, &z2);
        k += 2;
    }
    sum * 2
}

/// ln(x) for fixed-point `x ≥ 1`.
pub fn fixed_ln(x: &BigInt) -> BigInt {
    assert!(*x >= one());
    let ln2 = two_atanh(&div(&one(), &(one() * 3)));
    let mut y = x.clone();
    let mut e = 0u32;
    let two = one() * 2;
    while y >= two {
        y = floor_shift(&y, 1);
        e += 1;
    }
    // y in [1, 2): ln y = 2 atanh((y−1)/(y+1)), argument ≤ 1/3.
    let z = div(&(&y - one()), &(&y + one()));
    two_atanh(&z) + ln2 * e
}

pub fn fixed_to_f64(x: &BigInt) -> f64 {
    let shifted = floor_shift(x, FRAC_BITS - 64);
    shifted.to_f64().expect("finite") / 2f64.powi(64)
}

/// High-precision log π(action | state): exact logits, fixed-point
/// log-sum-exp.
pub fn oracle_log_prob(params: &PolicyParams, state: &State, action: TokenId) -> f64 {
    let v = params.vocab_size();
    let x = state.dense_features(v);
    let logits: Vec<BigInt> = (0..v)
        .map(|j| {
            let pairs: Vec<(f64, f64)> = x
                .iter()
                .enumerate()
                .filter(|(_, xi)| **xi != 0.0)
                .map(|(i, xi)| (*xi, params.weight(i, j)))
                .collect();
            exact_dot_fixed(&pairs, params.bias()[j])
        })
        .collect();
    let max = logits.iter().max().expect("non-empty vocabulary").clone();
    let sum: BigInt = logits.iter().map(|z| fixed_exp(&(z - &max))).sum();
    let lp = &logits[action.index()] - &max - fixed_ln(&sum);
    fixed_to_f64(&lp)
}

// ------------------------------------------------------- enumeration ---

/// One complete response with its exact probability under the policy.
pub struct Enumerated {
    pub tokens: Vec<TokenId>,
    pub states: Vec<State>,
    pub log_prob: f64,
    pub reward: f64,
}

/// Every response the environment can produce for `instance`, with the
/// product-of-softmax probability computed from dense features.
pub fn enumerate_responses(env: &Env, params: &PolicyParams, instance: &TaskInstance) -> Vec<Enumerated> {
    let v = env.vocab().len();
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, Vec<State>, f64)> = vec![(Vec::new(), Vec::new(), 0.0)];
    while let Some((tokens, states, lp)) = stack.pop() {
        let state = State::new(instance.features(), &tokens, env.prefix_k());
        let probs = dense_softmax(params, &state);
        for a in 0..v {
            let mut t = tokens.clone();
            t.push(TokenId(a as u32));
            let mut s = states.clone();
            s.push(state.clone());
            let lp_a = lp + probs[a].ln();
            if env.is_terminal(&t, instance.requested_output) || t.len() == env.max_len() {
                let reward = env.score(&t, instance).expect("scorable").1;
                out.push(Enumerated {
                    tokens: t,
                    states: s,
                    log_prob: lp_a,
                    reward,
                });
            } else {
                stack.push((t, s, lp_a));
            }
        }
    }
    out
}

/// Softmax of `bias + Wᵀx` from the dense feature vector.
pub fn dense_softmax(params: &PolicyParams, state: &State) -> Vec<f64> {
    let v = params.vocab_size();
    let x = state.dense_features(v);
    let z: Vec<f64> = (0..v)
        .map(|j| {
            params.bias()[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi * params.weight(i, j))
                    .sum::<f64>()
        })
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|zi| (zi - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|ei| ei / s).collect()
}

/// ∇ log π(a|s) = x ⊗ (e_a − π) and (e_a − π) for the bias, written from
/// the closed form.
pub fn closed_form_grad(params: &PolicyParams, state: &State, action: TokenId) -> PolicyParams {
    let v = params.vocab_size();
    let x = state.dense_features(v);
    let p = dense_softmax(params, state);
    let mut g = params.zeros_like();
    for j in 0..v {
        let d = f64::from(u8::from(j == action.index())) - p[j];
        *g.bias_mut(j) = d;
        for (i, xi) in x.iter().enumerate() {
            *g.weight_mut(i, j) = xi * d;
        }
    }
    g
}

/// A task instance built directly from formulas.
pub fn instance(major: Formula, minor: Formula, conclusion: Formula, modality: OutputModality) -> TaskInstance {
    let task = LogicTask::new(major, minor, conclusion).expect("valid task");
    TaskInstance::new("fixture", task, LengthAnnotation::new(4, 4).unwrap(), modality)
        .expect("valid instance")
}
