//! Sparse samplers and the dense reference sampler.
//!
//! [`sample_pregen`] follows a pre-generated decoding order: prefill the
//! prompt, then at step `k` feed `C_{k-1}` (appended to the cache), the masks
//! of `C_k` and the registers. [`sample_semi_ar`] decodes blocks one at a time
//! by confidence. [`sample_dense_reference`] replays a pre-generated order
//! without a cache, materializing every token at every step.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::diffusion::{posterior_unmask_dist, reverse_step_token, DiffusionSchedule, MaskedSequence};
use crate::error::{invalid, Result};
use crate::masks::{step_causal_mask, AttentionMask, Label, Role};
use crate::sparse::{partition_from_order, register_positions, TokenKind};
use crate::{Scalar, TokenId};

/// Response positions (0-based, relative to the response) decoded at each step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOrder {
    steps: Vec<Vec<usize>>,
}

impl DecodeOrder {
    /// Steps must be nonempty, disjoint and cover `0..len`.
    pub fn new(steps: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for step in &steps {
            if step.is_empty() {
                return Err(invalid("empty decoding step"));
            }
            for &p in step {
                if p >= len || std::mem::replace(&mut seen[p], true) {
                    return Err(invalid(format!("position {p} is out of range or decoded twice")));
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(invalid("decoding order does not cover every position"));
        }
        Ok(Self { steps })
    }

    /// Split a permutation into consecutive steps of the given sizes.
    pub fn from_permutation(order: &[usize], step_sizes: &[usize]) -> Result<Self> {
        if step_sizes.iter().sum::<usize>() != order.len() {
            return Err(invalid("step sizes do not sum to the sequence length"));
        }
        let mut rest = order;
        let mut steps = Vec::with_capacity(step_sizes.len());
        for &n in step_sizes {
            let (head, tail) = rest.split_at(n);
            steps.push(head.to_vec());
            rest = tail;
        }
        Self::new(steps, order.len())
    }

    /// Uniformly random order with step sizes taken from a linear schedule.
    pub fn random<R: Rng + ?Sized>(len: usize, num_steps: usize, rng: &mut R) -> Result<Self> {
        if num_steps == 0 || num_steps > len {
            return Err(invalid(format!("cannot split {len} positions into {num_steps} steps")));
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        let sizes = DiffusionSchedule::linear(num_steps)?.step_sizes(len);
        Self::from_permutation(&order, &sizes)
    }

    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step_sizes(&self) -> Vec<usize> {
        self.steps.iter().map(Vec::len).collect()
    }

    /// The whole order flattened step by step.
    pub fn permutation(&self) -> Vec<usize> {
        self.steps.concat()
    }
}

/// Stratified order over an `h x w` grid (row-major positions).
///
/// The grid is cut into `g x g` near-equal strata with `g = floor(sqrt(K))`
/// (capped by `h` and `w`). Each stratum is shuffled, the strata are
/// interleaved round-robin, and the interleaved sequence is cut into steps
/// whose sizes follow the linear schedule. Every step therefore draws evenly
/// from every stratum.
pub fn pregen_order_2d(h: usize, w: usize, num_steps: usize, seed: u64) -> Result<DecodeOrder> {
    let len = h * w;
    if num_steps == 0 || num_steps > len {
        return Err(invalid(format!("K = {num_steps} must lie in [1, {len}]")));
    }
    let g = ((num_steps as f64).sqrt().floor() as usize).clamp(1, h.min(w));
    let band = |x: usize, n: usize| x * g / n;
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); g * g];
    for r in 0..h {
        for c in 0..w {
            strata[band(r, h) * g + band(c, w)].push(r * w + c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }
    let longest = strata.iter().map(Vec::len).max().unwrap_or(0);
    let interleaved: Vec<usize> = (0..longest)
        .flat_map(|i| strata.iter().filter_map(move |s| s.get(i).copied()))
        .collect();
    let sizes = DiffusionSchedule::linear(num_steps)?.step_sizes(len);
    let mut order = DecodeOrder::from_permutation(&interleaved, &sizes)?;
    for step in order.steps.iter_mut() {
        step.sort_unstable();
    }
    Ok(order)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeRule {
    /// Argmax, lowest token id on ties.
    #[default]
    Greedy,
    Categorical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    #[default]
    MaxProb,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemiARConfig {
    pub block_size: usize,
    /// Block indices in decoding order; empty means left to right.
    #[serde(default)]
    pub block_order: Vec<usize>,
    pub steps_per_block: usize,
    #[serde(default)]
    pub confidence: Confidence,
    #[serde(default)]
    pub decode_rule: DecodeRule,
}

impl SemiARConfig {
    pub fn new(block_size: usize, steps_per_block: usize) -> Self {
        Self {
            block_size,
            block_order: Vec::new(),
            steps_per_block,
            confidence: Confidence::MaxProb,
            decode_rule: DecodeRule::Greedy,
        }
    }

    pub fn num_blocks(&self, len: usize) -> usize {
        len.div_ceil(self.block_size)
    }

    /// The block order, resolved and validated for a response of length `len`.
    pub fn resolved_order(&self, len: usize) -> Result<Vec<usize>> {
        if self.block_size == 0 || self.steps_per_block == 0 {
            return Err(invalid("block_size and steps_per_block must be positive"));
        }
        let n = self.num_blocks(len);
        if self.block_order.is_empty() {
            return Ok((0..n).collect());
        }
        let mut sorted = self.block_order.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(invalid(format!("block_order must be a permutation of 0..{n}")));
        }
        Ok(self.block_order.clone())
    }
}

/// What one forward call saw and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based step; 0 is the prefill, `K + 1` the final commit.
    pub step: usize,
    /// Absolute positions per role.
    pub new_cache: Vec<usize>,
    pub decode: Vec<usize>,
    pub registers: Vec<usize>,
    /// `(absolute position, token)` decided at this step.
    pub decoded: Vec<(usize, TokenId)>,
    pub input_size: usize,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub response: MaskedSequence,
    pub trace: Vec<StepTrace>,
    /// Token rows pushed through the model by this call.
    pub token_forwards: u64,
}

/// Attention used by the dense reference sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseVariant {
    /// The step-causal training mask over the whole materialized sequence.
    #[default]
    StepCausal,
    /// Vanilla masked diffusion: every token attends every token, no registers.
    FullAttention,
}

fn softmax_f64<F: Scalar>(row: ArrayView1<F>) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let exp: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn argmax<F: Scalar>(row: ArrayView1<F>) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Decide the tokens of the positions scheduled at one step. The order is
/// authoritative: the posterior uses `s = 0`, so every scheduled position resolves.
fn decide<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    logits: &Array2<F>,
    t: f64,
    rule: DecodeRule,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let vocab = model.config().vocab;
    logits
        .outer_iter()
        .map(|row| match rule {
            DecodeRule::Greedy => Ok(argmax(row)),
            DecodeRule::Categorical => {
                let dist = posterior_unmask_dist(&softmax_f64(row), t, 0.0)?;
                Ok(reverse_step_token(vocab.mask_id, &dist, &vocab, rng))
            }
        })
        .collect()
}

fn check_common<F: Scalar>(model: &Model<F>, prompt: &[TokenId], len: usize, regs: usize) -> Result<()> {
    let vocab = model.config().vocab;
    if let Some(&t) = prompt.iter().find(|&&t| !vocab.is_ordinary(t)) {
        return Err(invalid(format!("prompt token {t} is not ordinary")));
    }
    if len == 0 {
        return Err(invalid("response length must be positive"));
    }
    let needed = prompt.len() + len + regs;
    if needed > model.config().max_position {
        return Err(invalid(format!(
            "S + L + m = {needed} exceeds max_position {}",
            model.config().max_position
        )));
    }
    Ok(())
}

fn check_order(order: &DecodeOrder, len: usize, schedule: &DiffusionSchedule) -> Result<()> {
    if order.len() != len {
        return Err(invalid(format!("order covers {} positions, response has {len}", order.len())));
    }
    if schedule.num_steps() != order.num_steps() {
        return Err(invalid(format!(
            "schedule has {} steps, order has {}",
            schedule.num_steps(),
            order.num_steps()
        )));
    }
    Ok(())
}

/// Sparse sampling along a pre-generated order with a KV cache and `regs` registers.
///
/// `decide` receives the 1-based step, the absolute decode positions and their
/// logits, and returns the chosen tokens.
pub fn run_pregen<F: Scalar>(
    model: &Model<F>,
    prompt: &[TokenId],
    len: usize,
    order: &DecodeOrder,
    regs: usize,
    mut decide: impl FnMut(usize, &[usize], &Array2<F>) -> Result<Vec<TokenId>>,
) -> Result<SampleOutput> {
    check_common(model, prompt, len, regs)?;
    let vocab = model.config().vocab;
    let s = prompt.len();
    let start = model.token_forwards();
    let mut cache = model.new_cache();
    let mut trace = Vec::new();
    let prompt_rows: Vec<(TokenId, usize)> = prompt.iter().copied().zip(0..).collect();
    if !prompt_rows.is_empty() {
        model.forward_step(&mut cache, &prompt_rows, &[], &[])?;
        trace.push(StepTrace {
            step: 0,
            new_cache: (0..s).collect(),
            decode: vec![],
            registers: vec![],
            decoded: vec![],
            input_size: s,
        });
    }
    let reg_rows: Vec<(TokenId, usize)> =
        register_positions(s, len, regs).into_iter().map(|p| (vocab.reg_id, p)).collect();
    let mut tokens = vec![vocab.mask_id; len];
    let mut prev: Vec<(TokenId, usize)> = Vec::new();
    for (k, step) in order.steps().iter().enumerate() {
        let positions: Vec<usize> = step.iter().map(|&p| s + p).collect();
        let decode: Vec<(TokenId, usize)> = positions.iter().map(|&p| (vocab.mask_id, p)).collect();
        let logits = model.forward_step(&mut cache, &prev, &decode, &reg_rows)?;
        let chosen = decide(k + 1, &positions, &logits)?;
        if chosen.len() != step.len() || chosen.iter().any(|&t| !vocab.is_ordinary(t)) {
            return Err(invalid("decoder returned the wrong number of tokens or a special token"));
        }
        for (&p, &t) in step.iter().zip(&chosen) {
            tokens[p] = t;
        }
        trace.push(StepTrace {
            step: k + 1,
            new_cache: prev.iter().map(|r| r.1).collect(),
            decode: positions.clone(),
            registers: reg_rows.iter().map(|r| r.1).collect(),
            decoded: positions.iter().copied().zip(chosen.iter().copied()).collect(),
            input_size: prev.len() + decode.len() + reg_rows.len(),
        });
        prev = chosen.into_iter().zip(positions).collect();
    }
    // Final commit: the last decoded set enters the cache like every other set.
    if !prev.is_empty() {
        model.forward_step(&mut cache, &prev, &[], &[])?;
        trace.push(StepTrace {
            step: order.num_steps() + 1,
            new_cache: prev.iter().map(|r| r.1).collect(),
            decode: vec![],
            registers: vec![],
            decoded: vec![],
            input_size: prev.len(),
        });
    }
    Ok(SampleOutput {
        response: MaskedSequence::new(vocab, tokens)?,
        trace,
        token_forwards: model.token_forwards() - start,
    })
}

/// Sparse sampler over a pre-generated order.
#[allow(clippy::too_many_arguments)]
pub fn sample_pregen<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    prompt: &[TokenId],
    len: usize,
    order: &DecodeOrder,
    schedule: &DiffusionSchedule,
    regs: usize,
    rng: &mut R,
    rule: DecodeRule,
) -> Result<SampleOutput> {
    check_order(order, len, schedule)?;
    run_pregen(model, prompt, len, order, regs, |k, _, logits| {
        decide(model, logits, schedule.start_time(k), rule, rng)
    })
}

/// Tokens, positions and mask of the materialized sequence at step `k`
/// (1-based), plus the rows holding the masks of `C_k`.
pub struct DenseStep {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
    /// `(row, response position)` for the positions decoded at this step.
    pub decode_rows: Vec<(usize, usize)>,
}

/// Build the uncached input for step `k` of an order, given the response
/// tokens decided so far (`mask_id` where undecided).
pub fn dense_step<F: Scalar>(
    model: &Model<F>,
    prompt: &[TokenId],
    tokens: &[TokenId],
    order: &DecodeOrder,
    k: usize,
    regs: usize,
    variant: DenseVariant,
) -> Result<DenseStep> {
    let vocab = model.config().vocab;
    let s = prompt.len();
    let len = tokens.len();
    let current: HashSet<usize> = order.steps()[k - 1].iter().copied().collect();
    match variant {
        DenseVariant::StepCausal => {
            let assignment = partition_from_order(&order.permutation(), &order.step_sizes(), s, k - 1)?
                .with_registers(regs);
            let mask = step_causal_mask(&assignment);
            let mut out = DenseStep { tokens: vec![], positions: vec![], mask, decode_rows: vec![] };
            for (row, slot) in assignment.merged_layout().iter().enumerate() {
                out.positions.push(slot.position);
                out.tokens.push(match slot.kind {
                    TokenKind::Prompt => prompt[slot.index],
                    TokenKind::Clean => tokens[slot.index],
                    TokenKind::Masked => {
                        if slot.block == k {
                            out.decode_rows.push((row, slot.index));
                        }
                        vocab.mask_id
                    }
                    TokenKind::Register => vocab.reg_id,
                });
            }
            Ok(out)
        }
        DenseVariant::FullAttention => {
            let mut out = DenseStep {
                tokens: prompt.iter().chain(tokens).copied().collect(),
                positions: (0..s + len).collect(),
                mask: AttentionMask::full(
                    (0..s + len).map(|p| Label { role: Role::Prompt, index: p, position: p }).collect(),
                ),
                decode_rows: vec![],
            };
            let mut rows: Vec<usize> = current.into_iter().collect();
            rows.sort_unstable();
            out.decode_rows = rows.into_iter().map(|p| (s + p, p)).collect();
            Ok(out)
        }
    }
}

/// Dense replay of an order: every token is materialized at every step and
/// no cache is used. `decide` works as in [`run_pregen`].
pub fn run_dense<F: Scalar>(
    model: &Model<F>,
    prompt: &[TokenId],
    len: usize,
    order: &DecodeOrder,
    regs: usize,
    variant: DenseVariant,
    mut decide: impl FnMut(usize, &[usize], &Array2<F>) -> Result<Vec<TokenId>>,
) -> Result<SampleOutput> {
    check_common(model, prompt, len, regs)?;
    let vocab = model.config().vocab;
    let s = prompt.len();
    let start = model.token_forwards();
    let mut tokens = vec![vocab.mask_id; len];
    let mut trace = Vec::new();
    for k in 1..=order.num_steps() {
        let step = dense_step(model, prompt, &tokens, order, k, regs, variant)?;
        let logits = model.forward_full(&step.tokens, &step.positions, &step.mask)?;
        let rows: Vec<usize> = step.decode_rows.iter().map(|r| r.0).collect();
        let positions: Vec<usize> = step.decode_rows.iter().map(|r| s + r.1).collect();
        let chosen = decide(k, &positions, &logits.select(ndarray::Axis(0), &rows))?;
        for (&(_, p), &t) in step.decode_rows.iter().zip(&chosen) {
            tokens[p] = t;
        }
        trace.push(StepTrace {
            step: k,
            new_cache: vec![],
            decode: positions.clone(),
            registers: vec![],
            decoded: positions.into_iter().zip(chosen).collect(),
            input_size: step.tokens.len(),
        });
    }
    Ok(SampleOutput {
        response: MaskedSequence::new(vocab, tokens)?,
        trace,
        token_forwards: model.token_forwards() - start,
    })
}

/// Dense reference sampler: same trajectory as [`sample_pregen`] without a cache.
#[allow(clippy::too_many_arguments)]
pub fn sample_dense_reference<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    prompt: &[TokenId],
    len: usize,
    order: &DecodeOrder,
    schedule: &DiffusionSchedule,
    regs: usize,
    rng: &mut R,
    rule: DecodeRule,
    variant: DenseVariant,
) -> Result<SampleOutput> {
    check_order(order, len, schedule)?;
    run_dense(model, prompt, len, order, regs, variant, |k, _, logits| {
        decide(model, logits, schedule.start_time(k), rule, rng)
    })
}

/// Semi-autoregressive sampler: blocks of `cfg.block_size` positions are
/// decoded in `cfg.block_order`. Inside the active block every still-masked
/// position is fed each step and the `ceil(remaining / steps_left)` most
/// confident ones are decoded; masked positions of other blocks are truncated.
pub fn sample_semi_ar<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    prompt: &[TokenId],
    len: usize,
    cfg: &SemiARConfig,
    regs: usize,
    rng: &mut R,
) -> Result<SampleOutput> {
    check_common(model, prompt, len, regs)?;
    let blocks = cfg.resolved_order(len)?;
    let vocab = model.config().vocab;
    let s = prompt.len();
    let start = model.token_forwards();
    let mut cache = model.new_cache();
    let mut trace = Vec::new();
    let prompt_rows: Vec<(TokenId, usize)> = prompt.iter().copied().zip(0..).collect();
    if !prompt_rows.is_empty() {
        model.forward_step(&mut cache, &prompt_rows, &[], &[])?;
        trace.push(StepTrace {
            step: 0,
            new_cache: (0..s).collect(),
            decode: vec![],
            registers: vec![],
            decoded: vec![],
            input_size: s,
        });
    }
    let reg_rows: Vec<(TokenId, usize)> =
        register_positions(s, len, regs).into_iter().map(|p| (vocab.reg_id, p)).collect();
    let mut tokens = vec![vocab.mask_id; len];
    let mut prev: Vec<(TokenId, usize)> = Vec::new();
    let mut step_no = 0;
    for &b in &blocks {
        let lo = b * cfg.block_size;
        let hi = (lo + cfg.block_size).min(len);
        let mut remaining: Vec<usize> = (lo..hi).collect();
        for step_in_block in 0..cfg.steps_per_block {
            if remaining.is_empty() {
                break;
            }
            step_no += 1;
            let steps_left = cfg.steps_per_block - step_in_block;
            let quota = remaining.len().div_ceil(steps_left);
            let decode: Vec<(TokenId, usize)> = remaining.iter().map(|&p| (vocab.mask_id, s + p)).collect();
            let logits = model.forward_step(&mut cache, &prev, &decode, &reg_rows)?;
            let probs: Vec<Vec<f64>> = logits.outer_iter().map(softmax_f64).collect();
            let conf: Vec<f64> = probs.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).collect();
            let mut ranked: Vec<usize> = (0..remaining.len()).collect();
            ranked.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(remaining[a].cmp(&remaining[b])));
            let mut picked: Vec<usize> = ranked[..quota].to_vec();
            picked.sort_unstable();
            let mut decoded = Vec::with_capacity(quota);
            for &i in &picked {
                let t = match cfg.decode_rule {
                    DecodeRule::Greedy => argmax(logits.row(i)),
                    DecodeRule::Categorical => {
                        let dist = posterior_unmask_dist(&probs[i], 1.0, 0.0)?;
                        reverse_step_token(vocab.mask_id, &dist, &vocab, rng)
                    }
                };
                tokens[remaining[i]] = t;
                decoded.push((t, s + remaining[i]));
            }
            trace.push(StepTrace {
                step: step_no,
                new_cache: prev.iter().map(|r| r.1).collect(),
                decode: decode.iter().map(|r| r.1).collect(),
                registers: reg_rows.iter().map(|r| r.1).collect(),
                decoded: decoded.iter().map(|&(t, p)| (p, t)).collect(),
                input_size: prev.len() + decode.len() + reg_rows.len(),
            });
            let done: HashSet<usize> = picked.iter().map(|&i| remaining[i]).collect();
            remaining.retain(|p| !done.contains(p));
            prev = decoded;
        }
    }
    if !prev.is_empty() {
        model.forward_step(&mut cache, &prev, &[], &[])?;
        trace.push(StepTrace {
            step: step_no + 1,
            new_cache: prev.iter().map(|r| r.1).collect(),
            decode: vec![],
            registers: vec![],
            decoded: vec![],
            input_size: prev.len(),
        });
    }
    Ok(SampleOutput {
        response: MaskedSequence::new(vocab, tokens)?,
        trace,
        token_forwards: model.token_forwards() - start,
    })
}
