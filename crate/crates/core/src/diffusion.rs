//! Continuous-time absorbing-state (masked) diffusion.
//!
//! Forward process: every position independently turns into the mask token
//! with probability `t`. Reverse step from `t` to `s < t`: a masked position
//! becomes a clean token with probability `(t - s) / t` (distributed as the
//! model prediction) and stays masked otherwise; clean positions never change.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::{Scalar, TokenId};

/// Ordinary tokens are `0..size`; the mask and register tokens sit outside that range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    pub mask_id: TokenId,
    pub reg_id: TokenId,
}

impl Vocabulary {
    /// Ordinary vocabulary of `size` tokens with `[M] = size` and `[reg] = size + 1`.
    pub fn new(size: u32) -> Result<Self> {
        Self::with_special(size, size, size + 1)
    }

    pub fn with_special(size: u32, mask_id: TokenId, reg_id: TokenId) -> Result<Self> {
        if size == 0 {
            return Err(invalid("vocabulary needs at least one ordinary token"));
        }
        if mask_id == reg_id {
            return Err(invalid("mask and register ids must differ"));
        }
        if mask_id < size || reg_id < size {
            return Err(invalid("special ids must lie outside the ordinary range"));
        }
        Ok(Self { size, mask_id, reg_id })
    }

    /// Size of the embedding table: ordinary ids plus both special ids.
    pub fn total(&self) -> usize {
        self.mask_id.max(self.reg_id) as usize + 1
    }

    pub fn is_ordinary(&self, id: TokenId) -> bool {
        id < self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
}

/// Discretized timesteps `1 = t_K > ... > t_0 = 0`, stored in decreasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn discretize(num_steps: usize, shape: ScheduleShape) -> Result<Self> {
        if num_steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let steps = match shape {
            ScheduleShape::Linear => (0..=num_steps)
                .map(|i| (num_steps - i) as f64 / num_steps as f64)
                .collect(),
        };
        Ok(Self { steps })
    }

    pub fn linear(num_steps: usize) -> Result<Self> {
        Self::discretize(num_steps, ScheduleShape::Linear)
    }

    /// `[t_K, ..., t_0]`.
    pub fn times(&self) -> &[f64] {
        &self.steps
    }

    /// Number of reverse steps `K`.
    pub fn num_steps(&self) -> usize {
        self.steps.len() - 1
    }

    /// Time at which reverse step `k` (1-based) starts.
    pub fn start_time(&self, step: usize) -> f64 {
        self.steps[step - 1]
    }

    /// Time reached at the end of reverse step `k` (1-based).
    pub fn end_time(&self, step: usize) -> f64 {
        self.steps[step]
    }

    /// How many of `len` positions the schedule unmasks at each step, taking
    /// `round(len * t)` as the number still masked at time `t`.
    pub fn step_sizes(&self, len: usize) -> Vec<usize> {
        let masked_at = |t: f64| (len as f64 * t).round() as usize;
        self.steps
            .windows(2)
            .map(|w| masked_at(w[0]) - masked_at(w[1]))
            .collect()
    }
}

/// A sequence of ordinary tokens and mask tokens (`X_t`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    vocab: Vocabulary,
    tokens: Vec<TokenId>,
}

impl MaskedSequence {
    pub fn new(vocab: Vocabulary, tokens: Vec<TokenId>) -> Result<Self> {
        if let Some(bad) = tokens
            .iter()
            .find(|&&id| !vocab.is_ordinary(id) && id != vocab.mask_id)
        {
            return Err(invalid(format!("token {bad} is neither ordinary nor [M]")));
        }
        Ok(Self { vocab, tokens })
    }

    pub fn fully_masked(vocab: Vocabulary, len: usize) -> Self {
        Self { vocab, tokens: vec![vocab.mask_id; len] }
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.vocab.mask_id
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&id| id == self.vocab.mask_id).count()
    }

    pub fn is_clean(&self) -> bool {
        self.mask_count() == 0
    }
}

/// `p(X_s^i | X_t)` for a masked position: a distribution over the ordinary
/// vocabulary plus the probability of staying masked.
#[derive(Clone, Debug, PartialEq)]
pub struct UnmaskDistribution {
    pub token_probs: Vec<f64>,
    pub mask_prob: f64,
}

impl UnmaskDistribution {
    pub fn total(&self) -> f64 {
        self.token_probs.iter().sum::<f64>() + self.mask_prob
    }
}

/// Sample `X_t ~ q(X_t | X_0)`: each position independently becomes `[M]` with probability `t`.
pub fn forward_mask<R: Rng + ?Sized>(x0: &MaskedSequence, t: f64, rng: &mut R) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t = {t} is outside [0, 1]")));
    }
    if !x0.is_clean() {
        return Err(invalid("forward_mask expects a clean sequence"));
    }
    let mask_id = x0.vocab.mask_id;
    let tokens = x0
        .tokens
        .iter()
        .map(|&id| if rng.gen::<f64>() < t { mask_id } else { id })
        .collect();
    Ok(MaskedSequence { vocab: x0.vocab, tokens })
}

/// Reverse posterior for a masked position with the model prediction `pred`
/// standing in for the clean token: `((t - s) / t) * pred` and `s / t` for `[M]`.
pub fn posterior_unmask_dist(pred: &[f64], t: f64, s: f64) -> Result<UnmaskDistribution> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(format!("t = {t} must lie in (0, 1]")));
    }
    if !(s >= 0.0 && s < t) {
        return Err(invalid(format!("need 0 <= s < t, got s = {s}, t = {t}")));
    }
    if pred.iter().any(|&p| !(p >= 0.0)) {
        return Err(invalid("prediction has negative or NaN entries"));
    }
    let sum: f64 = pred.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("prediction sums to {sum}, expected 1")));
    }
    let unmask = (t - s) / t;
    Ok(UnmaskDistribution {
        token_probs: pred.iter().map(|p| p * unmask).collect(),
        mask_prob: s / t,
    })
}

/// One reverse step for a single position. Clean tokens are absorbing.
pub fn reverse_step_token<R: Rng + ?Sized>(
    current: TokenId,
    dist: &UnmaskDistribution,
    vocab: &Vocabulary,
    rng: &mut R,
) -> TokenId {
    if current != vocab.mask_id {
        return current;
    }
    let u: f64 = rng.gen::<f64>() * dist.total();
    let mut acc = 0.0;
    let mut last_positive = None;
    for (id, &p) in dist.token_probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = Some(id as TokenId);
        if u < acc {
            return id as TokenId;
        }
    }
    if dist.mask_prob > 0.0 {
        return vocab.mask_id;
    }
    // Rounding left `u` just past the last bucket.
    last_positive.unwrap_or(vocab.mask_id)
}

/// Value of the masked-diffusion objective over the supplied decode positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdmLoss<F> {
    pub value: F,
    /// Number of decode positions that contributed; zero means `value` is a placeholder 0.
    pub positions: usize,
}

impl<F> MdmLoss<F> {
    pub fn is_empty(&self) -> bool {
        self.positions == 0
    }
}

/// `(1/t) * mean_i -log softmax(logits_i)[target_i]` over the decode positions.
pub fn mdm_loss<F: Scalar>(logits: ArrayView2<F>, targets: &[TokenId], t: f64) -> Result<MdmLoss<F>> {
    mdm_loss_impl(logits, targets, t, false).map(|(loss, _)| loss)
}

/// [`mdm_loss`] together with its gradient with respect to `logits`.
pub fn mdm_loss_grad<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[TokenId],
    t: f64,
) -> Result<(MdmLoss<F>, Array2<F>)> {
    mdm_loss_impl(logits, targets, t, true).map(|(loss, grad)| (loss, grad.unwrap()))
}

fn mdm_loss_impl<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[TokenId],
    t: f64,
    with_grad: bool,
) -> Result<(MdmLoss<F>, Option<Array2<F>>)> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid(format!("loss weight 1/t undefined for t = {t}")));
    }
    if logits.nrows() != targets.len() {
        return Err(invalid(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    if let Some(bad) = targets.iter().find(|&&id| id as usize >= vocab) {
        return Err(invalid(format!("target {bad} outside the {vocab}-way output")));
    }
    let n = targets.len();
    let mut grad = with_grad.then(|| Array2::zeros(logits.raw_dim()));
    if n == 0 {
        return Ok((MdmLoss { value: F::zero(), positions: 0 }, grad));
    }
    let scale = F::of(1.0 / (t * n as f64));
    let mut total = F::zero();
    for (i, (row, &target)) in logits.outer_iter().zip(targets).enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let sum_exp: F = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[target as usize];
        if let Some(g) = grad.as_mut() {
            for (j, &x) in row.iter().enumerate() {
                let p = (x - log_z).exp();
                let indicator = if j == target as usize { F::one() } else { F::zero() };
                g[[i, j]] = (p - indicator) * scale;
            }
        }
    }
    Ok((MdmLoss { value: total * scale, positions: n }, grad))
}
