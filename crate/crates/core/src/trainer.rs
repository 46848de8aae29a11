//! Step-causal training of the backbone on a synthetic 2D pattern grammar.
//!
//! Every training item is a merged sequence: the prompt (block 0), clean
//! tokens spread over `M` blocks, masked tokens spread over `N` blocks and,
//! for each masked block, its own copy of the `m` register tokens. Tokens are
//! sorted by block and attend through the step-causal mask, so one forward
//! pass trains `N` simulated cached inference steps at once.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, Params};
use crate::diffusion::{forward_mask, DiffusionSchedule, MaskedSequence, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::masks::{step_causal_mask, AttentionMask};
use crate::samplers::{pregen_order_2d, sample_pregen, DecodeRule};
use crate::sparse::{BlockAssignment, TokenKind};
use crate::{Scalar, TokenId};

pub const GRID: usize = 8;
pub const COLOURS: u32 = 16;
const MAX_KINDS: usize = 6;

/// Prompt-selected 8x8 two-colour patterns.
///
/// Instance `i` is selected by the one-token prompt `[i]` and renders pattern
/// kind `i % kinds` with colours `a = (3i + 1) % 16` and `b = (5i + 4) % 16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternGrammar {
    pub instances: usize,
    pub kinds: usize,
}

impl Default for PatternGrammar {
    fn default() -> Self {
        Self { instances: 8, kinds: 4 }
    }
}

impl PatternGrammar {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.instances > COLOURS as usize {
            return Err(invalid("instances must lie in [1, 16]"));
        }
        if self.kinds == 0 || self.kinds > MAX_KINDS {
            return Err(invalid(format!("kinds must lie in [1, {MAX_KINDS}]")));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(COLOURS).expect("nonzero size")
    }

    pub fn prompt_len(&self) -> usize {
        1
    }

    pub fn response_len(&self) -> usize {
        GRID * GRID
    }

    pub fn prompt(&self, instance: usize) -> Vec<TokenId> {
        vec![instance as TokenId]
    }

    /// Row-major grid of instance `i`.
    pub fn render(&self, instance: usize) -> Vec<TokenId> {
        let kind = instance % self.kinds;
        let a = (3 * instance as u32 + 1) % COLOURS;
        let b = (5 * instance as u32 + 4) % COLOURS;
        let half = GRID / 2;
        (0..GRID * GRID)
            .map(|cell| {
                let (r, c) = (cell / GRID, cell % GRID);
                let first = match kind {
                    0 => (r + c) % 2 == 0,
                    1 => r % 2 == 0,
                    2 => c % 2 == 0,
                    3 => r < half,
                    4 => c < half,
                    _ => r == c || r + c == GRID - 1,
                };
                if first {
                    a
                } else {
                    b
                }
            })
            .collect()
    }

    /// A response is valid when it is exactly the pattern its prompt selects.
    pub fn is_valid(&self, prompt: &[TokenId], response: &[TokenId]) -> bool {
        match prompt {
            [i] if (*i as usize) < self.instances => self.render(*i as usize) == response,
            _ => false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<TokenId>, MaskedSequence) {
        let i = rng.gen_range(0..self.instances);
        let x0 = MaskedSequence::new(self.vocab(), self.render(i)).expect("colours are ordinary");
        (self.prompt(i), x0)
    }
}

/// Random block ids: prompt 0, clean tokens uniform in `[1, M]`, masked
/// tokens uniform in `[M+1, M+N]`.
pub fn assign_blocks<R: Rng + ?Sized>(
    xt: &MaskedSequence,
    prompt_len: usize,
    clean_blocks: usize,
    masked_blocks: usize,
    rng: &mut R,
) -> Result<BlockAssignment> {
    let masked = xt.mask_count();
    if masked > 0 && masked_blocks == 0 {
        return Err(invalid("masked tokens need at least one masked block"));
    }
    if masked < xt.len() && clean_blocks == 0 {
        return Err(invalid("clean tokens need at least one clean block"));
    }
    let blocks = (0..xt.len())
        .map(|i| {
            if xt.is_masked(i) {
                rng.gen_range(clean_blocks + 1..=clean_blocks + masked_blocks)
            } else {
                rng.gen_range(1..=clean_blocks)
            }
        })
        .collect();
    BlockAssignment::new(prompt_len, blocks, clean_blocks, masked_blocks)
}

/// One merged training sequence.
#[derive(Clone, Debug)]
pub struct TrainingBatchItem {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub assignment: BlockAssignment,
    pub mask: AttentionMask,
    /// Rows of the masked tokens and their clean targets.
    pub target_rows: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub t: f64,
    pub weight: f64,
}

/// Lay out `prompt + xt` (plus register duplicates) in merged block order.
pub fn item_from_assignment(
    prompt: &[TokenId],
    x0: &MaskedSequence,
    xt: &MaskedSequence,
    assignment: BlockAssignment,
    t: f64,
) -> Result<TrainingBatchItem> {
    if assignment.prompt_len() != prompt.len() || assignment.response_len() != x0.len() || xt.len() != x0.len() {
        return Err(Error::DimensionMismatch("prompt/response lengths disagree with the assignment".into()));
    }
    for i in 0..xt.len() {
        if xt.is_masked(i) != assignment.is_masked_block(assignment.response_blocks()[i]) {
            return Err(invalid(format!("position {i}: mask state and block kind disagree")));
        }
    }
    let vocab = xt.vocab();
    let mut item = TrainingBatchItem {
        tokens: Vec::new(),
        positions: Vec::new(),
        mask: step_causal_mask(&assignment),
        assignment,
        target_rows: Vec::new(),
        targets: Vec::new(),
        t,
        weight: 1.0 / t,
    };
    for (row, slot) in item.assignment.merged_layout().iter().enumerate() {
        item.positions.push(slot.position);
        item.tokens.push(match slot.kind {
            TokenKind::Prompt => prompt[slot.index],
            TokenKind::Clean => xt.tokens()[slot.index],
            TokenKind::Masked => {
                item.target_rows.push(row);
                item.targets.push(x0.tokens()[slot.index]);
                vocab.mask_id
            }
            TokenKind::Register => vocab.reg_id,
        });
    }
    Ok(item)
}

/// Mask `x0` at time `t`, draw `M` and `N` from the configured ranges and
/// build the merged item. Without masked tokens there are no masked blocks.
pub fn build_training_item<R: Rng + ?Sized>(
    x0: &MaskedSequence,
    prompt: &[TokenId],
    t: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingBatchItem> {
    let xt = forward_mask(x0, t, rng)?;
    let m = rng.gen_range(cfg.clean_blocks.0..=cfg.clean_blocks.1);
    let n = if xt.mask_count() == 0 { 0 } else { rng.gen_range(cfg.masked_blocks.0..=cfg.masked_blocks.1) };
    let assignment = assign_blocks(&xt, prompt.len(), m, n, rng)?.with_registers(cfg.registers);
    item_from_assignment(prompt, x0, &xt, assignment, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { beta1: 0.99, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, n_layers: 2, d_ff: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelShape,
    /// Inclusive range for `M`.
    pub clean_blocks: (usize, usize),
    /// Inclusive range for `N`.
    pub masked_blocks: (usize, usize),
    /// Registers per masked block.
    pub registers: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// `t` is drawn uniformly from `(t_min, 1]`.
    pub t_min: f64,
    pub seed: u64,
    pub dataset: PatternGrammar,
    /// Fixed held-out items for the start/end loss.
    pub eval_items: usize,
    /// Sampled orders per prompt for the validity check.
    pub eval_orders: usize,
    /// Sampling steps `K` for the validity check.
    pub eval_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelShape::default(),
            clean_blocks: (1, 4),
            masked_blocks: (1, 4),
            registers: 4,
            batch_size: 8,
            steps: 2000,
            lr: 3e-4,
            optimizer: OptimizerConfig::default(),
            grad_clip: Some(1.0),
            t_min: 1e-3,
            seed: 0,
            dataset: PatternGrammar::default(),
            eval_items: 64,
            eval_orders: 4,
            eval_steps: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (m0, m1) = self.clean_blocks;
        let (n0, n1) = self.masked_blocks;
        if m0 == 0 || m0 > m1 || n0 == 0 || n0 > n1 {
            return Err(invalid("block ranges must be nonempty and start at 1 or above"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(invalid("t_min must lie in (0, 1)"));
        }
        if self.eval_steps == 0 || self.eval_steps > self.dataset.response_len() {
            return Err(invalid("eval_steps out of range"));
        }
        self.dataset.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = &self.dataset;
        ModelConfig::new(
            d.vocab(),
            self.model.d_model,
            self.model.n_heads,
            self.model.n_layers,
            self.model.d_ff,
            d.prompt_len() + d.response_len() + self.registers,
        )
        .with_seed(self.seed)
    }
}

/// Parameter update rule with its state.
pub enum Optimizer<F> {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, m: Params<F>, v: Params<F>, t: i32 },
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig, lr: f64, model: &ModelConfig) -> Self {
        match cfg {
            OptimizerConfig::Sgd => Optimizer::Sgd { lr },
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m: Params::zeros(model),
                v: Params::zeros(model),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>) {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = F::of(*lr);
                for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
                    p.iter_mut().zip(g).for_each(|(p, &g)| *p -= lr * g);
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, m, v, t } => {
                *t += 1;
                let (b1, b2) = (F::of(*beta1), F::of(*beta2));
                let c1 = F::of(1.0 - beta1.powi(*t));
                let c2 = F::of(1.0 - beta2.powi(*t));
                let (lr, eps) = (F::of(*lr), F::of(*eps));
                let one = F::one();
                let groups = params.slices_mut().into_iter().zip(grads.slices()).zip(m.slices_mut()).zip(v.slices_mut());
                for (((p, g), m), v) in groups {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn add_scaled<F: Scalar>(acc: &mut Params<F>, g: &Params<F>, scale: F) {
    for (a, g) in acc.slices_mut().into_iter().zip(g.slices()) {
        a.iter_mut().zip(g).for_each(|(a, &g)| *a += scale * g);
    }
}

fn scale_params<F: Scalar>(p: &mut Params<F>, scale: F) {
    for s in p.slices_mut() {
        s.iter_mut().for_each(|x| *x *= scale);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    /// Held-out loss before the first update.
    pub initial_loss: f64,
    /// Held-out loss after the last update; absent when no step ran.
    pub final_loss: Option<f64>,
    /// Fraction of sampled grids that exactly match their pattern.
    pub validity: Option<f64>,
    pub samples: usize,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss,lr")?;
        for s in &self.steps {
            writeln!(out, "{},{},{}", s.step, s.loss, s.lr)?;
        }
        Ok(())
    }
}

fn draw_t<R: Rng + ?Sized>(t_min: f64, rng: &mut R) -> f64 {
    // (t_min, 1]
    1.0 - rng.gen::<f64>() * (1.0 - t_min)
}

/// Fixed held-out items, independent of the training stream.
pub fn eval_items(cfg: &TrainConfig) -> Result<Vec<TrainingBatchItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    (0..cfg.eval_items)
        .map(|_| {
            let (prompt, x0) = cfg.dataset.sample(&mut rng);
            let t = draw_t(cfg.t_min, &mut rng);
            build_training_item(&x0, &prompt, t, cfg, &mut rng)
        })
        .collect()
}

/// Mean weighted loss over items; items without masked tokens count as 0.
pub fn mean_loss<F: Scalar>(model: &Model<F>, items: &[TrainingBatchItem]) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        total += model.loss(&it.tokens, &it.positions, &it.mask, &it.target_rows, &it.targets, it.t)?.value.as_f64();
    }
    Ok(total / items.len().max(1) as f64)
}

/// Fraction of greedy pre-generated samples that reproduce their pattern.
pub fn validity<F: Scalar>(model: &Model<F>, cfg: &TrainConfig) -> Result<(f64, usize)> {
    let d = &cfg.dataset;
    let side = GRID;
    let schedule = DiffusionSchedule::linear(cfg.eval_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ok = 0;
    let mut n = 0;
    for i in 0..d.instances {
        for r in 0..cfg.eval_orders {
            let order = pregen_order_2d(side, side, cfg.eval_steps, cfg.seed.wrapping_add((i * 1000 + r) as u64))?;
            let prompt = d.prompt(i);
            let out = sample_pregen(
                model,
                &prompt,
                d.response_len(),
                &order,
                &schedule,
                cfg.registers,
                &mut rng,
                DecodeRule::Greedy,
            )?;
            ok += d.is_valid(&prompt, out.response.tokens()) as usize;
            n += 1;
        }
    }
    Ok((ok as f64 / n.max(1) as f64, n))
}

/// Train a fresh f32 model on the pattern grammar.
pub fn train_toy(cfg: &TrainConfig) -> Result<(Model<f32>, TrainReport)> {
    train_toy_with(cfg, |_| {})
}

/// [`train_toy`] with a per-step callback (progress reporting).
pub fn train_toy_with(cfg: &TrainConfig, mut on_step: impl FnMut(&StepMetrics)) -> Result<(Model<f32>, TrainReport)> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let mut model = Model::<f32>::init(&model_cfg)?;
    let held_out = eval_items(cfg)?;
    let initial_loss = mean_loss(&model, &held_out)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = Vec::with_capacity(cfg.steps);
    let inv_batch = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut grads = Params::<f32>::zeros(&model_cfg);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (prompt, x0) = cfg.dataset.sample(&mut rng);
            let t = draw_t(cfg.t_min, &mut rng);
            let it = build_training_item(&x0, &prompt, t, cfg, &mut rng)?;
            let (l, g) = model.loss_and_grad(&it.tokens, &it.positions, &it.mask, &it.target_rows, &it.targets, t)?;
            loss += l.value.as_f64() * inv_batch;
            add_scaled(&mut grads, &g, inv_batch as f32);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.norm_sq().sqrt();
            if norm > clip {
                scale_params(&mut grads, (clip / norm) as f32);
            }
        }
        opt.step(model.params_mut(), &grads);
        let metrics = StepMetrics { step, loss, lr: cfg.lr };
        on_step(&metrics);
        steps.push(metrics);
    }
    let (final_loss, validity, samples) = if cfg.steps == 0 {
        (None, None, 0)
    } else {
        let (v, n) = validity(&model, cfg)?;
        (Some(mean_loss(&model, &held_out)?), Some(v), n)
    };
    Ok((model, TrainReport { steps, initial_loss, final_loss, validity, samples }))
}
