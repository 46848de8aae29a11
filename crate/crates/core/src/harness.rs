//! Verification suites and the token/latency ablation bench.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::diffusion::{DiffusionSchedule, MaskedSequence, Vocabulary};
use crate::error::{invalid, Result};
use crate::masks::{build_inference_mask, extract_path_mask, step_causal_mask, AttentionMask, Role};
use crate::samplers::{dense_step, run_pregen, sample_dense_reference, sample_pregen, DecodeOrder, DecodeRule, DenseVariant};
use crate::sparse::{to_dense, to_sparse, BlockAssignment};
use crate::trainer::ModelShape;
use crate::{Scalar, TokenId};

/// Environment variable holding the default worker count for `verify`.
pub const THREADS_ENV: &str = "SPARSE_MDM_THREADS";

/// Which of the three sparse-inference savings are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationToggle {
    pub cache_prompt: bool,
    pub cache_response: bool,
    pub truncate_response: bool,
}

impl AblationToggle {
    pub const DENSE: Self = Self { cache_prompt: false, cache_response: false, truncate_response: false };
    pub const SPARSE: Self = Self { cache_prompt: true, cache_response: true, truncate_response: true };

    /// All eight combinations, dense first, sparse last.
    pub fn grid() -> Vec<Self> {
        (0..8u8)
            .map(|bits| Self {
                cache_prompt: bits & 4 != 0,
                cache_response: bits & 2 != 0,
                truncate_response: bits & 1 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let f = |b: bool| if b { '1' } else { '0' };
        format!("cp{}-cr{}-tr{}", f(self.cache_prompt), f(self.cache_response), f(self.truncate_response))
    }
}

/// Closed-form token-forward count of one generation.
///
/// Per step the model sees the prompt unless it is cached, either the tokens
/// decoded on the previous step (response caching) or every decoded token,
/// and either the current decode set plus `m` registers (truncation) or every
/// still-masked token. With response caching a final call commits the last
/// decoded set. Registers only exist when truncation is on.
pub fn analytic_token_forwards(toggles: AblationToggle, prompt_len: usize, step_sizes: &[usize], regs: usize) -> u64 {
    let s = prompt_len as u64;
    let m = regs as u64;
    let len: u64 = step_sizes.iter().map(|&d| d as u64).sum();
    let mut total = if toggles.cache_prompt { s } else { 0 };
    let mut decoded = 0u64;
    let mut prev = 0u64;
    for &d in step_sizes {
        let d = d as u64;
        total += if toggles.cache_prompt { 0 } else { s };
        total += if toggles.cache_response { prev } else { decoded };
        total += if toggles.truncate_response { d + m } else { len - decoded };
        decoded += d;
        prev = d;
    }
    if toggles.cache_response {
        total += prev + if toggles.cache_prompt { 0 } else { s };
    }
    total
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Prompt,
    Clean,
    Live,
}

/// Run one generation under `toggles` with greedy decoding and return the
/// response and the number of token rows the model processed.
pub fn run_ablation<F: Scalar>(
    model: &Model<F>,
    prompt: &[TokenId],
    order: &DecodeOrder,
    regs: usize,
    toggles: AblationToggle,
) -> Result<(Vec<TokenId>, u64)> {
    let vocab = model.config().vocab;
    let s = prompt.len();
    let len = order.len();
    let regs = if toggles.truncate_response { regs } else { 0 };
    if s + len + regs > model.config().max_position {
        return Err(invalid("sequence does not fit max_position"));
    }
    let start = model.token_forwards();
    let mut cache = model.new_cache();
    let mut tokens = vec![vocab.mask_id; len];
    // kind of every cached entry, by insertion
    let mut cached_kinds: Vec<RowKind> = Vec::new();

    let call = |cache: &mut crate::backbone::KvCache<F>,
                    cached_kinds: &mut Vec<RowKind>,
                    rows: &[(TokenId, usize, RowKind)],
                    commit: usize,
                    logit_rows: &[usize]|
     -> Result<Array2<F>> {
        let c = cache.len();
        let n = rows.len();
        let mut allow = vec![false; n * (c + n)];
        for (q, row) in rows.iter().enumerate() {
            for k in 0..c + n {
                let key = if k < c { cached_kinds[k] } else { rows[k - c].2 };
                allow[q * (c + n) + k] = match row.2 {
                    RowKind::Prompt => key == RowKind::Prompt,
                    RowKind::Clean => key != RowKind::Live,
                    RowKind::Live => true,
                };
            }
        }
        let toks: Vec<TokenId> = rows.iter().map(|r| r.0).collect();
        let pos: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let out = model.forward_rows(cache, &toks, &pos, &allow, commit, logit_rows)?;
        cached_kinds.extend(rows[..commit].iter().map(|r| r.2));
        Ok(out)
    };

    let prompt_rows: Vec<(TokenId, usize, RowKind)> =
        prompt.iter().enumerate().map(|(i, &t)| (t, i, RowKind::Prompt)).collect();
    if toggles.cache_prompt && s > 0 {
        call(&mut cache, &mut cached_kinds, &prompt_rows, s, &[])?;
    }
    let mut decoded: Vec<usize> = Vec::new();
    let mut prev: Vec<usize> = Vec::new();
    for step in order.steps() {
        let mut rows: Vec<(TokenId, usize, RowKind)> = Vec::new();
        let clean: &[usize] = if toggles.cache_response { &prev } else { &decoded };
        rows.extend(clean.iter().map(|&p| (tokens[p], s + p, RowKind::Clean)));
        let commit = if toggles.cache_response { rows.len() } else { 0 };
        if !toggles.cache_prompt {
            rows.extend(prompt_rows.iter().copied());
        }
        let first_live = rows.len();
        let live: Vec<usize> = if toggles.truncate_response {
            step.clone()
        } else {
            (0..len).filter(|&p| tokens[p] == vocab.mask_id).collect()
        };
        rows.extend(live.iter().map(|&p| (vocab.mask_id, s + p, RowKind::Live)));
        rows.extend((0..regs).map(|j| (vocab.reg_id, s + len + j, RowKind::Live)));
        let index: HashMap<usize, usize> = live.iter().enumerate().map(|(i, &p)| (p, first_live + i)).collect();
        let logit_rows: Vec<usize> = step.iter().map(|p| index[p]).collect();
        let logits = call(&mut cache, &mut cached_kinds, &rows, commit, &logit_rows)?;
        for (&p, row) in step.iter().zip(logits.outer_iter()) {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            tokens[p] = best as TokenId;
        }
        decoded.extend(step.iter().copied());
        prev = step.clone();
    }
    if toggles.cache_response && !prev.is_empty() {
        let mut rows: Vec<(TokenId, usize, RowKind)> =
            prev.iter().map(|&p| (tokens[p], s + p, RowKind::Clean)).collect();
        let commit = rows.len();
        if !toggles.cache_prompt {
            rows.extend(prompt_rows.iter().copied());
        }
        call(&mut cache, &mut cached_kinds, &rows, commit, &[])?;
    }
    Ok((tokens, model.token_forwards() - start))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub response_len: usize,
    pub prompt_len: usize,
    pub steps: usize,
    pub registers: usize,
    pub model: ModelShape,
    pub vocab: u32,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            response_len: 1024,
            prompt_len: 128,
            steps: 64,
            registers: 64,
            model: ModelShape { d_model: 32, n_heads: 2, n_layers: 2, d_ff: 64 },
            vocab: 16,
            repeats: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig::new(
            Vocabulary::new(self.vocab)?,
            self.model.d_model,
            self.model.n_heads,
            self.model.n_layers,
            self.model.d_ff,
            self.prompt_len + self.response_len + self.registers,
        )
        .with_seed(self.seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub toggles: AblationToggle,
    pub token_forwards: u64,
    pub analytic_token_forwards: u64,
    /// Median over repeats.
    pub wall_ms: f64,
    /// Dense token-forwards divided by this row's.
    pub token_speedup: f64,
    /// Dense median wall time divided by this row's; absent without a dense row.
    pub speedup_vs_dense: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn counts_match(&self) -> bool {
        self.rows.iter().all(|r| r.token_forwards == r.analytic_token_forwards)
    }

    pub fn row(&self, toggles: AblationToggle) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.toggles == toggles)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "cache_prompt,cache_response,truncate_response,token_forwards,analytic_token_forwards,wall_ms,token_speedup,speedup_vs_dense"
        )?;
        for r in &self.rows {
            let t = r.toggles;
            writeln!(
                out,
                "{},{},{},{},{},{:.3},{:.4},{}",
                t.cache_prompt as u8,
                t.cache_response as u8,
                t.truncate_response as u8,
                r.token_forwards,
                r.analytic_token_forwards,
                r.wall_ms,
                r.token_speedup,
                r.speedup_vs_dense.map_or(String::new(), |x| format!("{x:.4}")),
            )?;
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Run every toggle combination `cfg.repeats` times (sequentially) and report
/// instrumented and analytic token counts and median wall time.
pub fn bench(cfg: &BenchConfig, toggles: &[AblationToggle]) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.steps == 0 || cfg.steps > cfg.response_len {
        return Err(invalid("bench needs repeats >= 1 and 1 <= K <= L"));
    }
    let model = Model::<f32>::init(&cfg.model_config()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompt: Vec<TokenId> = (0..cfg.prompt_len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let order = DecodeOrder::random(cfg.response_len, cfg.steps, &mut rng)?;
    let sizes = order.step_sizes();
    let dense_tokens = analytic_token_forwards(AblationToggle::DENSE, cfg.prompt_len, &sizes, cfg.registers);
    let mut rows = Vec::new();
    for &t in toggles {
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut count = 0;
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let (_, c) = run_ablation(&model, &prompt, &order, cfg.registers, t)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            count = c;
        }
        let analytic = analytic_token_forwards(t, cfg.prompt_len, &sizes, cfg.registers);
        rows.push(BenchRow {
            toggles: t,
            token_forwards: count,
            analytic_token_forwards: analytic,
            wall_ms: median(times),
            token_speedup: dense_tokens as f64 / count as f64,
            speedup_vs_dense: None,
        });
    }
    if let Some(dense) = rows.iter().find(|r| r.toggles == AblationToggle::DENSE).map(|r| r.wall_ms) {
        for r in rows.iter_mut() {
            r.speedup_vs_dense = Some(dense / r.wall_ms);
        }
    }
    Ok(BenchReport { config: cfg.clone(), rows })
}

/// Deliberate corruption used to check that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Flip one cell of every step-causal mask under test.
    FlipMaskCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub failures: Vec<String>,
    /// Worst logit deviation, for the numeric suites.
    pub max_abs_diff: Option<f64>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub suites: Vec<SuiteResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: usize,
    pub fault: Option<Fault>,
    pub threads: usize,
}

impl VerifyOptions {
    pub fn new(seed: u64, trials: usize) -> Self {
        Self { seed, trials, fault: None, threads: default_threads() }
    }
}

/// Worker count from [`THREADS_ENV`], defaulting to 1.
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// A random verification instance: small model, prompt, order and register count.
pub struct Instance {
    pub cfg: ModelConfig,
    pub prompt: Vec<TokenId>,
    pub len: usize,
    pub order: DecodeOrder,
    pub regs: usize,
}

/// L <= 64, S <= 16, m in {0, 1, 4, 8}, K <= 8.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<Instance> {
    let vocab = Vocabulary::new(rng.gen_range(4..=12))?;
    let len = rng.gen_range(1..=64);
    let s = rng.gen_range(0..=16);
    let regs = [0, 1, 4, 8][rng.gen_range(0..4)];
    let k = rng.gen_range(1..=len.min(8));
    let heads = rng.gen_range(1..=2);
    let cfg = ModelConfig::new(vocab, 8 * heads, heads, rng.gen_range(1..=2), 16, s + len + regs).with_seed(rng.gen());
    let prompt = (0..s).map(|_| rng.gen_range(0..vocab.size)).collect();
    let order = DecodeOrder::random(len, k, rng)?;
    Ok(Instance { cfg, prompt, len, order, regs })
}

/// Sparse cached decode logits and the materialized step-causal logits for the
/// same inputs, step by step. Returns the worst absolute difference.
pub fn cache_equivalence_gap<F: Scalar>(model: &Model<F>, inst: &Instance) -> Result<f64> {
    let s = inst.prompt.len();
    let mut sparse: Vec<(Vec<usize>, Array2<F>)> = Vec::new();
    let out = run_pregen(model, &inst.prompt, inst.len, &inst.order, inst.regs, |_, positions, logits| {
        sparse.push((positions.to_vec(), logits.clone()));
        Ok(logits.outer_iter().map(|r| argmax(r.iter().copied())).collect())
    })?;
    let vocab = model.config().vocab;
    let final_tokens = out.response.tokens();
    let mut tokens = vec![vocab.mask_id; inst.len];
    let mut worst: f64 = 0.0;
    for (k, (positions, logits)) in sparse.iter().enumerate() {
        let step = dense_step(model, &inst.prompt, &tokens, &inst.order, k + 1, inst.regs, DenseVariant::StepCausal)?;
        let dense = model.forward_full(&step.tokens, &step.positions, &step.mask)?;
        let row_of: HashMap<usize, usize> = step.decode_rows.iter().map(|&(row, p)| (s + p, row)).collect();
        for (i, p) in positions.iter().enumerate() {
            let row = row_of[p];
            for (a, b) in logits.row(i).iter().zip(dense.row(row).iter()) {
                worst = worst.max((a.as_f64() - b.as_f64()).abs());
            }
        }
        for &p in &inst.order.steps()[k] {
            tokens[p] = final_tokens[p];
        }
    }
    Ok(worst)
}

fn argmax<F: Scalar>(row: impl Iterator<Item = F>) -> TokenId {
    let mut best = (0, F::neg_infinity());
    for (i, x) in row.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0 as TokenId
}

/// Three-rule predicate, written out independently of the mask builder.
fn step_causal_oracle(a: &BlockAssignment) -> Vec<bool> {
    let blocks: Vec<usize> = a.merged_layout().iter().map(|s| s.block).collect();
    let m = a.clean_blocks();
    let mut out = Vec::with_capacity(blocks.len() * blocks.len());
    for &qb in &blocks {
        for &kb in &blocks {
            let prompt_rule = qb == 0 && kb == 0;
            let clean_rule = qb >= 1 && qb <= m && kb <= qb;
            let masked_rule = qb > m && (kb <= m || kb == qb);
            out.push(prompt_rule || clean_rule || masked_rule);
        }
    }
    out
}

/// Four role rules of one inference step.
fn inference_oracle(mask: &AttentionMask) -> Vec<bool> {
    let mut out = Vec::new();
    for q in mask.row_labels() {
        for k in mask.col_labels() {
            let allowed = match q.role {
                Role::NewCache => !matches!(k.role, Role::Decode | Role::Reg),
                Role::Decode | Role::Reg => true,
                _ => false,
            };
            out.push(allowed);
        }
    }
    out
}

fn random_assignment<R: Rng + ?Sized>(rng: &mut R) -> Result<BlockAssignment> {
    let m = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=6);
    let s = rng.gen_range(0..=8);
    let regs = rng.gen_range(0..=3);
    let len = rng.gen_range(1..=40);
    let blocks = (0..len).map(|_| rng.gen_range(1..=m + n)).collect();
    Ok(BlockAssignment::new(s, blocks, m, n)?.with_registers(regs))
}

fn first_mismatch(mask: &AttentionMask, expected: &[bool]) -> Option<String> {
    let cols = mask.cols();
    mask.cells().iter().zip(expected).position(|(a, b)| a != b).map(|i| {
        let (q, k) = (i / cols, i % cols);
        format!(
            "cell ({q}, {k}) [{} -> {}]: got {}, expected {}",
            mask.row_labels()[q],
            mask.col_labels()[k],
            mask.cells()[i] as u8,
            expected[i] as u8
        )
    })
}

type Suite = fn(u64, Option<Fault>, &mut ChaCha8Rng) -> Result<(Option<String>, f64)>;

fn suite_cache_equivalence(_: u64, _: Option<Fault>, rng: &mut ChaCha8Rng) -> Result<(Option<String>, f64)> {
    let inst = random_instance(rng)?;
    let m32 = Model::<f32>::init(&inst.cfg)?;
    let m64 = Model::<f64>::init(&inst.cfg)?;
    let g32 = cache_equivalence_gap(&m32, &inst)?;
    let g64 = cache_equivalence_gap(&m64, &inst)?;
    let fail = (g32 > 1e-4 || g64 > 1e-10).then(|| format!("max |diff| f32 {g32:.3e}, f64 {g64:.3e}"));
    Ok((fail, g32))
}

fn suite_mask_oracle(_: u64, fault: Option<Fault>, rng: &mut ChaCha8Rng) -> Result<(Option<String>, f64)> {
    let a = random_assignment(rng)?;
    let mut mask = step_causal_mask(&a);
    if fault == Some(Fault::FlipMaskCell) {
        let (q, k) = (rng.gen_range(0..mask.rows()), rng.gen_range(0..mask.cols()));
        mask.flip(q, k);
    }
    if let Some(msg) = first_mismatch(&mask, &step_causal_oracle(&a)) {
        return Ok((Some(format!("step-causal {msg}")), 0.0));
    }
    let (c, n, d, m) = (rng.gen_range(0..6), rng.gen_range(0..4), rng.gen_range(1..5), rng.gen_range(0..4));
    let inf = build_inference_mask(c, n, d, m)?;
    Ok((first_mismatch(&inf, &inference_oracle(&inf)).map(|e| format!("inference {e}")), 0.0))
}

fn suite_path_extraction(_: u64, _: Option<Fault>, rng: &mut ChaCha8Rng) -> Result<(Option<String>, f64)> {
    let a = random_assignment(rng)?;
    let m = a.clean_blocks();
    let count = |pred: &dyn Fn(usize) -> bool| a.response_blocks().iter().filter(|&&b| pred(b)).count();
    for b in m + 1..=m + a.masked_blocks() {
        let path = extract_path_mask(&a, b)?;
        let cached = a.prompt_len() + count(&|x| x < m);
        let expected = build_inference_mask(cached, count(&|x| x == m), count(&|x| x == b), a.registers());
        let ok = match expected {
            Ok(e) => e.same_cells(&path),
            // no live sequence token on this path: nothing to compare
            Err(_) => path.rows() == a.registers(),
        };
        if !ok {
            return Ok((Some(format!("path to block {b} differs from the inference mask")), 0.0));
        }
    }
    Ok((None, 0.0))
}

fn suite_roundtrip(_: u64, _: Option<Fault>, rng: &mut ChaCha8Rng) -> Result<(Option<String>, f64)> {
    let vocab = Vocabulary::new(rng.gen_range(1..20))?;
    let len = rng.gen_range(0..50);
    let p = rng.gen::<f64>();
    let tokens = (0..len)
        .map(|_| if rng.gen::<f64>() < p { vocab.mask_id } else { rng.gen_range(0..vocab.size) })
        .collect();
    let x = MaskedSequence::new(vocab, tokens)?;
    let back = to_dense(&to_sparse(&x, rng.gen_range(0..4)), vocab)?;
    Ok(((back != x).then(|| format!("roundtrip changed {:?}", x.tokens())), 0.0))
}

fn suite_conservation(_: u64, _: Option<Fault>, rng: &mut ChaCha8Rng) -> Result<(Option<String>, f64)> {
    let inst = random_instance(rng)?;
    let model = Model::<f32>::init(&inst.cfg)?;
    let sched = DiffusionSchedule::linear(inst.order.num_steps())?;
    let seed = rng.gen();
    let sparse = sample_pregen(
        &model,
        &inst.prompt,
        inst.len,
        &inst.order,
        &sched,
        inst.regs,
        &mut ChaCha8Rng::seed_from_u64(seed),
        DecodeRule::Greedy,
    )?;
    let s = inst.prompt.len();
    let mut fixed: HashMap<usize, TokenId> = HashMap::new();
    for step in &sparse.trace {
        for &(p, t) in &step.decoded {
            fixed.insert(p, t);
        }
    }
    if let Some((&p, _)) = fixed.iter().find(|(&p, &t)| sparse.response.tokens()[p - s] != t) {
        return Ok((Some(format!("position {p} changed after it was decoded")), 0.0));
    }
    if !sparse.response.is_clean() {
        return Ok((Some("output still holds mask tokens".into()), 0.0));
    }
    let dense = sample_dense_reference(
        &model,
        &inst.prompt,
        inst.len,
        &inst.order,
        &sched,
        inst.regs,
        &mut ChaCha8Rng::seed_from_u64(seed),
        DecodeRule::Greedy,
        DenseVariant::StepCausal,
    )?;
    Ok(((dense.response != sparse.response).then(|| "sparse and dense samples differ".to_string()), 0.0))
}

const SUITES: [(&str, Suite); 5] = [
    ("cache-equivalence", suite_cache_equivalence),
    ("mask-oracle", suite_mask_oracle),
    ("path-extraction", suite_path_extraction),
    ("roundtrip", suite_roundtrip),
    ("conservation", suite_conservation),
];

fn run_suite(name: &str, suite: Suite, opts: &VerifyOptions) -> SuiteResult {
    let threads = opts.threads.max(1).min(opts.trials.max(1));
    let chunks: Vec<Vec<usize>> = (0..threads).map(|w| (w..opts.trials).step_by(threads).collect()).collect();
    let results: Vec<Vec<(usize, std::result::Result<(Option<String>, f64), String>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|trials| {
                scope.spawn(move || {
                    trials
                        .iter()
                        .map(|&i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
                            (i, suite(opts.seed, opts.fault, &mut rng).map_err(|e| e.to_string()))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("suite worker panicked")).collect()
    });
    let mut all: Vec<_> = results.into_iter().flatten().collect();
    all.sort_by_key(|r| r.0);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, r) in all {
        match r {
            Ok((None, gap)) => worst = worst.max(gap),
            Ok((Some(msg), gap)) => {
                worst = worst.max(gap);
                failures.push(format!("trial {i}: {msg}"));
            }
            Err(e) => failures.push(format!("trial {i}: error: {e}")),
        }
    }
    SuiteResult {
        name: name.to_string(),
        trials: opts.trials,
        failures,
        max_abs_diff: (name == "cache-equivalence").then_some(worst),
    }
}

/// Run every verification suite for `opts.trials` random trials each.
pub fn verify(opts: &VerifyOptions) -> VerifyReport {
    let mut warnings = Vec::new();
    if opts.trials == 0 {
        warnings.push("trials = 0: every suite passes vacuously".to_string());
    }
    let suites = SUITES.iter().map(|&(name, suite)| run_suite(name, suite, opts)).collect();
    VerifyReport { seed: opts.seed, trials: opts.trials, suites, warnings }
}
