//! Sparse representation of partially masked sequences and the block
//! structure (`C_0 .. C_{M+N}`) shared by training and inference.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::{MaskedSequence, Vocabulary};
use crate::error::{invalid, Result};
use crate::masks::{build_inference_mask, AttentionMask, Label, Role};
use crate::TokenId;

/// Clean tokens with explicit positions, the total length and the register count.
///
/// Every index in `[0, len)` that is not listed in `clean` is masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseSequence {
    pub clean: Vec<(usize, TokenId)>,
    pub len: usize,
    pub regs: usize,
}

impl SparseSequence {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let mut prev = None;
        for &(pos, id) in &self.clean {
            if pos >= self.len {
                return Err(invalid(format!("position {pos} outside length {}", self.len)));
            }
            if prev.is_some_and(|p| p >= pos) {
                return Err(invalid("clean positions must be strictly increasing"));
            }
            if !vocab.is_ordinary(id) {
                return Err(invalid(format!("clean token {id} is not an ordinary id")));
            }
            prev = Some(pos);
        }
        Ok(())
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        let clean: HashSet<usize> = self.clean.iter().map(|&(p, _)| p).collect();
        (0..self.len).filter(|p| !clean.contains(p)).collect()
    }

    /// Tokens fed to the model when decoding `decode_count` of the masked
    /// positions: `|A| + |C| + m`.
    pub fn input_size(&self, decode_count: usize) -> usize {
        self.clean.len() + decode_count + self.regs
    }
}

pub fn to_sparse(xt: &MaskedSequence, regs: usize) -> SparseSequence {
    let clean = xt
        .tokens()
        .iter()
        .enumerate()
        .filter(|&(i, _)| !xt.is_masked(i))
        .map(|(i, &id)| (i, id))
        .collect();
    SparseSequence { clean, len: xt.len(), regs }
}

pub fn to_dense(sp: &SparseSequence, vocab: Vocabulary) -> Result<MaskedSequence> {
    sp.validate(&vocab)?;
    let mut tokens = vec![vocab.mask_id; sp.len];
    for &(pos, id) in &sp.clean {
        tokens[pos] = id;
    }
    MaskedSequence::new(vocab, tokens)
}

/// 0-based positions of the `m` register tokens: `S+L .. S+L+m-1`.
pub fn register_positions(prompt_len: usize, response_len: usize, regs: usize) -> Vec<usize> {
    let start = prompt_len + response_len;
    (start..start + regs).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Prompt,
    Clean,
    Masked,
    Register,
}

/// One token of a block-assigned layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSlot {
    pub kind: TokenKind,
    /// Prompt index, response index, or register slot `j` (`0..m`).
    pub index: usize,
    /// Absolute position id.
    pub position: usize,
    pub block: usize,
}

/// Block ids for a prompt + response layout.
///
/// The prompt is block 0, clean response tokens use blocks `1..=M` and masked
/// response tokens `M+1..=M+N`. Blocks may be empty and need not be
/// contiguous. When `m > 0`, each masked block carries its own `m` register
/// duplicates, all sharing positions `S+L .. S+L+m-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockAssignment {
    prompt_len: usize,
    response_blocks: Vec<usize>,
    clean_blocks: usize,
    masked_blocks: usize,
    registers: usize,
}

impl BlockAssignment {
    pub fn new(
        prompt_len: usize,
        response_blocks: Vec<usize>,
        clean_blocks: usize,
        masked_blocks: usize,
    ) -> Result<Self> {
        let last = clean_blocks + masked_blocks;
        if let Some(&b) = response_blocks.iter().find(|&&b| b == 0 || b > last) {
            return Err(invalid(format!("response block {b} outside [1, {last}]")));
        }
        Ok(Self { prompt_len, response_blocks, clean_blocks, masked_blocks, registers: 0 })
    }

    /// Attach `m` register duplicates to every masked block.
    pub fn with_registers(mut self, regs: usize) -> Self {
        self.registers = regs;
        self
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.response_blocks.len()
    }

    pub fn clean_blocks(&self) -> usize {
        self.clean_blocks
    }

    pub fn masked_blocks(&self) -> usize {
        self.masked_blocks
    }

    pub fn registers(&self) -> usize {
        self.registers
    }

    pub fn response_blocks(&self) -> &[usize] {
        &self.response_blocks
    }

    pub fn is_masked_block(&self, block: usize) -> bool {
        block > self.clean_blocks && block <= self.clean_blocks + self.masked_blocks
    }

    /// All tokens in natural order: prompt, response, then register duplicates
    /// grouped by masked block.
    pub fn slots(&self) -> Vec<TokenSlot> {
        let s = self.prompt_len;
        let l = self.response_blocks.len();
        let prompt = (0..s).map(|i| TokenSlot { kind: TokenKind::Prompt, index: i, position: i, block: 0 });
        let response = self.response_blocks.iter().enumerate().map(|(i, &block)| TokenSlot {
            kind: if block <= self.clean_blocks { TokenKind::Clean } else { TokenKind::Masked },
            index: i,
            position: s + i,
            block,
        });
        let m = self.registers;
        let registers = (self.clean_blocks + 1..=self.clean_blocks + self.masked_blocks).flat_map(move |block| {
            (0..m).map(move |j| TokenSlot { kind: TokenKind::Register, index: j, position: s + l + j, block })
        });
        prompt.chain(response).chain(registers).collect()
    }

    /// Block id of every token in natural order.
    pub fn block_of(&self) -> Vec<usize> {
        self.slots().iter().map(|s| s.block).collect()
    }

    /// Tokens sorted by block number, stable within a block.
    pub fn merged_layout(&self) -> Vec<TokenSlot> {
        let mut slots = self.slots();
        slots.sort_by_key(|s| s.block);
        slots
    }
}

/// Block assignment induced by a decoding order: the position decoded at step
/// `i` (1-based) gets block `i`. The first `clean_steps` steps are treated as
/// clean history (`M`), the rest as masked blocks (`N`).
pub fn partition_from_order(
    order: &[usize],
    step_sizes: &[usize],
    prompt_len: usize,
    clean_steps: usize,
) -> Result<BlockAssignment> {
    let len = order.len();
    let total: usize = step_sizes.iter().sum();
    if total != len {
        return Err(invalid(format!("step sizes sum to {total}, order has {len} positions")));
    }
    if clean_steps > step_sizes.len() {
        return Err(invalid("more clean steps than steps"));
    }
    let mut blocks = vec![0; len];
    let mut cursor = order.iter();
    for (step, &size) in step_sizes.iter().enumerate() {
        for &pos in cursor.by_ref().take(size) {
            if pos >= len || blocks[pos] != 0 {
                return Err(invalid("order is not a permutation of the response positions"));
            }
            blocks[pos] = step + 1;
        }
    }
    BlockAssignment::new(prompt_len, blocks, clean_steps, step_sizes.len() - clean_steps)
}

/// Positions of the four token roles at one sparse sampling step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepLayout {
    pub cached: Vec<usize>,
    pub new_cache: Vec<usize>,
    pub decode: Vec<usize>,
    pub registers: Vec<usize>,
}

impl StepLayout {
    pub fn new(cached: Vec<usize>, new_cache: Vec<usize>, decode: Vec<usize>, registers: Vec<usize>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &p in cached.iter().chain(&new_cache).chain(&decode) {
            if !seen.insert(p) {
                return Err(invalid(format!("position {p} appears in two roles")));
            }
        }
        if let (Some(&max_seq), Some(&min_reg)) = (seen.iter().max(), registers.iter().min()) {
            if min_reg <= max_seq {
                return Err(invalid("register positions must lie past every sequence position"));
            }
        }
        Ok(Self { cached, new_cache, decode, registers })
    }

    /// Tokens fed to the model this step (cached entries are not re-processed).
    pub fn input_size(&self) -> usize {
        self.new_cache.len() + self.decode.len() + self.registers.len()
    }

    /// Inference attention mask labelled with this layout's positions.
    pub fn mask(&self) -> Result<AttentionMask> {
        let mut mask = build_inference_mask(
            self.cached.len(),
            self.new_cache.len(),
            self.decode.len(),
            self.registers.len(),
        )?;
        let labels: Vec<Label> = [
            (Role::Cached, &self.cached),
            (Role::NewCache, &self.new_cache),
            (Role::Decode, &self.decode),
            (Role::Reg, &self.registers),
        ]
        .into_iter()
        .flat_map(|(role, positions)| {
            positions.iter().enumerate().map(move |(i, &p)| Label { role, index: i, position: p })
        })
        .collect();
        let rows = labels[self.cached.len()..].to_vec();
        mask.relabel(rows, labels)?;
        Ok(mask)
    }
}
