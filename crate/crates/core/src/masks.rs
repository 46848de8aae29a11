//! Attention masks for sparse inference and step-causal training.
//!
//! Both builders produce an explicit boolean matrix (`true` = the query may
//! attend the key) together with row and column labels, so that dumps of a
//! mask are self-describing.

use std::fmt;
use std::io::Write;

use crate::error::{invalid, Result};
use crate::sparse::{BlockAssignment, TokenKind, TokenSlot};

/// What a row or column of a mask stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Prompt,
    Clean(usize),
    Masked(usize),
    Register(usize),
    /// Already in the KV cache (inference).
    Cached,
    /// Decoded on the previous step; appended to the cache this step.
    NewCache,
    /// Masked token decoded this step.
    Decode,
    /// Register token at inference.
    Reg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label {
    pub role: Role,
    /// Prompt index, response index or register slot, depending on the role.
    pub index: usize,
    pub position: usize,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Prompt => write!(f, "P{}", self.index),
            Role::Clean(_) => write!(f, "X{}", self.index),
            Role::Masked(_) => write!(f, "M{}", self.index),
            Role::Register(b) if self.index == 0 => write!(f, "R{b}"),
            Role::Register(b) => write!(f, "R{b}.{}", self.index),
            Role::Cached => write!(f, "cache:{}", self.position),
            Role::NewCache => write!(f, "new:{}", self.position),
            Role::Decode => write!(f, "decode:{}", self.position),
            Role::Reg => write!(f, "reg:{}", self.position),
        }
    }
}

impl Label {
    fn from_slot(slot: &TokenSlot) -> Self {
        let role = match slot.kind {
            TokenKind::Prompt => Role::Prompt,
            TokenKind::Clean => Role::Clean(slot.block),
            TokenKind::Masked => Role::Masked(slot.block),
            TokenKind::Register => Role::Register(slot.block),
        };
        Label { role, index: slot.index, position: slot.position }
    }
}

/// Boolean query-by-key matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    row_labels: Vec<Label>,
    col_labels: Vec<Label>,
    allow: Vec<bool>,
}

/// First difference between two masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskDiff {
    Shape { left: (usize, usize), right: (usize, usize) },
    Cell { row: usize, col: usize, left: bool },
}

impl fmt::Display for MaskDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskDiff::Shape { left, right } => write!(f, "shape {left:?} vs {right:?}"),
            MaskDiff::Cell { row, col, left } => {
                write!(f, "cell ({row}, {col}) is {} vs {}", *left as u8, !*left as u8)
            }
        }
    }
}

impl AttentionMask {
    pub fn from_fn(row_labels: Vec<Label>, col_labels: Vec<Label>, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let cols = col_labels.len();
        let mut allow = Vec::with_capacity(row_labels.len() * cols);
        for q in 0..row_labels.len() {
            for k in 0..cols {
                allow.push(f(q, k));
            }
        }
        Self { row_labels, col_labels, allow }
    }

    /// Square all-`true` mask (vanilla full attention).
    pub fn full(labels: Vec<Label>) -> Self {
        Self::from_fn(labels.clone(), labels, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols() + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        let c = self.cols();
        &self.allow[q * c..(q + 1) * c]
    }

    /// Row-major cells.
    pub fn cells(&self) -> &[bool] {
        &self.allow
    }

    pub fn row_labels(&self) -> &[Label] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[Label] {
        &self.col_labels
    }

    /// Invert one cell. Used to inject faults into verification runs.
    pub fn flip(&mut self, q: usize, k: usize) {
        let c = self.cols();
        self.allow[q * c + k] ^= true;
    }

    pub fn relabel(&mut self, rows: Vec<Label>, cols: Vec<Label>) -> Result<()> {
        if rows.len() != self.rows() || cols.len() != self.cols() {
            return Err(invalid("label counts do not match mask shape"));
        }
        self.row_labels = rows;
        self.col_labels = cols;
        Ok(())
    }

    /// Compare cells only (labels are ignored).
    pub fn diff(&self, other: &AttentionMask) -> Option<MaskDiff> {
        let (l, r) = ((self.rows(), self.cols()), (other.rows(), other.cols()));
        if l != r {
            return Some(MaskDiff::Shape { left: l, right: r });
        }
        self.allow
            .iter()
            .zip(&other.allow)
            .position(|(a, b)| a != b)
            .map(|i| MaskDiff::Cell { row: i / l.1, col: i % l.1, left: self.allow[i] })
    }

    pub fn same_cells(&self, other: &AttentionMask) -> bool {
        self.diff(other).is_none()
    }

    /// Every query row allows at least one key.
    pub fn rows_nonempty(&self) -> bool {
        (0..self.rows()).all(|q| self.row(q).iter().any(|&a| a))
    }

    /// CSV of 0/1 cells; the header row holds the key labels and the first
    /// column the query labels.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "query")?;
        for l in &self.col_labels {
            write!(out, ",{l}")?;
        }
        writeln!(out)?;
        for (q, l) in self.row_labels.iter().enumerate() {
            write!(out, "{l}")?;
            for &a in self.row(q) {
                write!(out, ",{}", a as u8)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("labels are ASCII")
    }

    /// Plain (ASCII) portable graymap, `scale` pixels per cell; allowed cells are white.
    pub fn write_pgm<W: Write>(&self, mut out: W, scale: usize) -> std::io::Result<()> {
        let scale = scale.max(1);
        writeln!(out, "P2\n{} {}\n255", self.cols() * scale, self.rows() * scale)?;
        for q in 0..self.rows() {
            let line: Vec<&str> = self
                .row(q)
                .iter()
                .flat_map(|&a| std::iter::repeat_n(if a { "255" } else { "0" }, scale))
                .collect();
            let line = line.join(" ");
            for _ in 0..scale {
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Inference mask for one sparse step. Keys are ordered cache, new-cache,
/// decode, registers; queries are the live tokens (new-cache, decode, registers).
///
/// New-cache queries see only the cache and the new-cache tokens. Decode and
/// register queries see every key. Register keys are therefore visible only
/// to decode and register queries.
pub fn build_inference_mask(n_cache: usize, n_new: usize, n_decode: usize, regs: usize) -> Result<AttentionMask> {
    if n_new + n_decode == 0 {
        return Err(invalid("an inference step needs new-cache or decode tokens"));
    }
    let group = |role: Role, n: usize, offset: usize| {
        (0..n).map(move |i| Label { role, index: i, position: offset + i })
    };
    let cols: Vec<Label> = group(Role::Cached, n_cache, 0)
        .chain(group(Role::NewCache, n_new, n_cache))
        .chain(group(Role::Decode, n_decode, n_cache + n_new))
        .chain(group(Role::Reg, regs, n_cache + n_new + n_decode))
        .collect();
    let rows = cols[n_cache..].to_vec();
    let mask = AttentionMask::from_fn(rows.clone(), cols.clone(), |q, k| match rows[q].role {
        Role::NewCache => matches!(cols[k].role, Role::Cached | Role::NewCache),
        _ => true,
    });
    Ok(mask)
}

/// The step-causal rule for one (query block, key block) pair with `M` clean blocks.
#[inline]
pub fn step_causal_allows(query_block: usize, key_block: usize, clean_blocks: usize) -> bool {
    if query_block == 0 {
        key_block == 0
    } else if query_block <= clean_blocks {
        key_block <= query_block
    } else {
        key_block <= clean_blocks || key_block == query_block
    }
}

/// Step-causal mask over tokens in the given order.
pub fn step_causal_cells(block_of: &[usize], clean_blocks: usize, masked_blocks: usize) -> Result<Vec<bool>> {
    let last = clean_blocks + masked_blocks;
    if let Some(&b) = block_of.iter().find(|&&b| b > last) {
        return Err(invalid(format!("block id {b} outside [0, {last}]")));
    }
    let n = block_of.len();
    let mut cells = vec![false; n * n];
    for (qi, &qb) in block_of.iter().enumerate() {
        for (kj, &kb) in block_of.iter().enumerate() {
            cells[qi * n + kj] = step_causal_allows(qb, kb, clean_blocks);
        }
    }
    Ok(cells)
}

/// Training mask for a block assignment, laid out over its merged sequence
/// (tokens sorted by block number, register duplicates after the masked
/// tokens of their block).
pub fn step_causal_mask(assignment: &BlockAssignment) -> AttentionMask {
    let layout = assignment.merged_layout();
    let blocks: Vec<usize> = layout.iter().map(|s| s.block).collect();
    let cells = step_causal_cells(&blocks, assignment.clean_blocks(), assignment.masked_blocks())
        .expect("block assignments only hold in-range ids");
    let labels: Vec<Label> = layout.iter().map(Label::from_slot).collect();
    AttentionMask { row_labels: labels.clone(), col_labels: labels, allow: cells }
}

/// Restrict the step-causal mask to the path `0 -> 1 -> ... -> M -> b` and
/// relabel it as one inference step: blocks `< M` are cached, block `M` is the
/// new cache, block `b` holds the decode tokens and its register duplicates.
/// Rows are kept only for the live (non-cached) tokens, so the result has the
/// shape of [`build_inference_mask`].
pub fn extract_path_mask(assignment: &BlockAssignment, masked_block: usize) -> Result<AttentionMask> {
    if !assignment.is_masked_block(masked_block) {
        return Err(invalid(format!("block {masked_block} is not a masked block")));
    }
    let full = step_causal_mask(assignment);
    let layout = assignment.merged_layout();
    let m = assignment.clean_blocks();
    let rank = |slot: &TokenSlot| -> Option<(u8, Role)> {
        match (slot.block, slot.kind) {
            (b, _) if b < m => Some((0, Role::Cached)),
            (b, _) if b == m => Some((1, Role::NewCache)),
            (b, TokenKind::Register) if b == masked_block => Some((3, Role::Reg)),
            (b, _) if b == masked_block => Some((2, Role::Decode)),
            _ => None,
        }
    };
    let mut picked: Vec<(u8, usize, Role)> = layout
        .iter()
        .enumerate()
        .filter_map(|(i, s)| rank(s).map(|(r, role)| (r, i, role)))
        .collect();
    picked.sort_by_key(|&(r, i, _)| (r, i));
    let cols: Vec<Label> = picked
        .iter()
        .map(|&(_, i, role)| Label { role, index: layout[i].index, position: layout[i].position })
        .collect();
    let live: Vec<usize> = (0..picked.len()).filter(|&c| picked[c].0 > 0).collect();
    let rows: Vec<Label> = live.iter().map(|&c| cols[c]).collect();
    let mask = AttentionMask::from_fn(rows, cols, |q, k| full.get(picked[live[q]].1, picked[k].1));
    Ok(mask)
}

/// The two-path example: prompt P0..P2, response X0..X5, order
/// `{X1,X3}, {X0}, {X2,X5}, {X4}` with `M = 2`, `N = 2` and one register.
pub fn two_path_example() -> BlockAssignment {
    BlockAssignment::new(3, vec![2, 1, 3, 1, 4, 3], 2, 2)
        .expect("static example is valid")
        .with_registers(1)
}
