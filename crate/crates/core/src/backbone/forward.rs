use std::collections::HashSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::{KvCache, Model};
use crate::error::{invalid, Error, Result};
use crate::masks::{build_inference_mask, AttentionMask};
use crate::{Scalar, TokenId};

pub(super) const RMS_EPS: f64 = 1e-5;

/// Activations of one layer, kept for the backward pass.
pub(super) struct LayerTape<F> {
    pub x: Array2<F>,
    pub a: Array2<F>,
    pub r1: Array1<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub probs: Vec<Array2<F>>,
    pub o: Array2<F>,
    pub h: Array2<F>,
    pub b: Array2<F>,
    pub r2: Array1<F>,
    pub u: Array2<F>,
    pub z: Array2<F>,
}

pub(super) struct Tape<F> {
    pub layers: Vec<LayerTape<F>>,
    pub h_final: Array2<F>,
    pub rf: Array1<F>,
}

pub(super) struct Run<F> {
    /// Final normalized hidden states, `n x d_model`.
    pub f: Array2<F>,
    /// Post-rotary keys and values of the input rows, per layer.
    pub kv: Vec<(Array2<F>, Array2<F>)>,
    pub tape: Option<Tape<F>>,
}

pub(super) fn rms_norm<F: Scalar>(x: &Array2<F>, g: &Array1<F>) -> (Array2<F>, Array1<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(RMS_EPS);
    let r: Array1<F> = x.outer_iter().map(|row| (row.dot(&row) / d + eps).sqrt().recip()).collect();
    let mut y = x.clone();
    for (mut row, &ri) in y.outer_iter_mut().zip(r.iter()) {
        row.zip_mut_with(g, |v, &gi| *v = *v * ri * gi);
    }
    (y, r)
}

pub(super) fn silu<F: Scalar>(u: F) -> F {
    u / (F::one() + (-u).exp())
}

/// Row-wise softmax restricted to allowed cells; rows with no allowed key become zero.
fn masked_softmax<F: Scalar>(scores: &mut Array2<F>, allow: &[bool]) {
    let cols = scores.ncols();
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let ok = &allow[i * cols..(i + 1) * cols];
        let mut max = F::neg_infinity();
        for (x, &a) in row.iter().zip(ok) {
            if a && *x > max {
                max = *x;
            }
        }
        if max == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        let mut sum = F::zero();
        for (x, &a) in row.iter_mut().zip(ok) {
            *x = if a { (*x - max).exp() } else { F::zero() };
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

impl<F: Scalar> Model<F> {
    pub fn new_cache(&self) -> KvCache<F> {
        KvCache::new(self.cfg.n_layers, self.cfg.d_model)
    }

    /// Logits over the ordinary vocabulary for every row, with attention
    /// restricted by a square `mask`.
    pub fn forward_full(&self, tokens: &[TokenId], positions: &[usize], mask: &AttentionMask) -> Result<Array2<F>> {
        let n = tokens.len();
        if mask.rows() != n || mask.cols() != n {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} mask for {n} tokens",
                mask.rows(),
                mask.cols()
            )));
        }
        self.check_rows(None, tokens, positions, mask.cells(), 0)?;
        let run = self.run(None, tokens, positions, mask.cells(), false);
        Ok(self.head(run.f.view()))
    }

    /// One sparse sampling step.
    ///
    /// `new_cache` rows see the cache and each other; `decode` and `regs` rows
    /// see everything. The keys and values of `new_cache` are appended to
    /// `cache`; logits are returned for the `decode` rows only.
    ///
    /// With empty `decode` and `regs` this is a prefill (or final commit) call.
    pub fn forward_step(
        &self,
        cache: &mut KvCache<F>,
        new_cache: &[(TokenId, usize)],
        decode: &[(TokenId, usize)],
        regs: &[(TokenId, usize)],
    ) -> Result<Array2<F>> {
        let vocab = self.cfg.vocab;
        if decode.is_empty() && !regs.is_empty() {
            return Err(invalid("registers without decode tokens"));
        }
        if new_cache.is_empty() && decode.is_empty() {
            return Err(invalid("a step needs decode tokens (or new-cache tokens for a prefill)"));
        }
        if let Some(&(id, p)) = new_cache.iter().find(|(id, _)| !vocab.is_ordinary(*id)) {
            return Err(invalid(format!("new-cache token {id} at position {p} is not an ordinary token")));
        }
        if let Some(&(id, p)) = decode.iter().find(|(id, _)| *id != vocab.mask_id) {
            return Err(invalid(format!("decode token {id} at position {p} is not the mask token")));
        }
        if let Some(&(id, p)) = regs.iter().find(|(id, _)| *id != vocab.reg_id) {
            return Err(invalid(format!("register token {id} at position {p} is not the register token")));
        }
        let mut seen = HashSet::new();
        for &(_, p) in new_cache.iter().chain(decode).chain(regs) {
            if cache.contains(p) {
                return Err(Error::PositionCollision(p));
            }
            if !seen.insert(p) {
                return Err(invalid(format!("position {p} fed twice in one step")));
            }
        }
        let mask = build_inference_mask(cache.len(), new_cache.len(), decode.len(), regs.len())?;
        let rows: Vec<(TokenId, usize)> = new_cache.iter().chain(decode).chain(regs).copied().collect();
        let tokens: Vec<TokenId> = rows.iter().map(|r| r.0).collect();
        let positions: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let out: Vec<usize> = (new_cache.len()..new_cache.len() + decode.len()).collect();
        self.forward_rows(cache, &tokens, &positions, mask.cells(), new_cache.len(), &out)
    }

    /// General cached forward: `allow` is `n x (cache.len() + n)` row-major,
    /// with cached keys first. The first `commit` rows are appended to the
    /// cache afterwards. Returns logits for `logit_rows`.
    pub fn forward_rows(
        &self,
        cache: &mut KvCache<F>,
        tokens: &[TokenId],
        positions: &[usize],
        allow: &[bool],
        commit: usize,
        logit_rows: &[usize],
    ) -> Result<Array2<F>> {
        self.check_rows(Some(cache), tokens, positions, allow, commit)?;
        if let Some(&r) = logit_rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(invalid(format!("logit row {r} out of range")));
        }
        let run = self.run(Some(cache), tokens, positions, allow, false);
        if commit > 0 {
            cache.reserve_positions(&positions[..commit]);
            for (layer, (k, v)) in run.kv.iter().enumerate() {
                cache.append_layer(layer, k.slice(s![..commit, ..]), v.slice(s![..commit, ..]));
            }
        }
        Ok(self.head(run.f.select(Axis(0), logit_rows).view()))
    }

    fn check_rows(
        &self,
        cache: Option<&KvCache<F>>,
        tokens: &[TokenId],
        positions: &[usize],
        allow: &[bool],
        commit: usize,
    ) -> Result<()> {
        let n = tokens.len();
        if positions.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} tokens, {} positions", positions.len())));
        }
        let c = cache.map_or(0, |c| c.len());
        if allow.len() != n * (c + n) {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} cells, expected {n}x{}",
                allow.len(),
                c + n
            )));
        }
        if commit > n {
            return Err(invalid("cannot commit more rows than were fed"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab.total()) {
            return Err(invalid(format!("token id {t} outside the vocabulary")));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_position) {
            return Err(invalid(format!("position {p} beyond max_position {}", self.cfg.max_position)));
        }
        if let Some(cache) = cache {
            let mut seen = HashSet::new();
            for &p in &positions[..commit] {
                if cache.contains(p) || !seen.insert(p) {
                    return Err(Error::PositionCollision(p));
                }
            }
        }
        Ok(())
    }

    /// Tied output head over the ordinary vocabulary.
    pub(super) fn head(&self, f: ArrayView2<F>) -> Array2<F> {
        let e = self.params.tok_emb.slice(s![..self.cfg.vocab.size as usize, ..]);
        f.dot(&e.t())
    }

    pub(super) fn run(
        &self,
        cache: Option<&KvCache<F>>,
        tokens: &[TokenId],
        positions: &[usize],
        allow: &[bool],
        record: bool,
    ) -> Run<F> {
        self.count_tokens(tokens.len());
        let p = &self.params;
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut x = Array2::zeros((tokens.len(), self.cfg.d_model));
        for (mut row, (&t, &pos)) in x.outer_iter_mut().zip(tokens.iter().zip(positions)) {
            row.assign(&p.tok_emb.row(t as usize));
            row += &p.pos_emb.row(pos);
        }

        let mut kv = Vec::with_capacity(p.layers.len());
        let mut tapes = Vec::new();
        for (li, layer) in p.layers.iter().enumerate() {
            let (a, r1) = rms_norm(&x, &layer.attn_norm);
            let mut q = a.dot(&layer.wq);
            let mut k = a.dot(&layer.wk);
            let v = a.dot(&layer.wv);
            self.rope.apply(q.view_mut(), positions, false);
            self.rope.apply(k.view_mut(), positions, false);

            let (k_all, v_all) = match cache {
                Some(c) if !c.is_empty() => (
                    concatenate![Axis(0), c.keys(li), k.view()],
                    concatenate![Axis(0), c.values(li), v.view()],
                ),
                _ => (k.clone(), v.clone()),
            };
            let mut o = Array2::zeros(x.raw_dim());
            let mut probs = Vec::new();
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k_all.slice(cols).t()) * scale;
                masked_softmax(&mut scores, allow);
                o.slice_mut(cols).assign(&scores.dot(&v_all.slice(cols)));
                if record {
                    probs.push(scores);
                }
            }
            let hmid = &x + &o.dot(&layer.wo);
            let (b, r2) = rms_norm(&hmid, &layer.mlp_norm);
            let u = b.dot(&layer.w_in);
            let z = u.mapv(silu);
            let out = &hmid + &z.dot(&layer.w_out);
            if record {
                tapes.push(LayerTape { x, a, r1, q, k: k.clone(), v: v.clone(), probs, o, h: hmid, b, r2, u, z });
            }
            kv.push((k, v));
            x = out;
        }
        let (f, rf) = rms_norm(&x, &p.final_norm);
        let tape = record.then(|| Tape { layers: tapes, h_final: x, rf });
        Run { f, kv, tape }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::diffusion::Vocabulary;
    use crate::masks::Label;
    use crate::masks::Role;

    fn model() -> Model<f64> {
        let cfg = ModelConfig::new(Vocabulary::new(5).unwrap(), 8, 2, 2, 16, 32).with_seed(3);
        Model::init(&cfg).unwrap()
    }

    fn labels(n: usize) -> Vec<Label> {
        (0..n).map(|i| Label { role: Role::Prompt, index: i, position: i }).collect()
    }

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn full_mask_matches_unmasked_rows() {
        let m = model();
        let tokens = [0, 3, 1, 4];
        let positions = [0, 1, 2, 3];
        let a = m.forward_full(&tokens, &positions, &AttentionMask::full(labels(4))).unwrap();
        let mut cache = m.new_cache();
        let b = m.forward_rows(&mut cache, &tokens, &positions, &[true; 16], 0, &[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (4, 5));
        assert!(cache.is_empty());
    }

    #[test]
    fn permutation_equivariance() {
        let m = model();
        let full = AttentionMask::full(labels(4));
        let a = m.forward_full(&[0, 3, 1, 4], &[5, 9, 2, 7], &full).unwrap();
        let b = m.forward_full(&[1, 3, 0, 4], &[2, 9, 5, 7], &full).unwrap();
        let perm = a.select(Axis(0), &[2, 1, 0, 3]);
        assert!(max_abs(&perm, &b) < 1e-12);
    }

    #[test]
    fn self_only_row_ignores_other_keys() {
        let m = model();
        let mask = AttentionMask::from_fn(labels(3), labels(3), |q, k| q != 0 || k == 0);
        let a = m.forward_full(&[2, 3, 1], &[0, 1, 2], &mask).unwrap();
        let b = m.forward_full(&[2, 0, 4], &[0, 1, 2], &mask).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn step_validation() {
        let m = model();
        let v = m.config().vocab;
        let mut cache = m.new_cache();
        m.forward_step(&mut cache, &[(0, 0), (1, 1)], &[], &[]).unwrap();
        assert_eq!(cache.positions(), &[0, 1]);
        assert!(matches!(
            m.forward_step(&mut cache, &[(2, 1)], &[(v.mask_id, 2)], &[]),
            Err(Error::PositionCollision(1))
        ));
        assert!(m.forward_step(&mut cache, &[], &[], &[(v.reg_id, 9)]).is_err());
        assert!(m.forward_step(&mut cache, &[], &[(3, 2)], &[]).is_err());
        assert!(m.forward_step(&mut cache, &[], &[(v.mask_id, 2)], &[(v.mask_id, 9)]).is_err());
        let logits = m.forward_step(&mut cache, &[], &[(v.mask_id, 2), (v.mask_id, 3)], &[(v.reg_id, 9)]).unwrap();
        assert_eq!(logits.dim(), (2, 5));
        assert_eq!(cache.positions(), &[0, 1], "decode and register rows are never cached");
        assert!(m.forward_rows(&mut cache, &[0], &[40], &[true; 3], 0, &[]).is_err());
    }
}
