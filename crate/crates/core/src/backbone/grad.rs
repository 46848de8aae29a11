use ndarray::{s, Array1, Array2, Axis, Zip};

use super::forward::Tape;
use super::{Model, Params};
use crate::diffusion::{mdm_loss, mdm_loss_grad, MdmLoss};
use crate::error::{invalid, Error, Result};
use crate::masks::AttentionMask;
use crate::{Scalar, TokenId};

fn rms_back<F: Scalar>(x: &Array2<F>, g: &Array1<F>, r: &Array1<F>, dy: &Array2<F>, dg: &mut Array1<F>) -> Array2<F> {
    let d = F::of(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for (((xr, dyr), mut dxr), &ri) in x.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut()).zip(r.iter()) {
        let mut dot = F::zero();
        for j in 0..xr.len() {
            let gy = dyr[j] * g[j];
            dg[j] += dyr[j] * xr[j] * ri;
            dot += gy * xr[j];
        }
        let c = ri * ri * ri / d * dot;
        for j in 0..xr.len() {
            dxr[j] = ri * dyr[j] * g[j] - xr[j] * c;
        }
    }
    dx
}

fn silu_grad<F: Scalar>(u: F) -> F {
    let sig = F::one() / (F::one() + (-u).exp());
    sig * (F::one() + u * (F::one() - sig))
}

impl<F: Scalar> Model<F> {
    fn check_targets(&self, n: usize, mask: &AttentionMask, rows: &[usize], targets: &[TokenId]) -> Result<()> {
        if mask.rows() != n || mask.cols() != n {
            return Err(Error::DimensionMismatch(format!("{}x{} mask for {n} tokens", mask.rows(), mask.cols())));
        }
        if rows.len() != targets.len() {
            return Err(Error::DimensionMismatch(format!("{} rows, {} targets", rows.len(), targets.len())));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(invalid(format!("target row {r} out of range")));
        }
        Ok(())
    }

    /// Masked-diffusion loss at `rows` of a full materialized forward.
    pub fn loss(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttentionMask,
        rows: &[usize],
        targets: &[TokenId],
        t: f64,
    ) -> Result<MdmLoss<F>> {
        self.check_targets(tokens.len(), mask, rows, targets)?;
        let logits = self.forward_full(tokens, positions, mask)?;
        mdm_loss(logits.select(Axis(0), rows).view(), targets, t)
    }

    /// [`Model::loss`] and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttentionMask,
        rows: &[usize],
        targets: &[TokenId],
        t: f64,
    ) -> Result<(MdmLoss<F>, Params<F>)> {
        self.check_targets(tokens.len(), mask, rows, targets)?;
        let run = self.run(None, tokens, positions, mask.cells(), true);
        let f_sel = run.f.select(Axis(0), rows);
        let logits = self.head(f_sel.view());
        let (loss, dlogits) = mdm_loss_grad(logits.view(), targets, t)?;
        let mut grads = Params::zeros(&self.cfg);
        if loss.is_empty() {
            return Ok((loss, grads));
        }
        let tape = run.tape.expect("recorded");
        let v = self.cfg.vocab.size as usize;
        let e = self.params.tok_emb.slice(s![..v, ..]);

        let mut df = Array2::zeros(run.f.raw_dim());
        let dsel = dlogits.dot(&e);
        for (i, &r) in rows.iter().enumerate() {
            let mut row = df.row_mut(r);
            row += &dsel.row(i);
        }
        let de = dlogits.t().dot(&f_sel);
        {
            let mut head = grads.tok_emb.slice_mut(s![..v, ..]);
            head += &de;
        }
        let dh = rms_back(&tape.h_final, &self.params.final_norm, &tape.rf, &df, &mut grads.final_norm);
        let dx = self.backward_layers(&tape, dh, positions, &mut grads);

        for (i, (&tok, &pos)) in tokens.iter().zip(positions).enumerate() {
            let mut row = grads.tok_emb.row_mut(tok as usize);
            row += &dx.row(i);
            let mut row = grads.pos_emb.row_mut(pos);
            row += &dx.row(i);
        }
        Ok((loss, grads))
    }

    fn backward_layers(&self, tape: &Tape<F>, mut dh: Array2<F>, positions: &[usize], grads: &mut Params<F>) -> Array2<F> {
        let dh_size = self.cfg.d_head();
        let scale = F::of(1.0 / (dh_size as f64).sqrt());
        for ((lt, layer), g) in tape.layers.iter().zip(&self.params.layers).zip(grads.layers.iter_mut()).rev() {
            // MLP
            g.w_out += &lt.z.t().dot(&dh);
            let mut du = dh.dot(&layer.w_out.t());
            Zip::from(&mut du).and(&lt.u).for_each(|d, &u| *d *= silu_grad(u));
            g.w_in += &lt.b.t().dot(&du);
            let db = du.dot(&layer.w_in.t());
            let dhmid = dh + rms_back(&lt.h, &layer.mlp_norm, &lt.r2, &db, &mut g.mlp_norm);

            // attention
            g.wo += &lt.o.t().dot(&dhmid);
            let d_o = dhmid.dot(&layer.wo.t());
            let mut dq = Array2::zeros(lt.q.raw_dim());
            let mut dk = Array2::zeros(lt.k.raw_dim());
            let mut dv = Array2::zeros(lt.v.raw_dim());
            for (h, p) in lt.probs.iter().enumerate() {
                let cols = s![.., h * dh_size..(h + 1) * dh_size];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&lt.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let mut ds = p * &dp;
                let sums = ds.sum_axis(Axis(1));
                for ((mut dsr, pr), &sum) in ds.outer_iter_mut().zip(p.outer_iter()).zip(sums.iter()) {
                    dsr.zip_mut_with(&pr, |d, &pv| *d = (*d - pv * sum) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
            }
            self.rope.apply(dq.view_mut(), positions, true);
            self.rope.apply(dk.view_mut(), positions, true);
            g.wq += &lt.a.t().dot(&dq);
            g.wk += &lt.a.t().dot(&dk);
            g.wv += &lt.a.t().dot(&dv);
            let da = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
            dh = &dhmid + &rms_back(&lt.x, &layer.attn_norm, &lt.r1, &da, &mut g.attn_norm);
        }
        dh
    }
}
