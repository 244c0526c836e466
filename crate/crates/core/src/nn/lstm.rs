//! Unidirectional LSTM over `[T, B, In]` with gate order `i, f, g, o`.
//! A bidirectional layer is two of these, one with `reverse = true`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Axis};

use crate::float::Float;
use crate::nn::ops::{v2, v3};
use crate::nn::param::ParamId;
use crate::nn::tape::{Tape, Var};

#[inline]
fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Parameter handles of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `[4H, In]`
    pub w_ih: ParamId,
    /// `[4H, H]`
    pub w_hh: ParamId,
    /// `[4H]`
    pub bias: ParamId,
}

impl<F: Float> Tape<'_, F> {
    /// Runs the recurrence over axis 0 of `x [T, B, In]` and returns the
    /// hidden states `[T, B, H]` aligned with the input time axis.
    pub fn lstm(&mut self, x: Var, p: LstmParams, reverse: bool) -> Var {
        let w_ih = self.param(p.w_ih);
        let w_hh = self.param(p.w_hh);
        let bias = self.param(p.bias);
        let xv = v3(self.value(x));
        let (t_len, batch, input) = xv.dim();
        let whh = v2(self.value(w_hh)).to_owned();
        let hid = whh.ncols();
        let g4 = 4 * hid;

        let x2 = xv.into_shape_with_order((t_len * batch, input)).expect("lstm input layout");
        let mut xproj = Array2::<F>::zeros((t_len * batch, g4));
        general_mat_mul(F::one(), &x2, &v2(self.value(w_ih)).t(), F::zero(), &mut xproj);
        let bv = crate::nn::ops::v1(self.value(bias)).to_owned();
        xproj += &bv;
        let xproj = xproj.into_shape_with_order((t_len, batch, g4)).expect("lstm proj layout");

        let mut acts = Array3::<F>::zeros((t_len, batch, g4));
        let mut cells = Array3::<F>::zeros((t_len, batch, hid));
        let mut tanh_c = Array3::<F>::zeros((t_len, batch, hid));
        let mut hs = Array3::<F>::zeros((t_len, batch, hid));
        let mut gates = Array2::<F>::zeros((batch, g4));
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for (step, &t) in order.iter().enumerate() {
            gates.assign(&xproj.index_axis(Axis(0), t));
            let prev = (step > 0).then(|| order[step - 1]);
            if let Some(tp) = prev {
                general_mat_mul(F::one(), &hs.index_axis(Axis(0), tp), &whh.t(), F::one(), &mut gates);
            }
            for b in 0..batch {
                let gr = gates.row(b);
                let mut ar = acts.slice_mut(s![t, b, ..]);
                for j in 0..hid {
                    let i = sigmoid(gr[j]);
                    let f = sigmoid(gr[hid + j]);
                    let gg = gr[2 * hid + j].tanh();
                    let o = sigmoid(gr[3 * hid + j]);
                    ar[j] = i;
                    ar[hid + j] = f;
                    ar[2 * hid + j] = gg;
                    ar[3 * hid + j] = o;
                    let c_prev = match prev {
                        Some(tp) => cells[[tp, b, j]],
                        None => F::zero(),
                    };
                    let c = f * c_prev + i * gg;
                    let tc = c.tanh();
                    cells[[t, b, j]] = c;
                    tanh_c[[t, b, j]] = tc;
                    hs[[t, b, j]] = o * tc;
                }
            }
        }

        let out = hs.clone();
        self.push(out.into_dyn(), &[x, w_ih, w_hh, bias], move |c, s| {
            let gy = v3(c.grad);
            let whh = v2(c.value(w_hh));
            let mut dgates = Array3::<F>::zeros((t_len, batch, g4));
            let mut dh_next = Array2::<F>::zeros((batch, hid));
            let mut dc_next = Array2::<F>::zeros((batch, hid));
            let mut dwhh = Array2::<F>::zeros((g4, hid));
            let one = F::one();
            for step in (0..t_len).rev() {
                let t = order[step];
                let prev = (step > 0).then(|| order[step - 1]);
                for b in 0..batch {
                    let a = acts.slice(s![t, b, ..]);
                    let mut dg = dgates.slice_mut(s![t, b, ..]);
                    for j in 0..hid {
                        let (i, f, gg, o) = (a[j], a[hid + j], a[2 * hid + j], a[3 * hid + j]);
                        let tc = tanh_c[[t, b, j]];
                        let dh = gy[[t, b, j]] + dh_next[[b, j]];
                        let d_o = dh * tc;
                        let dc = dh * o * (one - tc * tc) + dc_next[[b, j]];
                        let c_prev = match prev {
                            Some(tp) => cells[[tp, b, j]],
                            None => F::zero(),
                        };
                        dg[j] = dc * gg * i * (one - i);
                        dg[hid + j] = dc * c_prev * f * (one - f);
                        dg[2 * hid + j] = dc * i * (one - gg * gg);
                        dg[3 * hid + j] = d_o * o * (one - o);
                        dc_next[[b, j]] = dc * f;
                    }
                }
                let dg_t = dgates.index_axis(Axis(0), t);
                general_mat_mul(one, &dg_t, &whh, F::zero(), &mut dh_next);
                if let Some(tp) = prev {
                    general_mat_mul(one, &dg_t.t(), &hs.index_axis(Axis(0), tp), one, &mut dwhh);
                }
            }
            let dg2 = dgates.into_shape_with_order((t_len * batch, g4)).expect("dgates layout");
            if s.wants(w_ih) {
                let x2 = v3(c.value(x)).into_shape_with_order((t_len * batch, input)).expect("x layout");
                let mut dwih = Array2::<F>::zeros((g4, input));
                general_mat_mul(one, &dg2.t(), &x2, F::zero(), &mut dwih);
                s.add(w_ih, dwih.into_dyn());
            }
            if s.wants(x) {
                let mut dx = Array2::<F>::zeros((t_len * batch, input));
                general_mat_mul(one, &dg2, &v2(c.value(w_ih)), F::zero(), &mut dx);
                s.add(x, dx.into_shape_with_order((t_len, batch, input)).expect("dx layout").into_dyn());
            }
            s.add(bias, dg2.sum_axis(Axis(0)).into_dyn());
            s.add(w_hh, dwhh.into_dyn());
        })
    }
}
