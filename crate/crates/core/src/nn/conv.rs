//! Convolutions, pooling and batch normalization for the visual stack and the
//! temporal decimation layers.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Axis, Ix4, Zip};

use crate::float::Float;
use crate::nn::ops::{v1, v2, v3};
use crate::nn::param::{BnStat, ParamId};
use crate::nn::tape::{Tape, Var};

fn v4<F>(a: &ArrayD<F>) -> ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-D value")
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self { cin, h, w, kh, kw, stride, pad, ho, wo }
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output columns `oj` whose input column `oj*stride + k - pad` is in bounds.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // largest oj with oj*stride + k - pad <= w - 1
    let hi = if w + pad > k { ((w - 1 + pad - k) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// `x [Cin, H, W] -> cols [Cin*kh*kw, Ho*Wo]`.
fn im2col<F: Float>(x: &ArrayView3<'_, F>, g: &Geom, cols: &mut Array2<F>) {
    cols.fill(F::zero());
    let pad = g.pad as isize;
    let xs = x.as_slice().expect("contiguous input");
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let (lo, hi) = valid_range(kj, g.pad, g.stride, g.w, g.wo);
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("contiguous cols");
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let base = (ci * g.h + ii as usize) * g.w;
                    let first = base + lo * g.stride + kj - g.pad;
                    let dst = &mut row[oi * g.wo + lo..oi * g.wo + hi];
                    for (d, s) in dst.iter_mut().zip(xs[first..].iter().step_by(g.stride)) {
                        *d = *s;
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(cols: &Array2<F>, g: &Geom, dx: &mut ndarray::ArrayViewMut3<'_, F>) {
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = cols.row(r);
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            dx[[ci, ii as usize, jj as usize]] += row[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Tape<'_, F> {
    /// 2-D convolution without bias: `x [N, Cin, H, W]`, `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: ParamId, stride: usize, pad: usize) -> Var {
        let wv = self.param(w);
        let (n, cin, h, wd) = v4(self.value(x)).dim();
        let wshape = self.shape(wv).to_vec();
        assert_eq!(wshape.len(), 4, "conv2d weight must be 4-D");
        assert_eq!(wshape[1], cin, "conv2d channel mismatch");
        let cout = wshape[0];
        let g = Geom::new(cin, h, wd, wshape[2], wshape[3], stride, pad);
        let wmat =
            self.value(wv).view().into_shape_with_order((cout, g.rows())).expect("weight layout").to_owned();
        let xv = v4(self.value(x));
        let mut y = Array4::<F>::zeros((n, cout, g.ho, g.wo));
        let mut cols = Array2::<F>::zeros((g.rows(), g.ho * g.wo));
        for i in 0..n {
            im2col(&xv.index_axis(Axis(0), i).as_standard_layout().view(), &g, &mut cols);
            let mut out = y
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((cout, g.ho * g.wo))
                .expect("conv out layout");
            general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut out);
        }
        self.push(y.into_dyn(), &[x, wv], move |c, s| {
            let xv = v4(c.value(x));
            let gy = v4(c.grad);
            let want_x = s.wants(x);
            let mut dw = Array2::<F>::zeros((cout, g.rows()));
            let mut dx = if want_x { Some(Array4::<F>::zeros((n, cin, h, wd))) } else { None };
            let mut cols = Array2::<F>::zeros((g.rows(), g.ho * g.wo));
            let mut dcols = Array2::<F>::zeros((g.rows(), g.ho * g.wo));
            for i in 0..n {
                let gi = gy
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((cout, g.ho * g.wo))
                    .expect("grad layout");
                im2col(&xv.index_axis(Axis(0), i).as_standard_layout().view(), &g, &mut cols);
                general_mat_mul(F::one(), &gi, &cols.t(), F::one(), &mut dw);
                if let Some(dx) = dx.as_mut() {
                    general_mat_mul(F::one(), &wmat.t(), &gi, F::zero(), &mut dcols);
                    col2im(&dcols, &g, &mut dx.index_axis_mut(Axis(0), i));
                }
            }
            s.add(wv, dw.into_shape_with_order(wshape.clone()).expect("dw layout").into_dyn());
            if let Some(dx) = dx {
                s.add(x, dx.into_dyn());
            }
        })
    }

    /// Max pooling over `x [N, C, H, W]` with padding treated as `-inf`.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = v4(self.value(x));
        let (n, ch, h, w) = xv.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut y = Array4::<F>::zeros((n, ch, ho, wo));
        let mut arg = vec![0usize; n * ch * ho * wo];
        let mut idx = 0;
        for b in 0..n {
            for c in 0..ch {
                let plane = xv.slice(s![b, c, .., ..]);
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = F::neg_infinity();
                        let mut at = 0;
                        for ki in 0..k {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let v = plane[[ii as usize, jj as usize]];
                                if v > best {
                                    best = v;
                                    at = ii as usize * w + jj as usize;
                                }
                            }
                        }
                        y[[b, c, oi, oj]] = best;
                        arg[idx] = at;
                        idx += 1;
                    }
                }
            }
        }
        self.push(y.into_dyn(), &[x], move |cx, s| {
            let gy = v4(cx.grad);
            let mut dx = Array4::<F>::zeros((n, ch, h, w));
            let mut idx = 0;
            for b in 0..n {
                for c in 0..ch {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let at = arg[idx];
                            dx[[b, c, at / w, at % w]] += gy[[b, c, oi, oj]];
                            idx += 1;
                        }
                    }
                }
            }
            s.add(x, dx.into_dyn());
        })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = v4(self.value(x));
        let (n, ch, h, w) = xv.dim();
        let area = F::of((h * w) as f64);
        let y = xv
            .into_shape_with_order((n, ch, h * w))
            .expect("pool layout")
            .sum_axis(Axis(2))
            .mapv(|v| v / area);
        self.push(y.into_dyn(), &[x], move |c, s| {
            let g = v2(c.grad).mapv(|v| v / area);
            let dx = g
                .insert_axis(Axis(2))
                .insert_axis(Axis(3))
                .broadcast((n, ch, h, w))
                .expect("pool grad")
                .to_owned();
            s.add(x, dx.into_dyn());
        })
    }

    /// Batch norm over `x [N, C, S]`, statistics per channel across `N` and
    /// `S`. Training mode normalizes with batch statistics and records them
    /// for the running estimates; evaluation uses the running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        const EPS: f64 = 1e-5;
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let xv = v3(self.value(x));
        let (n, ch, sp) = xv.dim();
        let count = (n * sp) as f64;
        let (mean, var, unbiased) = if self.training() {
            let mut mean = Array1::<F>::zeros(ch);
            let mut var = Array1::<F>::zeros(ch);
            for c in 0..ch {
                let lane = xv.slice(s![.., c, ..]);
                let m = lane.sum() / F::of(count);
                let v = lane.iter().map(|&x| (x - m) * (x - m)).sum::<F>() / F::of(count);
                mean[c] = m;
                var[c] = v;
            }
            let unbiased =
                if count > 1.0 { var.mapv(|v| v * F::of(count / (count - 1.0))) } else { var.clone() };
            (mean, var, Some(unbiased))
        } else {
            (
                v1(self.param_value(running_mean)).to_owned(),
                v1(self.param_value(running_var)).to_owned(),
                None,
            )
        };
        let inv_std = var.mapv(|v| F::one() / (v + F::of(EPS)).sqrt());
        let gam = v1(self.value(gv)).to_owned();
        let bet = v1(self.value(bv)).to_owned();
        let mut xhat = Array3::<F>::zeros((n, ch, sp));
        let mut y = Array3::<F>::zeros((n, ch, sp));
        for c in 0..ch {
            let (m, is, g, b) = (mean[c], inv_std[c], gam[c], bet[c]);
            Zip::from(xhat.slice_mut(s![.., c, ..]))
                .and(y.slice_mut(s![.., c, ..]))
                .and(xv.slice(s![.., c, ..]))
                .for_each(|h, y, &x| {
                    *h = (x - m) * is;
                    *y = *h * g + b;
                });
        }
        if let Some(unbiased) = unbiased {
            self.record_bn(BnStat {
                mean_id: running_mean,
                var_id: running_var,
                mean: mean.clone(),
                var: unbiased,
            });
        }
        let batch_stats = self.training();
        self.push(y.into_dyn(), &[x, gv, bv], move |cx, s| {
            let g = v3(cx.grad);
            let mut dgamma = Array1::<F>::zeros(ch);
            let mut dbeta = Array1::<F>::zeros(ch);
            let mut dx = Array3::<F>::zeros((n, ch, sp));
            let gam = v1(cx.value(gv));
            let m = F::of(count);
            for c in 0..ch {
                let gc = g.slice(s![.., c, ..]);
                let hc = xhat.slice(s![.., c, ..]);
                let sum_g = gc.sum();
                let sum_gh = Zip::from(&gc).and(&hc).fold(F::zero(), |a, &g, &h| a + g * h);
                dgamma[c] = sum_gh;
                dbeta[c] = sum_g;
                let k = gam[c] * inv_std[c];
                if batch_stats {
                    Zip::from(dx.slice_mut(s![.., c, ..]))
                        .and(&gc)
                        .and(&hc)
                        .for_each(|d, &g, &h| *d = k / m * (m * g - sum_g - h * sum_gh));
                } else {
                    Zip::from(dx.slice_mut(s![.., c, ..])).and(&gc).for_each(|d, &g| *d = k * g);
                }
            }
            s.add(gv, dgamma.into_dyn());
            s.add(bv, dbeta.into_dyn());
            s.add(x, dx.into_dyn());
        })
    }

    /// Stacks `k` temporal neighbours into the channel axis with zero
    /// padding: `[T, C, S] -> [T, k*C, S]`, offset `j` landing in channels
    /// `j*C..(j+1)*C` for source frame `t + j - (k-1)/2`. Followed by a
    /// convolution or linear layer this is a "same"-padded temporal
    /// convolution.
    pub fn temporal_stack(&mut self, x: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "temporal kernel must be odd");
        let xv = v3(self.value(x));
        let (t, ch, sp) = xv.dim();
        let half = (k / 2) as isize;
        let mut y = Array3::<F>::zeros((t, k * ch, sp));
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                y.slice_mut(s![ti, j * ch..(j + 1) * ch, ..]).assign(&xv.slice(s![src as usize, .., ..]));
            }
        }
        self.push(y.into_dyn(), &[x], move |c, s| {
            let g = v3(c.grad);
            let mut dx = Array3::<F>::zeros((t, ch, sp));
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let mut d = dx.slice_mut(s![src as usize, .., ..]);
                    d += &g.slice(s![ti, j * ch..(j + 1) * ch, ..]);
                }
            }
            s.add(x, dx.into_dyn());
        })
    }

    /// Depthwise "same" temporal convolution of `x [T, C]` with `w [C, k]`
    /// and bias `b [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let xv = v2(self.value(x));
        let wk = v2(self.value(wv));
        let (t, ch) = xv.dim();
        let k = wk.ncols();
        let half = (k / 2) as isize;
        let mut y = Array2::<F>::zeros((t, ch));
        y += &v1(self.value(bv));
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let mut row = y.row_mut(ti);
                Zip::from(&mut row)
                    .and(xv.row(src as usize))
                    .and(wk.column(j))
                    .for_each(|y, &x, &w| *y += x * w);
            }
        }
        self.push(y.into_dyn(), &[x, wv, bv], move |c, s| {
            let g = v2(c.grad);
            let xv = v2(c.value(x));
            let wk = v2(c.value(wv));
            let mut dx = Array2::<F>::zeros((t, ch));
            let mut dw = Array2::<F>::zeros((ch, k));
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    let gr = g.row(ti);
                    Zip::from(dx.row_mut(src)).and(&gr).and(wk.column(j)).for_each(|d, &g, &w| *d += g * w);
                    Zip::from(dw.column_mut(j)).and(&gr).and(xv.row(src)).for_each(|d, &g, &x| *d += g * x);
                }
            }
            s.add(x, dx.into_dyn());
            s.add(wv, dw.into_dyn());
            s.add(bv, g.sum_axis(Axis(0)).into_dyn());
        })
    }
}
