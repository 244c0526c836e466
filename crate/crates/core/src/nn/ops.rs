//! Elementwise, matrix and layout ops.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    concatenate, s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, IxDyn,
    Zip,
};

use crate::float::Float;
use crate::nn::param::ParamId;
use crate::nn::tape::{scalar, Tape, Var};
use crate::signal::{self, ChunkedFeature3D, FeatureMap2D, SI_SDR_SENTINEL_DB};

pub(crate) fn v1<F>(a: &ArrayD<F>) -> ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-D value")
}

pub(crate) fn v2<F>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D value")
}

pub(crate) fn v3<F>(a: &ArrayD<F>) -> ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-D value")
}

pub(crate) fn matmul<F: Float>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), a, b, F::zero(), &mut c);
    c
}

impl<F: Float> Tape<'_, F> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let src = self.value(x);
        let orig = src.shape().to_vec();
        let out = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(out, &[x], move |c, s| {
            let g = c
                .grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&orig))
                .expect("reshape");
            s.add(x, g);
        })
    }

    /// `x [N, in] * w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        self.linear_vars(x, wv, bv)
    }

    pub fn linear_vars(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = v2(self.value(x));
        let wv = v2(self.value(w));
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width vs weight");
        let mut y = matmul(&xv, &wv.t());
        if let Some(b) = b {
            y += &v1(self.value(b));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y.into_dyn(), &inputs, move |c, s| {
            let g = v2(c.grad);
            if s.wants(x) {
                s.add(x, matmul(&g, &v2(c.value(w))).into_dyn());
            }
            if s.wants(w) {
                s.add(w, matmul(&g.t(), &v2(c.value(x))).into_dyn());
            }
            if let Some(b) = b {
                s.add(b, g.sum_axis(Axis(0)).into_dyn());
            }
        })
    }

    /// `a [N, M] * b [M, P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul(&v2(self.value(a)), &v2(self.value(b)));
        self.push(y.into_dyn(), &[a, b], move |c, s| {
            let g = v2(c.grad);
            if s.wants(a) {
                s.add(a, matmul(&g, &v2(c.value(b)).t()).into_dyn());
            }
            if s.wants(b) {
                s.add(b, matmul(&v2(c.value(a)).t(), &g).into_dyn());
            }
        })
    }

    /// `a [N, M] * b [P, M]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = matmul(&v2(self.value(a)), &v2(self.value(b)).t());
        self.push(y.into_dyn(), &[a, b], move |c, s| {
            let g = v2(c.grad);
            if s.wants(a) {
                s.add(a, matmul(&g, &v2(c.value(b))).into_dyn());
            }
            if s.wants(b) {
                s.add(b, matmul(&g.t(), &v2(c.value(a))).into_dyn());
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let y = self.value(a) + self.value(b);
        self.push(y, &[a, b], move |c, s| {
            s.add(a, c.grad.clone());
            s.add(b, c.grad.clone());
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let y = self.value(a) * self.value(b);
        self.push(y, &[a, b], move |c, s| {
            if s.wants(a) {
                s.add(a, c.grad * c.value(b));
            }
            if s.wants(b) {
                s.add(b, c.grad * c.value(a));
            }
        })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = F::of(k);
        let y = self.value(x).mapv(|v| v * k);
        self.push(y, &[x], move |c, s| s.add(x, c.grad.mapv(|g| g * k)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence stays visible
        let y = self.value(x).mapv(|v| if v < F::zero() { F::zero() } else { v });
        self.push(y, &[x], move |c, s| {
            let mut g = c.grad.clone();
            Zip::from(&mut g).and(c.output()).for_each(|g, &y| {
                if y <= F::zero() {
                    *g = F::zero()
                }
            });
            s.add(x, g);
        })
    }

    /// Parametric ReLU with one slope per channel (last axis of `x [N, C]`).
    pub fn prelu(&mut self, x: Var, alpha: ParamId) -> Var {
        let a = self.param(alpha);
        let xv = v2(self.value(x));
        let av = v1(self.value(a));
        let mut y = xv.to_owned();
        Zip::from(y.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(&av).for_each(|v, &al| {
                if *v < F::zero() {
                    *v *= al
                }
            })
        });
        self.push(y.into_dyn(), &[x, a], move |c, s| {
            let g = v2(c.grad);
            let xv = v2(c.value(x));
            let av = v1(c.value(a));
            let mut gx = g.to_owned();
            let mut ga = Array1::<F>::zeros(av.len());
            Zip::from(gx.rows_mut()).and(xv.rows()).for_each(|mut gr, xr| {
                for j in 0..gr.len() {
                    if xr[j] < F::zero() {
                        ga[j] += gr[j] * xr[j];
                        gr[j] *= av[j];
                    }
                }
            });
            s.add(x, gx.into_dyn());
            s.add(a, ga.into_dyn());
        })
    }

    /// Normalizes each row of `x [N, C]` over its `C` features.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        const EPS: f64 = 1e-5;
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let xv = v2(self.value(x));
        let (n, cdim) = xv.dim();
        let gam = v1(self.value(gv)).to_owned();
        let bet = v1(self.value(bv)).to_owned();
        let mut xhat = Array2::<F>::zeros((n, cdim));
        let mut inv_std = Array1::<F>::zeros(n);
        let cf = F::of(cdim as f64);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let is = F::one() / (var + F::of(EPS)).sqrt();
            inv_std[i] = is;
            Zip::from(xhat.row_mut(i)).and(&row).for_each(|h, &v| *h = (v - mean) * is);
        }
        let mut y = xhat.clone();
        Zip::from(y.rows_mut())
            .for_each(|mut r| Zip::from(&mut r).and(&gam).and(&bet).for_each(|v, &g, &b| *v = *v * g + b));
        self.push(y.into_dyn(), &[x, gv, bv], move |c, s| {
            let g = v2(c.grad);
            if s.wants(gv) {
                s.add(gv, (&g * &xhat).sum_axis(Axis(0)).into_dyn());
            }
            if s.wants(bv) {
                s.add(bv, g.sum_axis(Axis(0)).into_dyn());
            }
            if s.wants(x) {
                let gam = v1(c.value(gv));
                let mut gx = Array2::<F>::zeros((n, cdim));
                for i in 0..n {
                    let dxhat: Array1<F> = &g.row(i) * &gam;
                    let sum_d = dxhat.sum();
                    let sum_dx = (&dxhat * &xhat.row(i)).sum();
                    let is = inv_std[i];
                    Zip::from(gx.row_mut(i))
                        .and(&dxhat)
                        .and(xhat.row(i))
                        .for_each(|o, &d, &h| *o = is / cf * (cf * d - sum_d - h * sum_dx));
                }
                s.add(x, gx.into_dyn());
            }
        })
    }

    /// Nearest-neighbour upsampling of rows: `[T, C] -> [T * factor, C]`.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Var {
        let xv = v2(self.value(x));
        let (t, cdim) = xv.dim();
        let mut y = Array2::<F>::zeros((t * factor, cdim));
        for (i, row) in xv.rows().into_iter().enumerate() {
            y.slice_mut(s![i * factor..(i + 1) * factor, ..]).assign(&row.broadcast((factor, cdim)).unwrap());
        }
        self.push(y.into_dyn(), &[x], move |c, s| {
            let g = v2(c.grad);
            let gx = g.into_shape_with_order((t, factor, cdim)).expect("repeat grad").sum_axis(Axis(1));
            s.add(x, gx.into_dyn());
        })
    }

    /// Concatenates 2-D values along the feature axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&x| v2(self.value(x))).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let y = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let xs = xs.to_vec();
        self.push(y.into_dyn(), &xs.clone(), move |c, s| {
            let g = v2(c.grad);
            let mut off = 0;
            for (x, w) in xs.iter().zip(&widths) {
                if s.wants(*x) {
                    s.add(*x, g.slice(s![.., off..off + w]).to_owned().into_dyn());
                }
                off += w;
            }
        })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = v2(self.value(x));
        let (n, cdim) = xv.dim();
        let y = xv.slice(s![.., start..end]).to_owned();
        self.push(y.into_dyn(), &[x], move |c, s| {
            let mut g = Array2::<F>::zeros((n, cdim));
            g.slice_mut(s![.., start..end]).assign(&v2(c.grad));
            s.add(x, g.into_dyn());
        })
    }

    /// Rows `[start, end)` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = v2(self.value(x));
        let (n, cdim) = xv.dim();
        let y = xv.slice(s![start..end, ..]).to_owned();
        self.push(y.into_dyn(), &[x], move |c, s| {
            let mut g = Array2::<F>::zeros((n, cdim));
            g.slice_mut(s![start..end, ..]).assign(&v2(c.grad));
            s.add(x, g.into_dyn());
        })
    }

    /// Zero-pads a 2-D value at the tail to `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = v2(self.value(x));
        let (n, cdim) = xv.dim();
        assert!(rows >= n, "pad_rows cannot shrink");
        let mut y = Array2::<F>::zeros((rows, cdim));
        y.slice_mut(s![0..n, ..]).assign(&xv);
        self.push(y.into_dyn(), &[x], move |c, s| {
            s.add(x, v2(c.grad).slice(s![0..n, ..]).to_owned().into_dyn());
        })
    }

    /// Column `col` of `x [N, C]` as a 1-D value.
    pub fn select_col(&mut self, x: Var, col: usize) -> Var {
        let xv = v2(self.value(x));
        let (n, cdim) = xv.dim();
        let y = xv.column(col).to_owned();
        self.push(y.into_dyn(), &[x], move |c, s| {
            let mut g = Array2::<F>::zeros((n, cdim));
            g.column_mut(col).assign(&v1(c.grad));
            s.add(x, g.into_dyn());
        })
    }

    /// Row-wise softmax of `x [N, P]`.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut y = v2(self.value(x)).to_owned();
        for mut row in y.rows_mut() {
            let m = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(y.into_dyn(), &[x], move |c, s| {
            let yv = v2(c.output());
            let g = v2(c.grad);
            let mut gx = Array2::<F>::zeros(yv.raw_dim());
            Zip::from(gx.rows_mut()).and(yv.rows()).and(g.rows()).for_each(|mut o, yr, gr| {
                let dot = (&yr * &gr).sum();
                Zip::from(&mut o).and(&yr).and(&gr).for_each(|o, &y, &g| *o = y * (g - dot));
            });
            s.add(x, gx.into_dyn());
        })
    }

    /// Swaps the two leading axes of a 3-D value.
    pub fn swap01(&mut self, x: Var) -> Var {
        let y = v3(self.value(x)).permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        self.push(y.into_dyn(), &[x], move |c, s| {
            let g = v3(c.grad).permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
            s.add(x, g.into_dyn());
        })
    }

    /// Cuts a signal `[S]` into frames `[S / stride, kernel]` starting every
    /// `stride` samples, zero-filled past the end. `S` must be a multiple of
    /// `stride`.
    pub fn frame_signal(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = v1(self.value(x));
        let len = xv.len();
        assert_eq!(len % stride, 0, "frame_signal: length not a multiple of stride");
        let y = frames_of(&xv, kernel, stride, len / stride);
        self.push(y.into_dyn(), &[x], move |c, s| {
            s.add(x, overlap_frames(&v2(c.grad), stride, len).into_dyn());
        })
    }

    /// Overlap-adds frames `[F, kernel]` at `stride` into a signal of
    /// `out_len` samples (tail beyond `out_len` is dropped).
    pub fn overlap_add_frames(&mut self, x: Var, stride: usize, out_len: usize) -> Var {
        let xv = v2(self.value(x));
        let (nf, kernel) = xv.dim();
        let y = overlap_frames(&xv, stride, out_len);
        self.push(y.into_dyn(), &[x], move |c, s| {
            s.add(x, frames_of(&v1(c.grad), kernel, stride, nf).into_dyn());
        })
    }

    /// `[L, D] -> [K, Q, D]` overlapping chunks (hop `K/2`).
    pub fn segment(&mut self, x: Var, k: usize) -> Var {
        let feat = FeatureMap2D { values: v2(self.value(x)).to_owned() };
        let orig = feat.frames();
        let chunked = signal::segment_chunks(&feat, k).expect("segment");
        let hop = chunked.hop;
        let y = chunked.values.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
        self.push(y.into_dyn(), &[x], move |c, s| {
            let values = v3(c.grad).permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
            let g = signal::overlap_add(&ChunkedFeature3D { values, hop, orig_frames: orig })
                .expect("segment backward");
            s.add(x, g.values.into_dyn());
        })
    }

    /// `[K, Q, D] -> [orig, D]` by overlap-add of the chunks.
    pub fn overlap_add_chunks(&mut self, x: Var, orig: usize) -> Var {
        let (k, _, _) = v3(self.value(x)).dim();
        let values = v3(self.value(x)).permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
        let y = signal::overlap_add(&ChunkedFeature3D { values, hop: k / 2, orig_frames: orig })
            .expect("overlap_add")
            .values;
        self.push(y.into_dyn(), &[x], move |c, s| {
            let feat = FeatureMap2D { values: v2(c.grad).to_owned() };
            let g = signal::segment_chunks(&feat, k).expect("overlap_add backward");
            let g = g.values.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
            s.add(x, g.into_dyn());
        })
    }

    /// Negative SI-SDR of a 1-D estimate against a fixed reference. Exact
    /// reconstructions return the negated sentinel with zero gradient.
    pub fn neg_si_sdr(&mut self, est: Var, reference: &[f64]) -> Var {
        let e: Vec<f64> = v1(self.value(est)).iter().map(|v| v.as_f64()).collect();
        assert_eq!(e.len(), reference.len(), "neg_si_sdr: length mismatch");
        let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
        assert!(ref_energy > 0.0, "neg_si_sdr: zero reference");
        let dot: f64 = e.iter().zip(reference).map(|(a, b)| a * b).sum();
        let alpha = dot / ref_energy;
        let target: Vec<f64> = reference.iter().map(|r| alpha * r).collect();
        let t_energy: f64 = target.iter().map(|v| v * v).sum();
        let residual: Vec<f64> = e.iter().zip(&target).map(|(a, t)| a - t).collect();
        let r_energy: f64 = residual.iter().map(|v| v * v).sum();
        let degenerate = r_energy <= t_energy * 1e-24 || t_energy <= 0.0;
        let loss = if t_energy <= 0.0 {
            SI_SDR_SENTINEL_DB
        } else if r_energy <= t_energy * 1e-24 {
            -SI_SDR_SENTINEL_DB
        } else {
            -10.0 * (t_energy / r_energy).log10()
        };
        self.push(scalar(F::of(loss)), &[est], move |c, s| {
            if degenerate {
                return;
            }
            let g0 = c.grad.iter().next().copied().unwrap_or(F::zero()).as_f64();
            let k = -10.0 / std::f64::consts::LN_10 * g0;
            let g: Array1<F> = target
                .iter()
                .zip(&residual)
                .map(|(t, r)| F::of(k * (2.0 * t / t_energy - 2.0 * r / r_energy)))
                .collect();
            s.add(est, g.into_dyn());
        })
    }

    /// Mean binary cross-entropy of probabilities `p [N]` against labels,
    /// over frames where `mask` is set. Probabilities are clamped to
    /// `[eps, 1 - eps]`; clamped entries pass no gradient.
    pub fn bce(&mut self, p: Var, labels: &[bool], mask: Option<&[bool]>) -> Var {
        const EPS: f64 = 1e-7;
        let pv: Vec<f64> = v1(self.value(p)).iter().map(|v| v.as_f64()).collect();
        assert_eq!(pv.len(), labels.len(), "bce: length mismatch");
        let active: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; pv.len()],
        };
        let count = active.iter().filter(|&&a| a).count().max(1) as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; pv.len()];
        for i in 0..pv.len() {
            if !active[i] {
                continue;
            }
            let q = pv[i].clamp(EPS, 1.0 - EPS);
            let y = if labels[i] { 1.0 } else { 0.0 };
            loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            if pv[i] > EPS && pv[i] < 1.0 - EPS {
                grad[i] = -(y / q - (1.0 - y) / (1.0 - q)) / count;
            }
        }
        self.push(scalar(F::of(loss / count)), &[p], move |c, s| {
            let g0 = c.grad.iter().next().copied().unwrap_or(F::zero());
            let g: Array1<F> = grad.iter().map(|&v| F::of(v) * g0).collect();
            s.add(p, g.into_dyn());
        })
    }

    /// Sum of all entries.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(scalar(total), &[x], move |c, s| {
            let g0 = c.grad.iter().next().copied().unwrap_or(F::zero());
            s.add(x, ArrayD::from_elem(c.value(x).raw_dim(), g0));
        })
    }
}

fn frames_of<F: Float>(x: &ArrayView1<'_, F>, kernel: usize, stride: usize, nf: usize) -> Array2<F> {
    let len = x.len();
    let mut y = Array2::<F>::zeros((nf, kernel));
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        let start = i * stride;
        let end = (start + kernel).min(len);
        if start < end {
            row.slice_mut(s![0..end - start]).assign(&x.slice(s![start..end]));
        }
    }
    y
}

fn overlap_frames<F: Float>(x: &ArrayView2<'_, F>, stride: usize, out_len: usize) -> Array1<F> {
    let kernel = x.ncols();
    let mut y = Array1::<F>::zeros(out_len);
    for (i, row) in x.rows().into_iter().enumerate() {
        let start = i * stride;
        let end = (start + kernel).min(out_len);
        if start < end {
            let mut dst = y.slice_mut(s![start..end]);
            dst += &row.slice(s![0..end - start]);
        }
    }
    y
}
