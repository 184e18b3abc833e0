//! Normalization, softmax and convolution operations.

use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Real, Tensor, Transpose};

/// Left/right zero padding of a length-preserving 1-D convolution.
pub fn conv_padding(kernel: usize, causal: bool) -> (usize, usize) {
    if causal {
        (kernel - 1, 0)
    } else {
        let left = (kernel - 1) / 2;
        (left, kernel - 1 - left)
    }
}

/// For tap `j`: output rows `t0..t1` read input rows `t0 + j - left ..`.
fn tap_range(len: usize, left: usize, j: usize) -> Option<(usize, usize, usize)> {
    // source index s = t + j - left must satisfy 0 <= s < len
    let t0 = left.saturating_sub(j);
    let t1 = (len + left).saturating_sub(j).min(len);
    (t0 < t1).then(|| (t0, t1, t0 + j - left))
}

impl<T: Real> Var<T> {
    /// Normalizes every trailing-axis vector to zero mean and unit variance,
    /// then applies the optional affine pair.
    pub fn layer_norm(&self, gain: Option<&Var<T>>, bias: Option<&Var<T>>, eps: f64) -> Result<Var<T>> {
        let x = self.value();
        let d = x.cols();
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            if let Some(p) = p {
                if p.value().numel() != d {
                    return Err(dim_err!("layer_norm {} must have {} entries", what, d));
                }
            }
        }
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let rows = x.rows();
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&v| (v - mu) * rs));
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            for row in out.chunks_mut(d) {
                for (v, &gv) in row.iter_mut().zip(g.value().data()) {
                    *v *= gv;
                }
            }
        }
        if let Some(b) = bias {
            for row in out.chunks_mut(d) {
                for (v, &bv) in row.iter_mut().zip(b.value().data()) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), out);

        let mut parents = vec![self];
        parents.extend(gain);
        parents.extend(bias);
        let (has_gain, has_bias) = (gain.is_some(), bias.is_some());
        let tracking = Var::tracking(&parents);
        let saved = if tracking { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(Var::from_op(
            "layer_norm",
            value,
            &parents,
            Box::new(move |g, p, _| {
                let (xhat, rstd) = (&saved.0, &saved.1);
                let gv = has_gain.then(|| p[1].data());
                let mut gx = Vec::with_capacity(g.numel());
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dx = T::zero();
                    let mut mean_dxx = T::zero();
                    for j in 0..d {
                        dxhat[j] = match gv {
                            Some(w) => grow[j] * w[j],
                            None => grow[j],
                        };
                        mean_dx += dxhat[j];
                        mean_dxx += dxhat[j] * xh[j];
                        ggain[j] += grow[j] * xh[j];
                        gbias[j] += grow[j];
                    }
                    mean_dx *= inv_d;
                    mean_dxx *= inv_d;
                    for j in 0..d {
                        gx.push(rstd[r] * (dxhat[j] - mean_dx - xh[j] * mean_dxx));
                    }
                }
                let mut grads = vec![Some(Tensor::from_vec(p[0].shape().to_vec(), gx))];
                if has_gain {
                    grads.push(Some(Tensor::from_vec(p[1].shape().to_vec(), ggain)));
                }
                if has_bias {
                    let idx = if has_gain { 2 } else { 1 };
                    grads.push(Some(Tensor::from_vec(p[idx].shape().to_vec(), gbias)));
                }
                grads
            }),
        ))
    }

    /// Root-mean-square normalization over the trailing axis with a gain.
    pub fn rms_norm(&self, gain: &Var<T>, eps: f64) -> Result<Var<T>> {
        let x = self.value();
        let d = x.cols();
        if gain.value().numel() != d {
            return Err(dim_err!("rms_norm gain must have {} entries", d));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let rows = x.rows();
        let mut rinv = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        let w = gain.value().data();
        for r in 0..rows {
            let row = x.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let ri = T::one() / (ms + eps).sqrt();
            rinv.push(ri);
            out.extend(row.iter().zip(w).map(|(&v, &wv)| v * ri * wv));
        }
        let value = Tensor::from_vec(x.shape().to_vec(), out);
        Ok(Var::from_op(
            "rms_norm",
            value,
            &[self, gain],
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = Vec::with_capacity(g.numel());
                let mut gw = vec![T::zero(); d];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let xr = &x[r * d..(r + 1) * d];
                    let ri = rinv[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        let xh = xr[j] * ri;
                        gw[j] += grow[j] * xh;
                        dot += grow[j] * w[j] * xh;
                    }
                    dot *= inv_d;
                    for j in 0..d {
                        let xh = xr[j] * ri;
                        gx.push(ri * (grow[j] * w[j] - xh * dot));
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape().to_vec(), gx)),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gw)),
                ]
            }),
        ))
    }

    /// Softmax over the trailing axis. `-inf` entries map to exactly zero; a
    /// row that is entirely `-inf` yields zeros.
    pub fn softmax(&self) -> Var<T> {
        let x = self.value();
        let d = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            if mx == T::neg_infinity() {
                out.extend(std::iter::repeat_n(T::zero(), d));
                continue;
            }
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = if v == T::neg_infinity() { T::zero() } else { (v - mx).exp() };
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / total;
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), out);
        Var::from_op(
            "softmax",
            value,
            &[self],
            Box::new(move |g, _, y| {
                let mut gx = Vec::with_capacity(g.numel());
                for (grow, yrow) in g.data().chunks(d).zip(y.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::from_vec(g.shape().to_vec(), gx))]
            }),
        )
    }

    /// Length-preserving 1-D convolution over `[L, C_in]` with kernel
    /// `[k, C_in, C_out]`. Causal mode pads `k-1` zeros on the left only.
    pub fn conv1d(&self, kernel: &Var<T>, bias: Option<&Var<T>>, causal: bool) -> Result<Var<T>> {
        let x = self.value();
        let ks = kernel.shape();
        if x.rank() != 2 || ks.len() != 3 {
            return Err(dim_err!(
                "conv1d needs x [L, C_in] and kernel [k, C_in, C_out], got {:?} and {:?}",
                x.shape(),
                ks
            ));
        }
        let (len, cin) = (x.rows(), x.cols());
        let (k, kin, cout) = (ks[0], ks[1], ks[2]);
        if k == 0 {
            return Err(dim_err!("conv1d kernel size must be >= 1"));
        }
        if kin != cin {
            return Err(dim_err!("conv1d channel mismatch: input {} vs kernel {}", cin, kin));
        }
        if let Some(b) = bias {
            if b.value().numel() != cout {
                return Err(dim_err!("conv1d bias must have {} entries", cout));
            }
        }
        let (left, _) = conv_padding(k, causal);
        let w = kernel.value().data();
        let mut out = vec![T::zero(); len * cout];
        if let Some(b) = bias {
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.value().data());
            }
        }
        for j in 0..k {
            if let Some((t0, t1, s0)) = tap_range(len, left, j) {
                gemm(
                    t1 - t0,
                    cin,
                    cout,
                    &x.data()[s0 * cin..],
                    Transpose::No,
                    &w[j * cin * cout..],
                    Transpose::No,
                    T::one(),
                    &mut out[t0 * cout..],
                );
            }
        }
        let value = Tensor::from_vec(vec![len, cout], out);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(Var::from_op(
            "conv1d",
            value,
            &parents,
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = vec![T::zero(); len * cin];
                let mut gw = vec![T::zero(); k * cin * cout];
                for j in 0..k {
                    if let Some((t0, t1, s0)) = tap_range(len, left, j) {
                        let rows = t1 - t0;
                        gemm(
                            rows,
                            cout,
                            cin,
                            &g.data()[t0 * cout..],
                            Transpose::No,
                            &w[j * cin * cout..],
                            Transpose::Yes,
                            T::one(),
                            &mut gx[s0 * cin..],
                        );
                        gemm(
                            cin,
                            rows,
                            cout,
                            &x[s0 * cin..(s0 + rows) * cin],
                            Transpose::Yes,
                            &g.data()[t0 * cout..],
                            Transpose::No,
                            T::zero(),
                            &mut gw[j * cin * cout..],
                        );
                    }
                }
                let mut grads = vec![
                    Some(Tensor::from_vec(p[0].shape().to_vec(), gx)),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gw)),
                ];
                if has_bias {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.data().chunks(cout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    grads.push(Some(Tensor::from_vec(p[2].shape().to_vec(), gb)));
                }
                grads
            }),
        ))
    }

    /// Depthwise 1-D convolution over `[L, C]` with kernel `[k, C]`.
    pub fn depthwise_conv1d(&self, kernel: &Var<T>, bias: Option<&Var<T>>, causal: bool) -> Result<Var<T>> {
        let x = self.value();
        let ks = kernel.shape();
        if x.rank() != 2 || ks.len() != 2 || ks[1] != x.cols() || ks[0] == 0 {
            return Err(dim_err!(
                "depthwise_conv1d needs x [L, C] and kernel [k>=1, C], got {:?} and {:?}",
                x.shape(),
                ks
            ));
        }
        let (len, c, k) = (x.rows(), x.cols(), ks[0]);
        if let Some(b) = bias {
            if b.value().numel() != c {
                return Err(dim_err!("depthwise bias must have {} entries", c));
            }
        }
        let (left, _) = conv_padding(k, causal);
        let w = kernel.value().data();
        let mut out = vec![T::zero(); len * c];
        if let Some(b) = bias {
            for row in out.chunks_mut(c) {
                row.copy_from_slice(b.value().data());
            }
        }
        for j in 0..k {
            if let Some((t0, t1, s0)) = tap_range(len, left, j) {
                let wj = &w[j * c..(j + 1) * c];
                for (i, t) in (t0..t1).enumerate() {
                    let src = &x.data()[(s0 + i) * c..(s0 + i + 1) * c];
                    let dst = &mut out[t * c..(t + 1) * c];
                    for ((o, &xv), &wv) in dst.iter_mut().zip(src).zip(wj) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![len, c], out);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(Var::from_op(
            "depthwise_conv1d",
            value,
            &parents,
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut gx = vec![T::zero(); len * c];
                let mut gw = vec![T::zero(); k * c];
                for j in 0..k {
                    if let Some((t0, t1, s0)) = tap_range(len, left, j) {
                        for (i, t) in (t0..t1).enumerate() {
                            let s = s0 + i;
                            for ch in 0..c {
                                let gv = gd[t * c + ch];
                                gx[s * c + ch] += gv * w[j * c + ch];
                                gw[j * c + ch] += gv * x[s * c + ch];
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Some(Tensor::from_vec(p[0].shape().to_vec(), gx)),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gw)),
                ];
                if has_bias {
                    let mut gb = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    grads.push(Some(Tensor::from_vec(p[2].shape().to_vec(), gb)));
                }
                grads
            }),
        ))
    }
}
