//! Shape, arithmetic and activation operations.

use std::cell::Cell;

use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Real, Tensor, Transpose};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Silu,
    Tanh,
    Exp,
    Softplus,
    LogSigmoid,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

thread_local! {
    /// Activation whose backward rule is deliberately corrupted on this
    /// thread, encoded as `index + 1` (0 means none).
    static FAULT: Cell<u8> = const { Cell::new(0) };
}

/// Halves the derivative of `act` in backward passes run on the calling
/// thread, or restores correct rules with `None`. Negative control for
/// gradient checks.
pub fn inject_backward_fault(act: Option<Activation>) {
    FAULT.with(|f| f.set(act.map_or(0, |a| a as u8 + 1)));
}

impl Activation {
    pub const ALL: [Activation; 7] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Silu,
        Activation::Tanh,
        Activation::Exp,
        Activation::Softplus,
        Activation::LogSigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp",
            Activation::Softplus => "softplus",
            Activation::LogSigmoid => "log_sigmoid",
        }
    }

    fn faulty(self) -> bool {
        FAULT.with(|f| f.get()) == self as u8 + 1
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
            Activation::Softplus => softplus(x),
            Activation::LogSigmoid => -softplus(-x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Exp => y,
            Activation::Softplus => sigmoid(x),
            Activation::LogSigmoid => sigmoid(-x),
        }
    }
}

/// `out[b] = a[b]·w[b]` (or a shared `w`) over contiguous batches.
fn batched_matmul<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let bi = if shared_b { 0 } else { i };
        gemm(
            m,
            k,
            n,
            &a[i * m * k..],
            Transpose::No,
            &b[bi * k * n..],
            Transpose::No,
            T::zero(),
            &mut out[i * m * n..],
        );
    }
    out
}

impl<T: Real> Var<T> {
    fn unary(&self, name: &'static str, act: Activation) -> Var<T> {
        let value = self.value().map(|x| act.apply(x));
        Var::from_op(
            name,
            value,
            &[self],
            Box::new(move |g, p, y| {
                let scale = if act.faulty() { T::from_f64(0.5) } else { T::one() };
                let data = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * act.derivative(x, y) * scale)
                    .collect();
                vec![Some(Tensor::from_vec(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn activation(&self, act: Activation) -> Var<T> {
        self.unary(act.name(), act)
    }

    pub fn relu(&self) -> Var<T> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.activation(Activation::Sigmoid)
    }

    pub fn silu(&self) -> Var<T> {
        self.activation(Activation::Silu)
    }

    pub fn tanh(&self) -> Var<T> {
        self.activation(Activation::Tanh)
    }

    pub fn exp(&self) -> Var<T> {
        self.activation(Activation::Exp)
    }

    pub fn softplus(&self) -> Var<T> {
        self.activation(Activation::Softplus)
    }

    pub fn log_sigmoid(&self) -> Var<T> {
        self.activation(Activation::LogSigmoid)
    }

    pub fn square(&self) -> Var<T> {
        let value = self.value().map(|x| x * x);
        Var::from_op(
            "square",
            value,
            &[self],
            Box::new(|g, p, _| {
                let two = T::from_f64(2.0);
                vec![Some(g.zip_map(p[0], |g, x| two * g * x).unwrap())]
            }),
        )
    }

    pub fn scale(&self, s: T) -> Var<T> {
        Var::from_op(
            "scale",
            self.value().map(|x| x * s),
            &[self],
            Box::new(move |g, _, _| vec![Some(g.map(|g| g * s))]),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    fn binary(
        &self,
        other: &Var<T>,
        name: &'static str,
        f: fn(T, T) -> T,
        df: fn(T, T, T) -> (T, T),
    ) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), f)?;
        Ok(Var::from_op(
            name,
            value,
            &[self, other],
            Box::new(move |g, p, _| {
                let n = g.numel();
                let (mut ga, mut gb) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for ((&g, &a), &b) in g.data().iter().zip(p[0].data()).zip(p[1].data()) {
                    let (da, db) = df(g, a, b);
                    ga.push(da);
                    gb.push(db);
                }
                let shape = g.shape().to_vec();
                vec![
                    Some(Tensor::from_vec(shape.clone(), ga)),
                    Some(Tensor::from_vec(shape, gb)),
                ]
            }),
        ))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    fn check_row_operand(&self, row: &Var<T>, what: &str) -> Result<usize> {
        let d = self.value().cols();
        if row.value().numel() != d {
            return Err(dim_err!(
                "{} of length {} does not match trailing extent {}",
                what,
                row.value().numel(),
                d
            ));
        }
        Ok(d)
    }

    /// Broadcast-adds a `[d]` vector along the trailing axis.
    pub fn add_row(&self, bias: &Var<T>) -> Result<Var<T>> {
        let d = self.check_row_operand(bias, "bias")?;
        let b = bias.value().data();
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(self.shape().to_vec(), out);
        Ok(Var::from_op(
            "add_row",
            value,
            &[self, bias],
            Box::new(move |g, p, _| {
                let mut gb = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gb)),
                ]
            }),
        ))
    }

    /// Broadcast-multiplies by a `[d]` vector along the trailing axis.
    pub fn mul_row(&self, gain: &Var<T>) -> Result<Var<T>> {
        let d = self.check_row_operand(gain, "gain")?;
        let w = gain.value().data();
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, &wv) in row.iter_mut().zip(w) {
                *v *= wv;
            }
        }
        let value = Tensor::from_vec(self.shape().to_vec(), out);
        Ok(Var::from_op(
            "mul_row",
            value,
            &[self, gain],
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = Vec::with_capacity(g.numel());
                let mut gw = vec![T::zero(); d];
                for (grow, xrow) in g.data().chunks(d).zip(x.chunks(d)) {
                    for j in 0..d {
                        gx.push(grow[j] * w[j]);
                        gw[j] += grow[j] * xrow[j];
                    }
                }
                vec![
                    Some(Tensor::from_vec(g.shape().to_vec(), gx)),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gw)),
                ]
            }),
        ))
    }

    pub fn sum(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(
            "sum",
            value,
            &[self],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape().to_vec(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_f64(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(Var::from_op(
            "reshape",
            value,
            &[self],
            Box::new(|g, p, _| vec![Some(g.reshape(p[0].shape().to_vec()).unwrap())]),
        ))
    }

    /// Reverses the row (time) order of a `[L, d]` value.
    pub fn flip_rows(&self) -> Var<T> {
        Var::from_op(
            "flip_rows",
            self.value().flip_rows(),
            &[self],
            Box::new(|g, _, _| vec![Some(g.flip_rows())]),
        )
    }

    /// Columns `start..start+len` of a `[R, C]` value.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<T>> {
        let c = self.value().cols();
        if start + len > c {
            return Err(dim_err!("column slice {}..{} exceeds {}", start, start + len, c));
        }
        let rows = self.value().rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value().row(r)[start..start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(shape, out);
        Ok(Var::from_op(
            "slice_cols",
            value,
            &[self],
            Box::new(move |g, p, _| {
                let mut gx = vec![T::zero(); p[0].numel()];
                for (r, grow) in g.data().chunks(len).enumerate() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(grow);
                }
                vec![Some(Tensor::from_vec(p[0].shape().to_vec(), gx))]
            }),
        ))
    }

    /// Concatenates `[R, C_i]` values along the trailing axis.
    pub fn concat_cols(parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let rows = first.value().rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.value().cols()).collect();
        if parts.iter().any(|p| p.value().rows() != rows) {
            return Err(dim_err!("concat_cols needs equal row counts"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.value().row(r));
            }
        }
        let mut shape = first.shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let value = Tensor::from_vec(shape, out);
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(Var::from_op(
            "concat_cols",
            value,
            &refs,
            Box::new(move |g, p, _| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    let mut gi = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gi.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    grads.push(Some(Tensor::from_vec(p[i].shape().to_vec(), gi)));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either batched like `self` or a single `[k, n]` matrix shared
    /// across every leading index.
    pub fn matmul(&self, b: &Var<T>) -> Result<Var<T>> {
        let (av, bv) = (self.value(), b.value());
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(dim_err!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (ra, rb) = (av.rank(), bv.rank());
        let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
        let (k2, n) = (bv.shape()[rb - 2], bv.shape()[rb - 1]);
        if k != k2 {
            return Err(dim_err!(
                "matmul inner extents disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let shared = rb == 2;
        if !shared && av.shape()[..ra - 2] != bv.shape()[..rb - 2] {
            return Err(dim_err!(
                "matmul batch extents disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let batch = av.numel().checked_div(m * k).unwrap_or(0);
        let out = batched_matmul(av.data(), bv.data(), batch, m, k, n, shared);
        let mut shape = av.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_vec(shape, out);
        Ok(Var::from_op(
            "matmul",
            value,
            &[self, b],
            Box::new(move |g, p, _| {
                let (a, bm, gd) = (p[0].data(), p[1].data(), g.data());
                let mut ga = vec![T::zero(); a.len()];
                let mut gb = vec![T::zero(); bm.len()];
                for i in 0..batch {
                    let bi = if shared { 0 } else { i };
                    let gi = &gd[i * m * n..];
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        Transpose::No,
                        &bm[bi * k * n..],
                        Transpose::Yes,
                        T::zero(),
                        &mut ga[i * m * k..],
                    );
                    let beta = if shared && i > 0 { T::one() } else { T::zero() };
                    gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..],
                        Transpose::Yes,
                        gi,
                        Transpose::No,
                        beta,
                        &mut gb[bi * k * n..],
                    );
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape().to_vec(), ga)),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gb)),
                ]
            }),
        ))
    }

    /// `self · bᵀ` for `[m, k]` and `[n, k]` operands.
    pub fn matmul_t(&self, b: &Var<T>) -> Result<Var<T>> {
        let (av, bv) = (self.value(), b.value());
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(dim_err!(
                "matmul_t needs [m,k] x [n,k], got {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), Transpose::No, bv.data(), Transpose::Yes, T::zero(), &mut out);
        let value = Tensor::from_vec(vec![m, n], out);
        Ok(Var::from_op(
            "matmul_t",
            value,
            &[self, b],
            Box::new(move |g, p, _| {
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); n * k];
                gemm(m, n, k, g.data(), Transpose::No, p[1].data(), Transpose::No, T::zero(), &mut ga);
                gemm(n, m, k, g.data(), Transpose::Yes, p[0].data(), Transpose::No, T::zero(), &mut gb);
                vec![
                    Some(Tensor::from_vec(vec![m, k], ga)),
                    Some(Tensor::from_vec(vec![n, k], gb)),
                ]
            }),
        ))
    }

    /// Headwise (block-diagonal) projection.
    ///
    /// `self` is `[L, blocks·bs_in]`, `weight` is `[blocks, bs_out, bs_in]`;
    /// block `b` of the output is `x_b · W_bᵀ`.
    pub fn headwise_linear(&self, weight: &Var<T>) -> Result<Var<T>> {
        let ws = weight.shape();
        if ws.len() != 3 {
            return Err(dim_err!("headwise weight must be rank 3, got {:?}", ws));
        }
        let (blocks, bs_out, bs_in) = (ws[0], ws[1], ws[2]);
        let x = self.value();
        if x.cols() != blocks * bs_in {
            return Err(dim_err!(
                "headwise input width {} != {}x{}",
                x.cols(),
                blocks,
                bs_in
            ));
        }
        let rows = x.rows();
        let (cin, cout) = (blocks * bs_in, blocks * bs_out);
        let w = weight.value().data();
        let mut out = vec![T::zero(); rows * cout];
        for r in 0..rows {
            let xr = x.row(r);
            let orow = &mut out[r * cout..(r + 1) * cout];
            for b in 0..blocks {
                for o in 0..bs_out {
                    let wrow = &w[(b * bs_out + o) * bs_in..(b * bs_out + o + 1) * bs_in];
                    let xs = &xr[b * bs_in..(b + 1) * bs_in];
                    orow[b * bs_out + o] = wrow.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::from_vec(shape, out);
        Ok(Var::from_op(
            "headwise_linear",
            value,
            &[self, weight],
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = vec![T::zero(); rows * cin];
                let mut gw = vec![T::zero(); w.len()];
                for r in 0..rows {
                    let grow = &g.data()[r * cout..(r + 1) * cout];
                    let xr = &x[r * cin..(r + 1) * cin];
                    for b in 0..blocks {
                        for o in 0..bs_out {
                            let go = grow[b * bs_out + o];
                            let base = (b * bs_out + o) * bs_in;
                            for i in 0..bs_in {
                                gx[r * cin + b * bs_in + i] += go * w[base + i];
                                gw[base + i] += go * xr[b * bs_in + i];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape().to_vec(), gx)),
                    Some(Tensor::from_vec(p[1].shape().to_vec(), gw)),
                ]
            }),
        ))
    }
}
