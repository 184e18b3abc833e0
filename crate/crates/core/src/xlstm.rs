//! mLSTM cell, the mLSTM block and its cascaded (C-BixLSTM) and parallel
//! (P-BixLSTM) bidirectional compositions.
//!
//! The cell keeps a stabilized memory: with `m_t = max(f_t + m_{t-1}, i_t)`
//! the stored `C` and `n` equal the unstabilized ones times `exp(-m_t)`, and
//! the read-out floor `exp(-m_t)` is the stabilized image of the floor `1`
//! of the plain recurrence, so both produce the same `h`.

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::params::{LayerNorm, Linear, ParamBuilder, ParamId, Params, NORM_EPS};
use crate::tensor::{Real, Tensor};

/// Steps between memory checkpoints kept for the backward pass.
const CHECKPOINT_EVERY: usize = 16;

/// Per-head recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct MlstmState<T> {
    /// `d_head × d_head`, row-major, `C[r][c]` pairs value row `r` with key column `c`.
    pub c: Vec<T>,
    pub n: Vec<T>,
    pub m: T,
}

impl<T: Real> MlstmState<T> {
    pub fn zeros(d_head: usize) -> Self {
        Self {
            c: vec![T::zero(); d_head * d_head],
            n: vec![T::zero(); d_head],
            m: T::zero(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.n.len()
    }

    pub fn is_finite(&self) -> bool {
        self.m.is_finite() && self.c.iter().chain(&self.n).all(|v| v.is_finite())
    }
}

/// Scalars of one step that the backward pass needs.
#[derive(Clone, Copy, Debug)]
struct StepTrace<T> {
    m: T,
    /// Forget factor `exp(f + m_prev - m)`.
    a: T,
    /// Input factor `exp(i - m)`.
    b: T,
    /// `nᵀq`.
    s: T,
    den: T,
}

/// Advances `c, n` in place and writes `h`.
#[allow(clippy::too_many_arguments)]
fn step_kernel<T: Real>(
    c: &mut [T],
    n: &mut [T],
    m_prev: T,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: T,
    f_log: T,
    h: &mut [T],
) -> StepTrace<T> {
    let dh = n.len();
    let m = (f_log + m_prev).max(i_pre);
    let a = (f_log + m_prev - m).exp();
    let b = (i_pre - m).exp();
    for r in 0..dh {
        let row = &mut c[r * dh..(r + 1) * dh];
        let bv = b * v[r];
        for (cv, &kv) in row.iter_mut().zip(k) {
            *cv = a * *cv + bv * kv;
        }
    }
    let mut s = T::zero();
    for j in 0..dh {
        n[j] = a * n[j] + b * k[j];
        s += n[j] * q[j];
    }
    let den = s.abs().max((-m).exp()).max(T::min_positive_value());
    for r in 0..dh {
        let row = &c[r * dh..(r + 1) * dh];
        h[r] = row.iter().zip(q).map(|(&cv, &qv)| cv * qv).sum::<T>() / den;
    }
    StepTrace { m, a, b, s, den }
}

/// One stabilized step for a single head. `f_log` is the log forget gate.
pub fn mlstm_cell_step<T: Real>(
    state: &MlstmState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: T,
    f_log: T,
) -> Result<(MlstmState<T>, Vec<T>)> {
    let dh = state.d_head();
    if q.len() != dh || k.len() != dh || v.len() != dh {
        return Err(dim_err!("mlstm step vectors must have length {}", dh));
    }
    if !state.is_finite() {
        return Err(Error::Numeric("mlstm state is not finite".into()));
    }
    if !(i_pre.is_finite() && f_log.is_finite() && q.iter().chain(k).chain(v).all(|x| x.is_finite())) {
        return Err(Error::Numeric("mlstm step inputs are not finite".into()));
    }
    let mut next = state.clone();
    let mut h = vec![T::zero(); dh];
    let tr = step_kernel(&mut next.c, &mut next.n, state.m, q, k, v, i_pre, f_log, &mut h);
    next.m = tr.m;
    if !next.is_finite() || h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("mlstm step produced a non-finite value".into()));
    }
    Ok((next, h))
}

struct HeadForward<T> {
    h: Vec<T>,
    trace: Vec<StepTrace<T>>,
    /// `n_t` for every step, `[L, d_head]`.
    n: Vec<T>,
    /// Memory before steps `0, CK, 2·CK, …`.
    checkpoints: Vec<Vec<T>>,
}

struct HeadIn<'a, T> {
    q: &'a [T],
    k: &'a [T],
    v: &'a [T],
    ig: &'a [T],
    fg: &'a [T],
    len: usize,
    heads: usize,
    d_head: usize,
    head: usize,
}

impl<T: Real> HeadIn<'_, T> {
    fn width(&self) -> usize {
        self.heads * self.d_head
    }

    fn row<'b>(&self, x: &'b [T], t: usize) -> &'b [T] {
        let base = t * self.width() + self.head * self.d_head;
        &x[base..base + self.d_head]
    }

    fn gate(&self, g: &[T], t: usize) -> T {
        g[t * self.heads + self.head]
    }
}

fn head_forward<T: Real>(x: &HeadIn<'_, T>, keep: bool) -> HeadForward<T> {
    let dh = x.d_head;
    let mut c = vec![T::zero(); dh * dh];
    let mut n = vec![T::zero(); dh];
    let mut m = T::zero();
    let mut out = HeadForward {
        h: vec![T::zero(); x.len * dh],
        trace: Vec::with_capacity(if keep { x.len } else { 0 }),
        n: Vec::with_capacity(if keep { x.len * dh } else { 0 }),
        checkpoints: Vec::new(),
    };
    for t in 0..x.len {
        if keep && t % CHECKPOINT_EVERY == 0 {
            out.checkpoints.push(c.clone());
        }
        let tr = step_kernel(
            &mut c,
            &mut n,
            m,
            x.row(x.q, t),
            x.row(x.k, t),
            x.row(x.v, t),
            x.gate(x.ig, t),
            x.gate(x.fg, t),
            &mut out.h[t * dh..(t + 1) * dh],
        );
        m = tr.m;
        if keep {
            out.trace.push(tr);
            out.n.extend_from_slice(&n);
        }
    }
    out
}

struct HeadGrads<T> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
    di: Vec<T>,
    df: Vec<T>,
}

fn head_backward<T: Real>(x: &HeadIn<'_, T>, fw: &HeadForward<T>, dh_all: &[T]) -> HeadGrads<T> {
    let (len, dh) = (x.len, x.d_head);
    let mut g = HeadGrads {
        dq: vec![T::zero(); len * dh],
        dk: vec![T::zero(); len * dh],
        dv: vec![T::zero(); len * dh],
        di: vec![T::zero(); len],
        df: vec![T::zero(); len],
    };
    let mut dc = vec![T::zero(); dh * dh];
    let mut dn = vec![T::zero(); dh];
    let mut cq = vec![T::zero(); dh];
    let mut dck = vec![T::zero(); dh];
    let zero_state = vec![T::zero(); dh * dh];
    let chunks = len.div_ceil(CHECKPOINT_EVERY);
    for chunk in (0..chunks).rev() {
        let t0 = chunk * CHECKPOINT_EVERY;
        let t1 = (t0 + CHECKPOINT_EVERY).min(len);
        // memories after each step of the chunk
        let mut mems: Vec<Vec<T>> = Vec::with_capacity(t1 - t0);
        let mut c = fw.checkpoints[chunk].clone();
        for t in t0..t1 {
            let tr = fw.trace[t];
            let (k, v) = (x.row(x.k, t), x.row(x.v, t));
            for r in 0..dh {
                let bv = tr.b * v[r];
                for (cv, &kv) in c[r * dh..(r + 1) * dh].iter_mut().zip(k) {
                    *cv = tr.a * *cv + bv * kv;
                }
            }
            mems.push(c.clone());
        }
        for t in (t0..t1).rev() {
            let tr = fw.trace[t];
            let cm = &mems[t - t0];
            let c_prev: &[T] = if t > t0 {
                &mems[t - t0 - 1]
            } else if t == 0 {
                &zero_state
            } else {
                &fw.checkpoints[chunk]
            };
            let (q, k, v) = (x.row(x.q, t), x.row(x.k, t), x.row(x.v, t));
            let n_t = &fw.n[t * dh..(t + 1) * dh];
            let gh = &dh_all[t * dh..(t + 1) * dh];
            let dq = &mut g.dq[t * dh..(t + 1) * dh];
            let inv = T::one() / tr.den;
            let mut gh_dot_h = T::zero();
            for r in 0..dh {
                cq[r] = cm[r * dh..(r + 1) * dh].iter().zip(q).map(|(&a, &b)| a * b).sum();
                gh_dot_h += gh[r] * cq[r] * inv;
            }
            for r in 0..dh {
                let ghr = gh[r] * inv;
                if ghr != T::zero() {
                    let row = &cm[r * dh..(r + 1) * dh];
                    let drow = &mut dc[r * dh..(r + 1) * dh];
                    for j in 0..dh {
                        dq[j] += row[j] * ghr;
                        drow[j] += ghr * q[j];
                    }
                }
            }
            let floor = (-tr.m).exp().max(T::min_positive_value());
            if tr.s.abs() > floor {
                let ds = -gh_dot_h * inv * tr.s.signum();
                for j in 0..dh {
                    dn[j] += ds * q[j];
                    dq[j] += ds * n_t[j];
                }
            }
            // through C_t = a·C_{t-1} + b·v kᵀ and n_t = a·n_{t-1} + b·k
            let n_prev: &[T] = if t > 0 { &fw.n[(t - 1) * dh..t * dh] } else { &zero_state[..dh] };
            let mut da = T::zero();
            let mut vdck = T::zero();
            for j in 0..dh {
                dck[j] = T::zero();
            }
            for r in 0..dh {
                let drow = &dc[r * dh..(r + 1) * dh];
                let prow = &c_prev[r * dh..(r + 1) * dh];
                let mut row_k = T::zero();
                for j in 0..dh {
                    da += drow[j] * prow[j];
                    row_k += drow[j] * k[j];
                    dck[j] += drow[j] * v[r];
                }
                g.dv[t * dh + r] = tr.b * row_k;
                vdck += v[r] * row_k;
            }
            let mut dnk = T::zero();
            for j in 0..dh {
                da += dn[j] * n_prev[j];
                dnk += dn[j] * k[j];
                g.dk[t * dh + j] = tr.b * (dck[j] + dn[j]);
            }
            g.df[t] = tr.a * da;
            g.di[t] = tr.b * (vdck + dnk);
            for v in dc.iter_mut() {
                *v *= tr.a;
            }
            for v in dn.iter_mut() {
                *v *= tr.a;
            }
        }
    }
    g
}

fn check_scan<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, ig: &Tensor<T>, fg: &Tensor<T>, heads: usize) -> Result<usize> {
    if q.rank() != 2 || heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(dim_err!("mlstm scan needs [L, heads·d_head] inputs, got {:?} for {} heads", q.shape(), heads));
    }
    let len = q.rows();
    if k.shape() != q.shape() || v.shape() != q.shape() || ig.shape() != [len, heads] || fg.shape() != [len, heads] {
        return Err(dim_err!(
            "mlstm scan shapes disagree: q {:?} k {:?} v {:?} i {:?} f {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            ig.shape(),
            fg.shape()
        ));
    }
    Ok(q.cols() / heads)
}

fn scatter_heads<T: Real>(per_head: &[Vec<T>], len: usize, heads: usize, d_head: usize) -> Vec<T> {
    let width = heads * d_head;
    let mut out = vec![T::zero(); len * width];
    for (h, vals) in per_head.iter().enumerate() {
        for t in 0..len {
            out[t * width + h * d_head..t * width + (h + 1) * d_head]
                .copy_from_slice(&vals[t * d_head..(t + 1) * d_head]);
        }
    }
    out
}

fn gather_head<T: Real>(x: &[T], len: usize, heads: usize, d_head: usize, head: usize) -> Vec<T> {
    let width = heads * d_head;
    let mut out = Vec::with_capacity(len * d_head);
    for t in 0..len {
        out.extend_from_slice(&x[t * width + head * d_head..t * width + (head + 1) * d_head]);
    }
    out
}

impl<T: Real> Var<T> {
    /// Multi-head mLSTM recurrence from a zero state. `self` holds the
    /// queries `[L, heads·d_head]`; `i_pre` and `f_log` are `[L, heads]`.
    pub fn mlstm_scan(&self, k: &Var<T>, v: &Var<T>, i_pre: &Var<T>, f_log: &Var<T>, heads: usize) -> Result<Var<T>> {
        let parents = [self, k, v, i_pre, f_log];
        let d_head = check_scan(self.value(), k.value(), v.value(), i_pre.value(), f_log.value(), heads)?;
        let len = self.value().rows();
        let keep = Var::tracking(&parents);
        let forwards: Vec<HeadForward<T>> = {
            let (q, k, v, ig, fg) = (self.value(), k.value(), v.value(), i_pre.value(), f_log.value());
            par::map_range(heads, |head| {
                let x = HeadIn {
                    q: q.data(),
                    k: k.data(),
                    v: v.data(),
                    ig: ig.data(),
                    fg: fg.data(),
                    len,
                    heads,
                    d_head,
                    head,
                };
                head_forward(&x, keep)
            })
        };
        let hs: Vec<Vec<T>> = forwards.iter().map(|f| f.h.clone()).collect();
        let value = Tensor::from_vec(vec![len, heads * d_head], scatter_heads(&hs, len, heads, d_head));
        if !keep {
            return Ok(Var::constant(value));
        }
        Ok(Var::from_op(
            "mlstm_scan",
            value,
            &parents,
            Box::new(move |g, p, _| {
                let grads: Vec<HeadGrads<T>> = par::map_range(heads, |head| {
                    let x = HeadIn {
                        q: p[0].data(),
                        k: p[1].data(),
                        v: p[2].data(),
                        ig: p[3].data(),
                        fg: p[4].data(),
                        len,
                        heads,
                        d_head,
                        head,
                    };
                    let gh = gather_head(g.data(), len, heads, d_head, head);
                    head_backward(&x, &forwards[head], &gh)
                });
                let collect = |f: fn(&HeadGrads<T>) -> &Vec<T>| {
                    let per: Vec<Vec<T>> = grads.iter().map(|g| f(g).clone()).collect();
                    Tensor::from_vec(vec![len, heads * d_head], scatter_heads(&per, len, heads, d_head))
                };
                let gate = |f: fn(&HeadGrads<T>) -> &Vec<T>| {
                    Tensor::from_fn(vec![len, heads], |idx| f(&grads[idx % heads])[idx / heads])
                };
                vec![
                    Some(collect(|g| &g.dq)),
                    Some(collect(|g| &g.dk)),
                    Some(collect(|g| &g.dv)),
                    Some(gate(|g| &g.di)),
                    Some(gate(|g| &g.df)),
                ]
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlstmDims {
    pub d_model: usize,
    /// `d_inner = proj_factor · d_model`.
    pub proj_factor: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    /// Block size of the headwise q/k/v projections.
    pub qkv_block: usize,
}

impl MlstmDims {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            proj_factor: 2,
            heads: 4,
            conv_kernel: 4,
            qkv_block: 4,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.proj_factor * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_inner() / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlstmBlock {
    pub norm: LayerNorm,
    pub up: Linear,
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub igate: Linear,
    pub fgate: Linear,
    pub out_norm: ParamId,
    pub skip: ParamId,
    pub down: Linear,
    pub dims: MlstmDims,
}

impl MlstmBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, dims: MlstmDims) -> Result<Self> {
        use rand::Rng;
        let (dm, di, h, bs) = (dims.d_model, dims.d_inner(), dims.heads, dims.qkv_block);
        if dm == 0 || h == 0 || di % h != 0 || bs == 0 || di % bs != 0 || dims.conv_kernel == 0 {
            return Err(Error::Config(format!("invalid mLSTM dimensions {dims:?}")));
        }
        let norm = b.scoped("norm", |b| LayerNorm {
            gain: Some(b.ones("weight", &[dm])),
            bias: None,
        });
        let up = Linear::new(b, "up", dm, 2 * di, false);
        let conv = b.fan_in("conv.weight", &[dims.conv_kernel, di], dims.conv_kernel);
        let conv_bias = b.zeros("conv.bias", &[di]);
        let blocks = di / bs;
        let q = b.fan_in("q.weight", &[blocks, bs, bs], bs);
        let k = b.fan_in("k.weight", &[blocks, bs, bs], bs);
        let v = b.fan_in("v.weight", &[blocks, bs, bs], bs);
        let igate = Linear {
            weight: b.zeros("igate.weight", &[3 * di, h]),
            bias: Some({
                // small random input-gate bias, std 0.1
                let bound = 0.1 * 3f64.sqrt();
                let vals: Vec<T> = (0..h).map(|_| T::from_f64(b.rng().random_range(-bound..bound))).collect();
                b.tensor("igate.bias", Tensor::from_vec(vec![h], vals))
            }),
        };
        let fgate = Linear {
            weight: b.zeros("fgate.weight", &[3 * di, h]),
            bias: Some(b.tensor(
                "fgate.bias",
                Tensor::from_fn(vec![h], |j| {
                    T::from_f64(if h == 1 { 3.0 } else { 3.0 + 3.0 * j as f64 / (h - 1) as f64 })
                }),
            )),
        };
        let out_norm = b.ones("out_norm.weight", &[di]);
        let skip = b.ones("skip", &[di]);
        let down = Linear::new(b, "down", di, dm, false);
        Ok(Self {
            norm,
            up,
            conv,
            conv_bias,
            q,
            k,
            v,
            igate,
            fgate,
            out_norm,
            skip,
            down,
            dims,
        })
    }

    /// Pre-norm residual block; causal by construction.
    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let (di, heads, dh) = (self.dims.d_inner(), self.dims.heads, self.dims.d_head());
        let len = x.value().rows();
        let up = self.up.forward(p, &self.norm.forward(p, x)?)?;
        let xm = up.slice_cols(0, di)?;
        let z = up.slice_cols(di, di)?;
        let xc = xm
            .depthwise_conv1d(p.get(self.conv), Some(p.get(self.conv_bias)), true)?
            .silu();
        let q = xc.headwise_linear(p.get(self.q))?;
        let k = xc.headwise_linear(p.get(self.k))?;
        let v = xm.headwise_linear(p.get(self.v))?;
        let gate_in = Var::concat_cols(&[q.clone(), k.clone(), v.clone()])?;
        let i_pre = self.igate.forward(p, &gate_in)?;
        let f_log = self.fgate.forward(p, &gate_in)?.log_sigmoid();
        let k = k.scale(T::from_f64(1.0 / (dh as f64).sqrt()));
        let h = q.mlstm_scan(&k, &v, &i_pre, &f_log, heads)?;
        let h = h
            .reshape(vec![len * heads, dh])?
            .layer_norm(None, None, NORM_EPS)?
            .reshape(vec![len, di])?
            .mul_row(p.get(self.out_norm))?;
        let h = h.add(&xc.mul_row(p.get(self.skip))?)?;
        let h = h.mul(&z.silu())?;
        x.add(&self.down.forward(p, &h)?)
    }
}

/// How the two directions of a bidirectional xLSTM block are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiMode {
    /// Backward block reads the forward block's output.
    Cascaded,
    /// Both blocks read the input; outputs are added.
    Parallel,
}

#[derive(Clone, Copy, Debug)]
pub struct BixlstmBlock {
    pub fwd: MlstmBlock,
    pub bwd: MlstmBlock,
    pub mode: BiMode,
}

impl BixlstmBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, dims: MlstmDims, mode: BiMode) -> Result<Self> {
        Ok(Self {
            fwd: b.scoped("fwd", |b| MlstmBlock::new(b, dims))?,
            bwd: b.scoped("bwd", |b| MlstmBlock::new(b, dims))?,
            mode,
        })
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        match self.mode {
            BiMode::Cascaded => {
                let f = self.fwd.forward(p, x)?;
                Ok(self.bwd.forward(p, &f.flip_rows())?.flip_rows())
            }
            BiMode::Parallel => {
                let f = self.fwd.forward(p, x)?;
                let r = self.bwd.forward(p, &x.flip_rows())?.flip_rows();
                f.add(&r)
            }
        }
    }
}
