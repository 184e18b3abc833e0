//! Selective state-space scan, the Mamba block and External BiMamba.
//!
//! Shapes: `u, delta: [L, d_inner]`, `a: [d_inner, d_state]` (negative),
//! `b, c: [L, d_state]`, `d: [d_inner]`. Per channel `i` and state `n`:
//!
//! ```text
//! h_t = exp(delta_t[i]·a[i,n])·h_{t-1} + delta_t[i]·b_t[n]·u_t[i]
//! y_t[i] = sum_n c_t[n]·h_t[i,n] + d[i]·u_t[i]
//! ```

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::params::{Linear, ParamBuilder, ParamId, Params};
use crate::tensor::{Real, Tensor};

/// Channels handled by one parallel task in the scan kernels.
const CHANNEL_CHUNK: usize = 16;

#[derive(Clone, Copy)]
struct Dims {
    len: usize,
    d_inner: usize,
    d_state: usize,
}

fn check<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Dims> {
    if u.rank() != 2 || a.rank() != 2 || b.rank() != 2 {
        return Err(dim_err!("selective scan expects matrices for u, a and b"));
    }
    let (len, d_inner) = (u.rows(), u.cols());
    let d_state = a.cols();
    if delta.shape() != u.shape()
        || a.shape() != [d_inner, d_state]
        || b.shape() != [len, d_state]
        || c.shape() != [len, d_state]
        || d.shape() != [d_inner]
    {
        return Err(dim_err!(
            "selective scan shapes disagree: u {:?} delta {:?} a {:?} b {:?} c {:?} d {:?}",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        ));
    }
    for (name, t) in [("u", u), ("delta", delta), ("a", a), ("b", b), ("c", c), ("d", d)] {
        if !t.all_finite() {
            return Err(Error::Numeric(format!("selective scan input `{name}` is not finite")));
        }
    }
    Ok(Dims { len, d_inner, d_state })
}

struct ScanIn<'a, T> {
    u: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d: &'a [T],
    dims: Dims,
}

/// Strictly left-to-right recurrence for channel `i`. Writes `y[t]` and,
/// if requested, the states `h[t*N + n]` and decay factors `exp(delta·a)`
/// in the same layout.
fn channel_seq<T: Real>(s: &ScanIn<'_, T>, i: usize, y: &mut [T], mut saved: Option<(&mut [T], &mut [T])>) {
    let Dims { len, d_inner, d_state } = s.dims;
    let mut h = vec![T::zero(); d_state];
    let mut decay = vec![T::zero(); d_state];
    let arow = &s.a[i * d_state..(i + 1) * d_state];
    for t in 0..len {
        let ut = s.u[t * d_inner + i];
        let dt = s.delta[t * d_inner + i];
        let bt = &s.b[t * d_state..(t + 1) * d_state];
        let ct = &s.c[t * d_state..(t + 1) * d_state];
        let mut acc = T::zero();
        for n in 0..d_state {
            decay[n] = (dt * arow[n]).exp();
            h[n] = decay[n] * h[n] + dt * bt[n] * ut;
            acc += ct[n] * h[n];
        }
        y[t] = acc + s.d[i] * ut;
        if let Some((hs, ds)) = saved.as_mut() {
            hs[t * d_state..(t + 1) * d_state].copy_from_slice(&h);
            ds[t * d_state..(t + 1) * d_state].copy_from_slice(&decay);
        }
    }
}

/// `(a2·a1, a2·b1 + b2)`: apply `(a1, b1)` first.
#[inline]
fn compose<T: Real>(first: (T, T), second: (T, T)) -> (T, T) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// In-place inclusive Blelloch scan of affine maps (up-sweep, then the
/// down-sweep that fills in the remaining prefixes).
fn blelloch_inclusive<T: Real>(x: &mut [(T, T)]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut s = 1;
    while s < n {
        let mut i = 2 * s - 1;
        while i < n {
            x[i] = compose(x[i - s], x[i]);
            i += 2 * s;
        }
        s *= 2;
    }
    s = n / 2;
    while s >= 1 {
        let mut i = 2 * s - 1;
        while i + s < n {
            x[i + s] = compose(x[i], x[i + s]);
            i += 2 * s;
        }
        s /= 2;
    }
}

/// Tree-scan variant of [`channel_seq`]: each state lane's affine
/// recurrence is solved by [`blelloch_inclusive`] from a zero initial state.
fn channel_tree<T: Real>(s: &ScanIn<'_, T>, i: usize, y: &mut [T], buf: &mut Vec<(T, T)>) {
    let Dims { len, d_inner, d_state } = s.dims;
    let padded = len.next_power_of_two();
    for (t, yt) in y.iter_mut().enumerate().take(len) {
        *yt = s.d[i] * s.u[t * d_inner + i];
    }
    for n in 0..d_state {
        let an = s.a[i * d_state + n];
        buf.clear();
        buf.extend((0..len).map(|t| {
            let dt = s.delta[t * d_inner + i];
            ((dt * an).exp(), dt * s.b[t * d_state + n] * s.u[t * d_inner + i])
        }));
        buf.resize(padded, (T::one(), T::zero()));
        blelloch_inclusive(buf);
        for t in 0..len {
            y[t] += s.c[t * d_state + n] * buf[t].1;
        }
    }
}

fn run<T: Real>(s: &ScanIn<'_, T>, tree: bool) -> Vec<T> {
    let Dims { len, d_inner, .. } = s.dims;
    let columns: Vec<Vec<T>> = par::map_range(d_inner, |i| {
        let mut y = vec![T::zero(); len];
        if tree {
            channel_tree(s, i, &mut y, &mut Vec::with_capacity(len.next_power_of_two()));
        } else {
            channel_seq(s, i, &mut y, None);
        }
        y
    });
    transpose_columns(&columns, len, d_inner)
}

fn transpose_columns<T: Real>(columns: &[Vec<T>], len: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len * width];
    for (i, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            out[t * width + i] = v;
        }
    }
    out
}

/// Reference scan, one time step after another.
pub fn selective_scan_seq<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = check(u, delta, a, b, c, d)?;
    let s = ScanIn {
        u: u.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        d: d.data(),
        dims,
    };
    let out: Vec<T> = par::single_threaded(|| {
        let mut out = vec![T::zero(); dims.len * dims.d_inner];
        let mut y = vec![T::zero(); dims.len];
        for i in 0..dims.d_inner {
            channel_seq(&s, i, &mut y, None);
            for t in 0..dims.len {
                out[t * dims.d_inner + i] = y[t];
            }
        }
        out
    });
    Ok(Tensor::from_vec(u.shape().to_vec(), out))
}

/// Associative-scan variant: channels in parallel, time by a Blelloch tree.
pub fn selective_scan_par<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = check(u, delta, a, b, c, d)?;
    let s = ScanIn {
        u: u.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        d: d.data(),
        dims,
    };
    Ok(Tensor::from_vec(u.shape().to_vec(), run(&s, true)))
}

struct ChunkGrads<T> {
    du: Vec<(usize, Vec<T>)>,
    ddelta: Vec<(usize, Vec<T>)>,
    da: Vec<(usize, Vec<T>)>,
    dd: Vec<(usize, T)>,
    db: Vec<T>,
    dc: Vec<T>,
}

impl<T: Real> Var<T> {
    /// Differentiable selective scan. The forward pass runs per channel in
    /// parallel; the states are kept only when a gradient is needed.
    pub fn selective_scan(
        &self,
        delta: &Var<T>,
        a: &Var<T>,
        b: &Var<T>,
        c: &Var<T>,
        d: &Var<T>,
    ) -> Result<Var<T>> {
        let parents = [self, delta, a, b, c, d];
        let (uv, dv, av, bv, cv, ddv) = (self.value(), delta.value(), a.value(), b.value(), c.value(), d.value());
        let dims = check(uv, dv, av, bv, cv, ddv)?;
        let s = ScanIn {
            u: uv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            d: ddv.data(),
            dims,
        };
        if !Var::tracking(&parents) {
            return Ok(Var::constant(Tensor::from_vec(uv.shape().to_vec(), run(&s, false))));
        }
        let Dims { len, d_inner, d_state } = dims;
        let per_channel: Vec<(Vec<T>, Saved<T>)> = par::map_range(d_inner, |i| {
            let mut y = vec![T::zero(); len];
            let mut h = vec![T::zero(); len * d_state];
            let mut decay = vec![T::zero(); len * d_state];
            channel_seq(&s, i, &mut y, Some((&mut h, &mut decay)));
            (y, Saved { h, decay })
        });
        let ys: Vec<Vec<T>> = per_channel.iter().map(|(y, _)| y.clone()).collect();
        let states: Vec<Saved<T>> = per_channel.into_iter().map(|(_, sv)| sv).collect();
        let value = Tensor::from_vec(uv.shape().to_vec(), transpose_columns(&ys, len, d_inner));
        Ok(Var::from_op(
            "selective_scan",
            value,
            &parents,
            Box::new(move |g, p, _| {
                let s = ScanIn {
                    u: p[0].data(),
                    delta: p[1].data(),
                    a: p[2].data(),
                    b: p[3].data(),
                    c: p[4].data(),
                    d: p[5].data(),
                    dims,
                };
                scan_backward(&s, &states, g.data())
            }),
        ))
    }
}

/// Per-channel forward residuals: states and decay factors, `[L, N]` each.
struct Saved<T> {
    h: Vec<T>,
    decay: Vec<T>,
}

fn scan_backward<T: Real>(s: &ScanIn<'_, T>, states: &[Saved<T>], dy: &[T]) -> Vec<Option<Tensor<T>>> {
    let Dims { len, d_inner, d_state } = s.dims;
    let chunks = d_inner.div_ceil(CHANNEL_CHUNK);
    let parts: Vec<ChunkGrads<T>> = par::map_range(chunks, |ci| {
        let mut out = ChunkGrads {
            du: Vec::new(),
            ddelta: Vec::new(),
            da: Vec::new(),
            dd: Vec::new(),
            db: vec![T::zero(); len * d_state],
            dc: vec![T::zero(); len * d_state],
        };
        let mut dh = vec![T::zero(); d_state];
        let mut a_next = vec![T::zero(); d_state];
        let mut gat = vec![T::zero(); d_state];
        let zero_row = vec![T::zero(); d_state];
        for i in ci * CHANNEL_CHUNK..((ci + 1) * CHANNEL_CHUNK).min(d_inner) {
            let h = &states[i].h;
            let decay = &states[i].decay;
            let arow = &s.a[i * d_state..(i + 1) * d_state];
            let mut du = vec![T::zero(); len];
            let mut ddelta = vec![T::zero(); len];
            let mut da = vec![T::zero(); d_state];
            let mut dd = T::zero();
            dh.iter_mut().for_each(|v| *v = T::zero());
            a_next.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let ut = s.u[t * d_inner + i];
                let dt = s.delta[t * d_inner + i];
                let gy = dy[t * d_inner + i];
                let row = t * d_state..(t + 1) * d_state;
                let (bt, ct, ht, at) = (&s.b[row.clone()], &s.c[row.clone()], &h[row.clone()], &decay[row.clone()]);
                let hprev = if t > 0 { &h[(t - 1) * d_state..t * d_state] } else { &zero_row[..] };
                let (dc, db) = (&mut out.dc[row.clone()], &mut out.db[row]);
                dd += gy * ut;
                for n in 0..d_state {
                    dh[n] = ct[n] * gy + a_next[n] * dh[n];
                    dc[n] += gy * ht[n];
                    db[n] += dh[n] * dt * ut;
                    gat[n] = dh[n] * hprev[n] * at[n];
                    da[n] += gat[n] * dt;
                    a_next[n] = at[n];
                }
                let mut gu = s.d[i] * gy;
                let mut gdelta = T::zero();
                for n in 0..d_state {
                    gdelta += gat[n] * arow[n] + dh[n] * bt[n] * ut;
                    gu += dh[n] * dt * bt[n];
                }
                du[t] = gu;
                ddelta[t] = gdelta;
            }
            out.du.push((i, du));
            out.ddelta.push((i, ddelta));
            out.da.push((i, da));
            out.dd.push((i, dd));
        }
        out
    });
    let mut du = vec![T::zero(); len * d_inner];
    let mut ddelta = vec![T::zero(); len * d_inner];
    let mut da = vec![T::zero(); d_inner * d_state];
    let mut dd = vec![T::zero(); d_inner];
    let mut db = vec![T::zero(); len * d_state];
    let mut dc = vec![T::zero(); len * d_state];
    for part in parts {
        for (i, col) in part.du {
            for t in 0..len {
                du[t * d_inner + i] = col[t];
            }
        }
        for (i, col) in part.ddelta {
            for t in 0..len {
                ddelta[t * d_inner + i] = col[t];
            }
        }
        for (i, row) in part.da {
            da[i * d_state..(i + 1) * d_state].copy_from_slice(&row);
        }
        for (i, v) in part.dd {
            dd[i] = v;
        }
        for (acc, v) in db.iter_mut().zip(&part.db) {
            *acc += *v;
        }
        for (acc, v) in dc.iter_mut().zip(&part.dc) {
            *acc += *v;
        }
    }
    vec![
        Some(Tensor::from_vec(vec![len, d_inner], du)),
        Some(Tensor::from_vec(vec![len, d_inner], ddelta)),
        Some(Tensor::from_vec(vec![d_inner, d_state], da)),
        Some(Tensor::from_vec(vec![len, d_state], db)),
        Some(Tensor::from_vec(vec![len, d_state], dc)),
        Some(Tensor::from_vec(vec![d_inner], dd)),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
}

impl MambaDims {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            d_state: 16,
            expand: 2,
            d_conv: 4,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MambaBlock {
    pub norm: ParamId,
    pub in_proj: Linear,
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: Linear,
    pub dims: MambaDims,
}

impl MambaBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, dims: MambaDims) -> Result<Self> {
        use rand::Rng;
        if dims.d_model == 0 || dims.d_state == 0 || dims.expand == 0 || dims.d_conv == 0 {
            return Err(Error::Config(format!("invalid mamba dimensions {dims:?}")));
        }
        let (dm, di, ds, r) = (dims.d_model, dims.d_inner(), dims.d_state, dims.dt_rank());
        let norm = b.ones("norm.weight", &[dm]);
        let in_proj = Linear::new(b, "in_proj", dm, 2 * di, false);
        let conv = b.fan_in("conv.weight", &[dims.d_conv, di], dims.d_conv);
        let conv_bias = b.zeros("conv.bias", &[di]);
        let x_proj = Linear::new(b, "x_proj", di, r + 2 * ds, false);
        let dt_w = b.uniform("dt_proj.weight", &[r, di], 1.0 / (r as f64).sqrt());
        // inverse softplus of step sizes drawn log-uniformly in [1e-3, 1e-1]
        let dt_bias: Vec<T> = (0..di)
            .map(|_| {
                let u: f64 = b.rng().random_range(0.0..1.0);
                let dt = (u * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp().max(1e-4);
                T::from_f64(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_b = b.tensor("dt_proj.bias", Tensor::from_vec(vec![di], dt_bias));
        let a_log = b.tensor(
            "a_log",
            Tensor::from_fn(vec![di, ds], |k| T::from_f64(((k % ds) + 1) as f64).ln()),
        );
        let d = b.ones("d", &[di]);
        let out_proj = Linear::new(b, "out_proj", di, dm, false);
        Ok(Self {
            norm,
            in_proj,
            conv,
            conv_bias,
            x_proj,
            dt_proj: Linear {
                weight: dt_w,
                bias: Some(dt_b),
            },
            a_log,
            d,
            out_proj,
            dims,
        })
    }

    /// Pre-norm residual block; causal by construction.
    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let (di, ds, r) = (self.dims.d_inner(), self.dims.d_state, self.dims.dt_rank());
        let xn = x.rms_norm(p.get(self.norm), crate::params::NORM_EPS)?;
        let xz = self.in_proj.forward(p, &xn)?;
        let u = xz
            .slice_cols(0, di)?
            .depthwise_conv1d(p.get(self.conv), Some(p.get(self.conv_bias)), true)?
            .silu();
        let z = xz.slice_cols(di, di)?;
        let proj = self.x_proj.forward(p, &u)?;
        let delta = self.dt_proj.forward(p, &proj.slice_cols(0, r)?)?.softplus();
        let bm = proj.slice_cols(r, ds)?;
        let cm = proj.slice_cols(r + ds, ds)?;
        let a = p.get(self.a_log).exp().neg();
        let y = u.selective_scan(&delta, &a, &bm, &cm, p.get(self.d))?;
        let y = y.mul(&z.silu())?;
        x.add(&self.out_proj.forward(p, &y)?)
    }
}

/// Two direction-opposed Mamba blocks whose outputs are added.
#[derive(Clone, Copy, Debug)]
pub struct BiMambaBlock {
    pub fwd: MambaBlock,
    pub bwd: MambaBlock,
}

impl BiMambaBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, dims: MambaDims) -> Result<Self> {
        Ok(Self {
            fwd: b.scoped("fwd", |b| MambaBlock::new(b, dims))?,
            bwd: b.scoped("bwd", |b| MambaBlock::new(b, dims))?,
        })
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let f = self.fwd.forward(p, x)?;
        let r = self.bwd.forward(p, &x.flip_rows())?.flip_rows();
        f.add(&r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Inst {
        u: Tensor<f64>,
        delta: Tensor<f64>,
        a: Tensor<f64>,
        b: Tensor<f64>,
        c: Tensor<f64>,
        d: Tensor<f64>,
    }

    fn instance(len: usize, di: usize, ds: usize, seed: u64) -> Inst {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |lo: f64, hi: f64, shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi));
        Inst {
            u: r(-1.0, 1.0, &[len, di]),
            delta: r(0.01, 1.0, &[len, di]),
            a: r(-2.0, -0.1, &[di, ds]),
            b: r(-1.0, 1.0, &[len, ds]),
            c: r(-1.0, 1.0, &[len, ds]),
            d: r(-1.0, 1.0, &[di]),
        }
    }

    /// Dense oracle written directly from the recurrence.
    fn oracle(x: &Inst) -> Vec<f64> {
        let (len, di, ds) = (x.u.rows(), x.u.cols(), x.a.cols());
        let mut h = vec![vec![0.0; ds]; di];
        let mut y = vec![0.0; len * di];
        for t in 0..len {
            for i in 0..di {
                let dt = x.delta.get(&[t, i]);
                let ut = x.u.get(&[t, i]);
                let mut acc = x.d.get(&[i]) * ut;
                for n in 0..ds {
                    h[i][n] = (dt * x.a.get(&[i, n])).exp() * h[i][n] + dt * x.b.get(&[t, n]) * ut;
                    acc += x.c.get(&[t, n]) * h[i][n];
                }
                y[t * di + i] = acc;
            }
        }
        y
    }

    type ScanFn = fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;

    fn scan(x: &Inst, f: ScanFn) -> Tensor<f64> {
        f(&x.u, &x.delta, &x.a, &x.b, &x.c, &x.d).unwrap()
    }

    #[test]
    fn zero_input_zero_output() {
        let mut x = instance(10, 3, 4, 1);
        x.u = Tensor::zeros(vec![10, 3]);
        assert!(scan(&x, selective_scan_seq).data().iter().all(|&v| v == 0.0));
        assert!(scan(&x, selective_scan_par).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let x = instance(1, 2, 3, 2);
        let y = scan(&x, selective_scan_seq);
        for i in 0..2 {
            let dt = x.delta.get(&[0, i]);
            let u = x.u.get(&[0, i]);
            let want: f64 = (0..3).map(|n| x.c.get(&[0, n]) * dt * x.b.get(&[0, n]) * u).sum::<f64>()
                + x.d.get(&[i]) * u;
            assert!((y.get(&[0, i]) - want).abs() < 1e-14);
        }
        assert_eq!(y, scan(&x, selective_scan_par));
    }

    #[test]
    fn sequential_matches_oracle() {
        let x = instance(64, 5, 7, 3);
        let y = scan(&x, selective_scan_seq);
        for (a, b) in y.data().iter().zip(oracle(&x)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn tree_scan_matches_sequential() {
        for (k, len) in [1usize, 2, 3, 5, 8, 31, 64, 100, 257].into_iter().enumerate() {
            let x = instance(len, 4, 6, 10 + k as u64);
            let (s, p) = (scan(&x, selective_scan_seq), scan(&x, selective_scan_par));
            for (a, b) in s.data().iter().zip(p.data()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-3), "len {len}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn blelloch_prefixes() {
        let mut x: Vec<(f64, f64)> = (0..8).map(|i| (0.5 + i as f64 * 0.1, i as f64)).collect();
        let orig = x.clone();
        blelloch_inclusive(&mut x);
        let mut acc = (1.0, 0.0);
        for (i, &pair) in orig.iter().enumerate() {
            acc = compose(acc, pair);
            assert!((x[i].0 - acc.0).abs() < 1e-12 && (x[i].1 - acc.1).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut x = instance(4, 2, 2, 5);
        x.delta.data_mut()[3] = f64::NAN;
        assert!(matches!(
            selective_scan_seq(&x.u, &x.delta, &x.a, &x.b, &x.c, &x.d),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn long_sequence_bounded() {
        let len = 100_000;
        let x = instance(len, 1, 4, 6);
        let y = scan(&x, selective_scan_seq);
        assert!(y.all_finite());
        assert!(y.max_abs() < 1e3);
    }

    #[test]
    fn scan_gradients() {
        let x = instance(6, 3, 4, 7);
        let vars = |x: &Inst| {
            [&x.u, &x.delta, &x.a, &x.b, &x.c, &x.d].map(|t| Var::constant(t.clone()))
        };
        for which in 0..6 {
            let base = vars(&x);
            let target = [&x.u, &x.delta, &x.a, &x.b, &x.c, &x.d][which].clone();
            let r = grad_check(
                |v| {
                    let mut args = base.clone();
                    args[which] = v.clone();
                    args[0].selective_scan(&args[1], &args[2], &args[3], &args[4], &args[5])
                },
                &target,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "input {which}: {r:?}");
        }
    }

    fn block(seed: u64) -> (MambaBlock, crate::params::ParamStore<f64>) {
        let mut b = ParamBuilder::new(seed);
        let dims = MambaDims {
            d_model: 8,
            d_state: 4,
            expand: 2,
            d_conv: 4,
        };
        let blk = MambaBlock::new(&mut b, dims).unwrap();
        (blk, b.finish())
    }

    #[test]
    fn block_parameter_count() {
        let mut b = ParamBuilder::<f32>::new(0);
        MambaBlock::new(&mut b, MambaDims::new(256)).unwrap();
        assert_eq!(b.finish().count(), 438_016);
    }

    #[test]
    fn block_is_causal_and_shape_preserving() {
        let (blk, s) = block(1);
        let p = s.bind(false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(vec![12, 8], |_| rng.random_range(-1.0..1.0));
        let base = blk.forward(&p, &Var::constant(x.clone())).unwrap();
        for t in 0..12 {
            let mut xp = x.clone();
            xp.data_mut()[t * 8 + 3] += 1.0;
            let y = blk.forward(&p, &Var::constant(xp)).unwrap();
            for r in 0..t {
                assert_eq!(y.value().row(r), base.value().row(r));
            }
        }
        for len in [1, 50] {
            let x = Var::constant(Tensor::zeros(vec![len, 8]));
            assert_eq!(blk.forward(&p, &x).unwrap().shape(), &[len, 8]);
        }
    }

    #[test]
    fn bimamba_is_sum_of_branches_and_noncausal() {
        let mut b = ParamBuilder::<f64>::new(3);
        let dims = MambaDims {
            d_model: 8,
            d_state: 4,
            expand: 2,
            d_conv: 4,
        };
        let bi = BiMambaBlock::new(&mut b, dims).unwrap();
        let p = b.finish().bind(false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(vec![10, 8], |_| rng.random_range(-1.0..1.0));
        let xv = Var::constant(x.clone());
        let y = bi.forward(&p, &xv).unwrap();
        let f = bi.fwd.forward(&p, &xv).unwrap();
        let r = bi.bwd.forward(&p, &xv.flip_rows()).unwrap().flip_rows();
        assert_eq!(y.value(), f.add(&r).unwrap().value());
        let mut xp = x.clone();
        xp.data_mut()[9 * 8] += 1.0;
        let y2 = bi.forward(&p, &Var::constant(xp)).unwrap();
        assert_ne!(y2.value().row(0), y.value().row(0));
    }

    #[test]
    fn block_gradient_check() {
        let (blk, s) = block(4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_fn(vec![6, 8], |_| rng.random_range(-1.0..1.0));
        let p = s.bind(false);
        let r = grad_check(|x| blk.forward(&p, x), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
        for id in [blk.a_log, blk.dt_proj.weight, blk.in_proj.weight, blk.conv] {
            let r = grad_check(
                |w| {
                    let mut p = s.bind(false);
                    p.replace(id, w.clone());
                    blk.forward(&p, &Var::constant(x.clone()))
                },
                s.get(id),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-3, "{}: {r:?}", s.name(id));
        }
    }
}
