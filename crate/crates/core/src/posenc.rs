//! Absolute sinusoidal and rotary positional encodings.

use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PeKind {
    #[default]
    None,
    /// Added once to the projected input embedding.
    Sinusoidal,
    /// Applied to queries and keys inside every attention head.
    Rotary,
}

impl FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PeKind::None),
            "sin" | "sinpe" | "sinusoidal" => Ok(PeKind::Sinusoidal),
            "rope" | "rotary" => Ok(PeKind::Rotary),
            other => Err(Error::Config(format!("unknown pe `{other}` (none|sin|rope)"))),
        }
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeKind::None => "none",
            PeKind::Sinusoidal => "sin",
            PeKind::Rotary => "rope",
        })
    }
}

/// `[len, d_model]` table with `sin` on even and `cos` on odd dimensions,
/// frequency `BASE^(-2i/d_model)` for the pair `(2i, 2i+1)`.
pub fn sinpe<T: Real>(len: usize, d_model: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(len * d_model);
    for p in 0..len {
        for j in 0..d_model {
            let i = j / 2;
            let angle = p as f64 / BASE.powf(2.0 * i as f64 / d_model as f64);
            out.push(T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(vec![len, d_model], out)
}

/// Per-position `(cos, sin)` tables of shape `[len, d_head/2]`.
fn rope_tables(len: usize, d_head: usize) -> (Vec<f64>, Vec<f64>) {
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for p in 0..len {
        for i in 0..half {
            let theta = BASE.powf(-2.0 * i as f64 / d_head as f64);
            let a = p as f64 * theta;
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    (cos, sin)
}

/// Rotates each `(2i, 2i+1)` coordinate pair of every head by `±p·θ_i`.
fn rotate<T: Real>(x: &[T], len: usize, heads: usize, d_head: usize, tables: &(Vec<f64>, Vec<f64>), inverse: bool) -> Vec<T> {
    let half = d_head / 2;
    let width = heads * d_head;
    let mut out = x.to_vec();
    for p in 0..len {
        for h in 0..heads {
            let base = p * width + h * d_head;
            for i in 0..half {
                let c = T::from_f64(tables.0[p * half + i]);
                let mut s = T::from_f64(tables.1[p * half + i]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (x[base + 2 * i], x[base + 2 * i + 1]);
                out[base + 2 * i] = a * c - b * s;
                out[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

fn check_rope_width(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {width} not divisible into {heads} heads")));
    }
    let d_head = width / heads;
    if !d_head.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary encoding needs an even head size, got {d_head}")));
    }
    Ok(d_head)
}

/// Rotates single-head query and key matrices `[len, d_head]`.
pub fn rope_apply<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut rotated = Vec::with_capacity(2);
    for x in [q, k] {
        let d_head = check_rope_width(x.cols(), 1)?;
        let len = x.rows();
        let tables = rope_tables(len, d_head);
        rotated.push(Tensor::from_vec(
            x.shape().to_vec(),
            rotate(x.data(), len, 1, d_head, &tables, false),
        ));
    }
    let k = rotated.pop().unwrap();
    Ok((rotated.pop().unwrap(), k))
}

impl<T: Real> Var<T> {
    /// Rotary encoding of a `[len, heads·d_head]` value, head by head.
    pub fn rope(&self, heads: usize) -> Result<Var<T>> {
        let x = self.value();
        let d_head = check_rope_width(x.cols(), heads)?;
        let len = x.rows();
        let tables = rope_tables(len, d_head);
        let value = Tensor::from_vec(x.shape().to_vec(), rotate(x.data(), len, heads, d_head, &tables, false));
        Ok(Var::from_op(
            "rope",
            value,
            &[self],
            Box::new(move |g, _, _| {
                vec![Some(Tensor::from_vec(
                    g.shape().to_vec(),
                    rotate(g.data(), len, heads, d_head, &tables, true),
                ))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn position_zero_pattern() {
        let pe = sinpe::<f64>(3, 8);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn range_and_closed_form() {
        let pe = sinpe::<f64>(1000, 256);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for p in [1usize, 17, 999] {
            for j in [0usize, 1, 2, 3, 100, 255] {
                let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / 256.0);
                let want = if j % 2 == 0 {
                    (p as f64 * freq).sin()
                } else {
                    (p as f64 * freq).cos()
                };
                assert!((pe.get(&[p, j]) - want).abs() < 1e-12);
            }
        }
        assert_eq!(sinpe::<f32>(50, 16), sinpe::<f32>(50, 16));
    }

    #[test]
    fn rope_identity_at_zero_and_isometric() {
        let q = rand_tensor(&[20, 8], 1);
        let k = rand_tensor(&[20, 8], 2);
        let (qr, _) = rope_apply(&q, &k).unwrap();
        assert_eq!(qr.row(0), q.row(0));
        for t in 0..20 {
            let n0: f64 = q.row(t).iter().map(|v| v * v).sum();
            let n1: f64 = qr.row(t).iter().map(|v| v * v).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offset() {
        let len = 256;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let qv: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        // the same q and k vectors placed at every position
        let q = Tensor::from_fn(vec![len, 16], |i| qv[i % 16]);
        let k = Tensor::from_fn(vec![len, 16], |i| kv[i % 16]);
        let (qr, kr) = rope_apply(&q, &k).unwrap();
        let score = |i: usize, j: usize| -> f64 { qr.row(i).iter().zip(kr.row(j)).map(|(a, b)| a * b).sum() };
        for (i, j) in [(0, 0), (10, 3), (3, 10), (100, 50), (200, 245)] {
            if i + 5 < len && j + 5 < len {
                assert!((score(i, j) - score(i + 5, j + 5)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn odd_head_size_rejected() {
        let q = Tensor::<f32>::zeros(vec![4, 5]);
        assert!(matches!(rope_apply(&q, &q), Err(Error::Config(_))));
        assert!(Var::constant(Tensor::<f32>::zeros(vec![4, 12])).rope(4).is_err());
    }

    #[test]
    fn rope_gradient() {
        let x = rand_tensor(&[5, 8], 4);
        let r = grad_check(|x| x.rope(2), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("sin".parse::<PeKind>().unwrap(), PeKind::Sinusoidal);
        assert_eq!("rope".parse::<PeKind>().unwrap(), PeKind::Rotary);
        assert!("alibi".parse::<PeKind>().is_err());
    }
}
