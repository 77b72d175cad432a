//! Dense f32 tensors, a tape-based reverse-mode autodiff engine and AdamW.
//!
//! Everything is row-major. The tape records each op with the inputs it
//! needs for its backward pass; [`Tape::backward`] replays it in reverse.
//! Parameters live in a [`ParamSet`] and are borrowed onto a fresh tape for
//! every forward pass, so gradients flow back by [`ParamId`].

mod adamw;
mod gradcheck;
mod tape;
#[cfg(test)]
mod tape_tests;

pub use adamw::{adamw_update, AdamW, AdamWConfig, AdamWState, ADAMW_EPS};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{AttentionDims, ConvGeometry, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Normal(0, std) initialisation.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Box-Muller; kept local so initialisation does not depend on a
/// distribution crate's sampling algorithm.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = true;
        tensor.grad = Some(vec![0.0; tensor.data.len()]);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace the data of every tensor from `other`, matching by name.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in named {
            let Some(id) = self.find(name) else {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            };
            let dst = &mut self.tensors[id.0];
            if dst.shape != t.shape {
                return Err(Error::Dimension {
                    op: "load_from",
                    left: dst.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            dst.data.copy_from_slice(&t.data);
        }
        if let Some(missing) = self
            .names
            .iter()
            .find(|n| !named.iter().any(|(m, _)| m == *n))
        {
            return Err(Error::Format(format!("missing tensor `{missing}`")));
        }
        Ok(())
    }
}

impl ParamSet {
    /// Borrow every parameter onto `tape`; the returned vars are indexed by
    /// [`ParamId`].
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, f32>) -> Vec<Var> {
        (0..self.len()).map(|i| tape.param(self, ParamId(i))).collect()
    }

    /// Add gradients collected from a tape into the grad buffers.
    pub fn add_grads(&mut self, grads: Vec<(ParamId, Vec<f32>)>) {
        for (id, g) in grads {
            let t = &mut self.tensors[id.0];
            match t.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
    }

    /// Copy every parameter onto a tape of another float type as a
    /// gradient-tracked leaf. Used by gradient checks.
    pub fn bind_copy<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let data = t.data.iter().map(|&v| T::lit(v as f64)).collect();
                tape.input(t.shape.clone(), data, true).expect("parameter shape is consistent")
            })
            .collect()
    }
}

/// Float types the tape can run on. Training uses `f32`; `f64` exists so
/// gradient checks can difference the exact same code without f32 rounding
/// noise.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + std::iter::Sum + std::fmt::Debug + Default + Send + Sync + 'static
{
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n`, `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c (+)= op(a) · op(b)` where `op` optionally transposes. `a` is `m×k`
/// after the op, `b` is `k×n` after the op.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; strides describe in-bounds views of
    // row-major m×k / k×n / m×n buffers.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Row-wise softmax of `logits / tau` over the trailing dimension `k`.
pub fn softmax_with_temperature<T: Scalar>(logits: &[T], k: usize, tau: f32) -> Result<Vec<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive and finite, got {tau}"
        )));
    }
    if k == 0 || logits.len() % k != 0 {
        return Err(Error::Shape(format!(
            "softmax: {} logits do not split into rows of {k}",
            logits.len()
        )));
    }
    let mut out = vec![T::zero(); logits.len()];
    let tau = T::lit(tau as f64);
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        softmax_row(row, tau, dst);
    }
    Ok(out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T], tau: T, dst: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
    let mut sum = T::zero();
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v / tau - max).exp();
        sum = sum + *d;
    }
    let inv = T::one() / sum;
    dst.iter_mut().for_each(|d| *d = *d * inv);
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_with_temperature(&[0.0f32, 0.0, 0.0], 3, 1.0).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let p = softmax_with_temperature(&[10.0f32, 0.0], 2, 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-4 && (p[1] - 0.5).abs() < 1e-4);
        let p = softmax_with_temperature(&[1.0f32, 2.0, 3.0], 3, 1.0).unwrap();
        for (v, want) in p.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((v - want).abs() < 1e-4, "{v} vs {want}");
        }
        assert!(matches!(
            softmax_with_temperature(&[1.0f32], 1, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(softmax_with_temperature(&[1.0f32], 1, -2.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0f32), 0.0);
        assert!((gelu(10.0f32) - 10.0).abs() < 1e-5);
        assert!((gelu(1.0f32) - 0.8412).abs() < 1e-3);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(3.0).len(), 1);
    }
}
