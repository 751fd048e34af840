//! Reverse-mode differentiation on a thread-local tape.
//!
//! [`Var`] implements [`Scalar`], so any generic routine in the crate can be
//! differentiated by running it on `Var` inside [`with_tape`] and calling
//! [`gradient`]. Nodes store their parents and local partials; multi-output
//! kernels (dense networks, symmetric matrix functions) register a single
//! custom backward closure instead of scalar chains.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};
use std::sync::Once;

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SymFn};
use crate::nn::{self, NetworkParams};
use crate::scalar::{values, Scalar};

const CONST: u32 = u32::MAX;

type Backward = Box<dyn FnOnce(&[f64], &mut [f64])>;

struct Custom {
    start: u32,
    len: u32,
    backward: Backward,
}

#[derive(Default)]
struct Tape {
    active: bool,
    ends: Vec<u32>,
    edges: Vec<(u32, f64)>,
    customs: Vec<Custom>,
}

impl Tape {
    fn clear(&mut self) {
        self.ends.clear();
        self.edges.clear();
        self.customs.clear();
    }

    #[inline]
    fn push(&mut self, parents: &[(u32, f64)]) -> u32 {
        for &(p, d) in parents {
            if p != CONST {
                self.edges.push((p, d));
            }
        }
        self.ends.push(self.edges.len() as u32);
        (self.ends.len() - 1) as u32
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// Runs `f` on a fresh tape owned by the current thread.
///
/// Panics when nested.
pub fn with_tape<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        assert!(!t.active, "nested tape sessions are not supported");
        t.clear();
        t.active = true;
    });
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            TAPE.with(|t| {
                let mut t = t.borrow_mut();
                t.clear();
                t.active = false;
            });
        }
    }
    let _reset = Reset;
    f()
}

/// Number of nodes recorded so far on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().ends.len())
}

/// Adjoints of every node with respect to `output`.
pub fn gradient(output: Var) -> Vec<f64> {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let n = t.ends.len();
        let mut adj = vec![0.0; n];
        if output.idx == CONST {
            return adj;
        }
        adj[output.idx as usize] = 1.0;
        let customs = std::mem::take(&mut t.customs);
        let mut customs: Vec<Custom> = customs;
        for i in (0..n).rev() {
            let a = adj[i];
            if a != 0.0 {
                let lo = if i == 0 { 0 } else { t.ends[i - 1] as usize };
                let hi = t.ends[i] as usize;
                for &(p, d) in &t.edges[lo..hi] {
                    adj[p as usize] += a * d;
                }
            }
            if let Some(c) = customs.last() {
                if c.start as usize == i {
                    let c = customs.pop().unwrap();
                    let (lower, upper) = adj.split_at_mut(i);
                    let out_adj = &upper[..c.len as usize];
                    if out_adj.iter().any(|&v| v != 0.0) {
                        (c.backward)(out_adj, lower);
                    }
                }
            }
        }
        adj
    })
}

/// Registers `outputs` as a block of nodes whose backward pass is `backward`.
///
/// `backward` receives the adjoints of the block and the adjoint array of
/// every earlier node, into which it accumulates.
pub fn custom(outputs: &[f64], backward: impl FnOnce(&[f64], &mut [f64]) + 'static) -> Vec<Var> {
    if outputs.is_empty() {
        return Vec::new();
    }
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let start = t.ends.len() as u32;
        let vars = outputs
            .iter()
            .map(|&v| Var { idx: t.push(&[]), val: v })
            .collect();
        t.customs.push(Custom { start, len: outputs.len() as u32, backward: Box::new(backward) });
        vars
    })
}

/// A scalar recorded on the current thread's tape.
#[derive(Clone, Copy)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    /// A new independent variable.
    pub fn leaf(val: f64) -> Var {
        let idx = TAPE.with(|t| t.borrow_mut().push(&[]));
        Var { idx, val }
    }

    /// A constant that never receives an adjoint.
    pub const fn constant(val: f64) -> Var {
        Var { idx: CONST, val }
    }

    /// Tape index, or `None` for constants.
    pub fn index(self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == CONST {
            return Var::constant(val);
        }
        let idx = TAPE.with(|t| t.borrow_mut().push(&[(self.idx, d)]));
        Var { idx, val }
    }

    #[inline]
    fn binary(self, other: Var, val: f64, da: f64, db: f64) -> Var {
        if self.idx == CONST && other.idx == CONST {
            return Var::constant(val);
        }
        let idx = TAPE.with(|t| t.borrow_mut().push(&[(self.idx, da), (other.idx, db)]));
        Var { idx, val }
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.val, f)
    }
}

impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Rem for Var {
    type Output = Var;
    fn rem(self, rhs: Var) -> Var {
        let r = self.val % rhs.val;
        self.binary(rhs, r, 1.0, -(self.val / rhs.val).trunc())
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for Var {
            #[inline]
            fn $m(&mut self, rhs: Var) {
                *self = *self $op rhs;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

impl Sum for Var {
    fn sum<I: Iterator<Item = Var>>(iter: I) -> Var {
        iter.fold(Var::constant(0.0), |a, b| a + b)
    }
}

impl Zero for Var {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.val == 0.0
    }
}

impl One for Var {
    fn one() -> Self {
        Var::constant(1.0)
    }
}

impl Num for Var {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> std::result::Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Var::constant)
    }
}

impl ToPrimitive for Var {
    fn to_i64(&self) -> Option<i64> {
        self.val.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.val.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.val)
    }
}

impl NumCast for Var {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Var::constant)
    }
}

impl FromPrimitive for Var {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Var::constant(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Var::constant(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Var::constant(n))
    }
}

macro_rules! float_consts {
    ($($name:ident),*) => {
        impl FloatConst for Var {
            $(fn $name() -> Self { Var::constant(<f64 as FloatConst>::$name()) })*
        }
    };
}
float_consts!(
    E, FRAC_1_PI, FRAC_1_SQRT_2, FRAC_2_PI, FRAC_2_SQRT_PI, FRAC_PI_2, FRAC_PI_3, FRAC_PI_4,
    FRAC_PI_6, FRAC_PI_8, LN_10, LN_2, LOG10_E, LOG2_E, PI, SQRT_2
);

impl Float for Var {
    fn nan() -> Self {
        Var::constant(f64::NAN)
    }
    fn infinity() -> Self {
        Var::constant(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Var::constant(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Var::constant(-0.0)
    }
    fn min_value() -> Self {
        Var::constant(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Var::constant(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Var::constant(f64::EPSILON)
    }
    fn max_value() -> Self {
        Var::constant(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.val.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.val.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.val.is_finite()
    }
    fn is_normal(self) -> bool {
        self.val.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.val.classify()
    }
    fn floor(self) -> Self {
        Var::constant(self.val.floor())
    }
    fn ceil(self) -> Self {
        Var::constant(self.val.ceil())
    }
    fn round(self) -> Self {
        Var::constant(self.val.round())
    }
    fn trunc(self) -> Self {
        Var::constant(self.val.trunc())
    }
    fn fract(self) -> Self {
        self.unary(self.val.fract(), 1.0)
    }
    fn abs(self) -> Self {
        let s = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.val.abs(), s)
    }
    fn signum(self) -> Self {
        Var::constant(self.val.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.val.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.val.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.val;
        self.unary(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 { 0.0 } else { n as f64 * self.val.powi(n - 1) };
        self.unary(self.val.powi(n), d)
    }
    fn powf(self, n: Self) -> Self {
        let v = self.val.powf(n.val);
        let da = if n.val == 0.0 { 0.0 } else { n.val * self.val.powf(n.val - 1.0) };
        let db = if self.val > 0.0 { v * self.val.ln() } else { 0.0 };
        self.binary(n, v, da, db)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.val.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.unary(self.val.log2(), 1.0 / (self.val * std::f64::consts::LN_2))
    }
    fn log10(self) -> Self {
        self.unary(self.val.log10(), 1.0 / (self.val * std::f64::consts::LN_10))
    }
    fn max(self, other: Self) -> Self {
        if self.val >= other.val || other.val.is_nan() {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.val <= other.val || other.val.is_nan() {
            self
        } else {
            other
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.val <= other.val {
            Var::constant(0.0)
        } else {
            self - other
        }
    }
    fn cbrt(self) -> Self {
        let c = self.val.cbrt();
        self.unary(c, 1.0 / (3.0 * c * c))
    }
    fn hypot(self, other: Self) -> Self {
        let h = self.val.hypot(other.val);
        if h == 0.0 {
            return self.binary(other, 0.0, 0.0, 0.0);
        }
        self.binary(other, h, self.val / h, other.val / h)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn tan(self) -> Self {
        let t = self.val.tan();
        self.unary(t, 1.0 + t * t)
    }
    fn asin(self) -> Self {
        self.unary(self.val.asin(), 1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn acos(self) -> Self {
        self.unary(self.val.acos(), -1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn atan(self) -> Self {
        self.unary(self.val.atan(), 1.0 / (1.0 + self.val * self.val))
    }
    fn atan2(self, other: Self) -> Self {
        let r2 = self.val * self.val + other.val * other.val;
        let (da, db) = if r2 == 0.0 { (0.0, 0.0) } else { (other.val / r2, -self.val / r2) };
        self.binary(other, self.val.atan2(other.val), da, db)
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.unary(self.val.exp_m1(), self.val.exp())
    }
    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    fn sinh(self) -> Self {
        self.unary(self.val.sinh(), self.val.cosh())
    }
    fn cosh(self) -> Self {
        self.unary(self.val.cosh(), self.val.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.unary(self.val.asinh(), 1.0 / (self.val * self.val + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.unary(self.val.acosh(), 1.0 / (self.val * self.val - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.unary(self.val.atanh(), 1.0 / (1.0 - self.val * self.val))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.val.integer_decode()
    }
}

static GAP_WARNING: Once = Once::new();

/// Divided difference `(f(a) - f(b)) / (a - b)`, with the derivative on the diagonal.
fn divided_difference(f: SymFn, a: f64, b: f64) -> f64 {
    let gap = a - b;
    let tiny = 1e-8 * a.abs().max(b.abs()).max(1.0);
    if gap.abs() < tiny {
        if gap != 0.0 {
            GAP_WARNING.call_once(|| {
                log::warn!("eigenvalue gap below 1e-8 in a matrix-function derivative; using the derivative limit")
            });
        }
        let mid = 0.5 * (a + b);
        return match f {
            SymFn::Exp => mid.exp(),
            SymFn::Log => 1.0 / mid,
        };
    }
    match f {
        SymFn::Exp => b.exp() * gap.exp_m1() / gap,
        SymFn::Log => (gap / b).ln_1p() / gap,
    }
}

impl Scalar for Var {
    #[inline]
    fn c(x: f64) -> Self {
        Var::constant(x)
    }

    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        let val = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x.val * y.val);
        let mut parents = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            if x.idx != CONST {
                parents.push((x.idx, y.val));
            }
            if y.idx != CONST {
                parents.push((y.idx, x.val));
            }
        }
        if parents.is_empty() {
            return Var::constant(val);
        }
        let idx = TAPE.with(|t| t.borrow_mut().push(&parents));
        Var { idx, val }
    }

    fn dense_network(net: &NetworkParams<Self>, input: &[Self], rows: usize) -> Result<Vec<Self>> {
        let net64 = net.map(|p| p.val);
        let (out, tape) = nn::net_forward(&net64, &values(input), rows)?;
        let mut param_idx = Vec::with_capacity(net64.param_count());
        net.for_each_param(&mut |p| param_idx.push(p.idx));
        let input_idx: Vec<u32> = input.iter().map(|v| v.idx).collect();
        if input_idx.iter().chain(&param_idx).all(|&i| i == CONST) {
            return Ok(out.into_iter().map(Var::constant).collect());
        }
        Ok(custom(&out, move |out_adj, adj| {
            let grads = nn::net_backward(&tape, &net64, out_adj)
                .expect("network tape recorded against the same parameters");
            for (&i, g) in param_idx.iter().zip(&grads.params) {
                if i != CONST {
                    adj[i as usize] += g;
                }
            }
            for (&i, g) in input_idx.iter().zip(&grads.input) {
                if i != CONST {
                    adj[i as usize] += g;
                }
            }
        }))
    }

    fn sym_function(a: &Mat<Self>, f: SymFn) -> Result<Mat<Self>> {
        let n = a.rows();
        let a64 = a.map(|v| v.val);
        let (lambda, u) = linalg::sym_eigen(&a64)?;
        if f == SymFn::Log && lambda.iter().any(|&l| l <= 0.0) {
            return Err(Error::Domain("matrix logarithm of a non-positive-definite matrix".into()));
        }
        let fl: Vec<f64> = lambda
            .iter()
            .map(|&l| match f {
                SymFn::Exp => l.exp(),
                SymFn::Log => l.ln(),
            })
            .collect();
        let out = linalg::reconstruct(&u, &fl);
        let input_idx: Vec<u32> = a.data().iter().map(|v| v.idx).collect();
        if input_idx.iter().all(|&i| i == CONST) {
            return Ok(out.map(|&v| Var::constant(v)));
        }
        let vars = custom(out.data(), move |out_adj, adj| {
            // Ā = U (K ∘ (Uᵀ sym(Ḡ) U)) Uᵀ
            let g = Mat::from_vec(n, n, out_adj.to_vec());
            let gs = g.add(&g.transpose()).scale(0.5);
            let mut inner = u.transpose().matmul(&gs).matmul(&u);
            for i in 0..n {
                for j in 0..n {
                    let k = divided_difference(f, lambda[i], lambda[j]);
                    inner[(i, j)] *= k;
                }
            }
            let abar = u.matmul(&inner).matmul(&u.transpose());
            for (&idx, &g) in input_idx.iter().zip(abar.data()) {
                if idx != CONST {
                    adj[idx as usize] += g;
                }
            }
        });
        Ok(Mat::from_vec(n, n, vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(f: impl Fn(&[Var]) -> Var, at: &[f64]) -> (f64, Vec<f64>) {
        with_tape(|| {
            let xs: Vec<Var> = at.iter().map(|&v| Var::leaf(v)).collect();
            let y = f(&xs);
            let adj = gradient(y);
            (y.value(), xs.iter().map(|x| adj[x.index().unwrap()]).collect())
        })
    }

    #[test]
    fn product_rule() {
        let (v, g) = grad_of(|x| x[0] * x[1] + x[0].sin(), &[2.0, 3.0]);
        assert_eq!(v, 6.0 + 2f64.sin());
        assert!((g[0] - (3.0 + 2f64.cos())).abs() < 1e-15);
        assert_eq!(g[1], 2.0);
    }

    #[test]
    fn dot_node_matches_chain() {
        let f1 = |x: &[Var]| Var::dot(&x[..2], &x[2..]);
        let f2 = |x: &[Var]| x[0] * x[2] + x[1] * x[3];
        let at = [1.5, -2.0, 0.25, 4.0];
        assert_eq!(grad_of(f1, &at), grad_of(f2, &at));
    }

    #[test]
    fn constants_do_not_grow_tape() {
        with_tape(|| {
            let a = Var::constant(2.0);
            let b = a * a + a.exp();
            assert_eq!(tape_len(), 0);
            assert!(b.index().is_none());
        });
    }

    #[test]
    fn custom_block_backward() {
        let (_, g) = grad_of(
            |x| {
                let (a, b) = (x[0].value(), x[1].value());
                let (i0, i1) = (x[0].index().unwrap(), x[1].index().unwrap());
                let out = custom(&[a * b, a + b], move |oa, adj| {
                    adj[i0] += oa[0] * b + oa[1];
                    adj[i1] += oa[0] * a + oa[1];
                });
                out[0] * Var::constant(2.0) + out[1]
            },
            &[3.0, 5.0],
        );
        assert_eq!(g, vec![11.0, 7.0]);
    }

    #[test]
    fn tape_is_reset_between_sessions() {
        with_tape(|| {
            Var::leaf(1.0);
        });
        with_tape(|| assert_eq!(tape_len(), 0));
    }
}
