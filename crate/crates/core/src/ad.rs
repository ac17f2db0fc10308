//! Reverse-mode automatic differentiation over scalar expression graphs.
//!
//! A [`Tape`] is an append-only Wengert list: every arithmetic operation on a
//! [`Var`] pushes one node recording the operation kind, its parent indices,
//! and the computed value. Gradients come from a single reverse sweep that
//! visits each node exactly once in reverse index order.
//!
//! Three consumers drive the design:
//!
//! * plain gradients ([`Recording::gradient`], [`gradient`], [`jacobian`]),
//! * cheap re-evaluation of a fixed graph at new inputs
//!   ([`Recording::replay`]) — the NLP solver records its Lagrangian once per
//!   solve and replays it every iteration, which is valid because every
//!   function stored in this crate is straight-line (data-dependent branches
//!   go through [`Var::min`]/[`Var::max`]/[`select`], whose branch decisions
//!   are re-taken on replay),
//! * gradients *as graphs* ([`Recording::gradient_graph`]) — the backward
//!   sweep re-emitted onto a host tape, which is how second derivatives and
//!   unrolled-solver sensitivities are obtained (reverse over reverse).
//!
//! A tape is single-writer and not `Sync`; distinct tapes are independent.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use thiserror::Error;

use crate::linalg::Mat;
use crate::math;

/// Errors surfaced when recording or differentiating an expression graph.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum AdError {
    /// A primitive was applied outside its domain (e.g. `ln` of a
    /// non-positive number). Carries the offending primitive and argument.
    #[error("domain error: {op}({arg}) is undefined")]
    Domain { op: &'static str, arg: f64 },
    /// A recorded output or gradient entry is NaN or infinite.
    #[error("non-finite value at tape node {index}")]
    NonFinite { index: usize },
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    /// x + c
    AddC(u32, f64),
    /// c - x
    CSub(f64, u32),
    /// x * c
    MulC(u32, f64),
    /// x / c
    DivC(u32, f64),
    /// c / x
    CDiv(f64, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Sin(u32),
    Cos(u32),
    Tanh(u32),
    Sqrt(u32),
    Powf(u32, f64),
    Powi(u32, i32),
    /// Left argument wins ties.
    Min(u32, u32),
    /// Left argument wins ties.
    Max(u32, u32),
    /// Select(c, a, b): a if c >= 0, else b. Not differentiated through c.
    Select(u32, u32, u32),
    Abs(u32),
}

/// Recording context for reverse-mode differentiation.
///
/// Nodes are topologically ordered by construction: parents always have
/// strictly smaller indices than children.
#[derive(Default)]
pub struct Tape {
    ops: RefCell<Vec<Op>>,
    vals: RefCell<Vec<f64>>,
    fault: Cell<Option<AdError>>,
}

/// One scalar node on a [`Tape`]. Cheap to copy; arithmetic on `Var`s pushes
/// nodes onto the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node intended as a differentiation input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// A leaf node holding a constant. Identical to [`Tape::var`] except in
    /// intent; its adjoint is simply never read.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// First domain fault recorded on this tape, if any.
    pub fn fault(&self) -> Option<AdError> {
        self.fault.get()
    }

    fn push(&self, op: Op, val: f64) -> Var<'_> {
        let mut ops = self.ops.borrow_mut();
        let idx = ops.len() as u32;
        ops.push(op);
        self.vals.borrow_mut().push(val);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    fn set_fault(&self, op: &'static str, arg: f64) {
        if self.fault.get().is_none() {
            self.fault.set(Some(AdError::Domain { op, arg }));
        }
    }

    fn same_tape(&self, other: &Tape) {
        assert!(
            core::ptr::eq(self, other),
            "variables from different tapes cannot be combined"
        );
    }

    /// Reverse sweep from `output`: adjoints of every node with index
    /// `<= output`. Each node is visited exactly once, in reverse order.
    pub fn backward(&self, output: Var<'_>) -> Adjoints {
        self.same_tape(output.tape);
        let ops = self.ops.borrow();
        let vals = self.vals.borrow();
        let out = output.idx as usize;
        let mut adj = vec![0.0f64; out + 1];
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match ops[i] {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += a;
                }
                Op::Sub(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] -= a;
                }
                Op::Mul(x, y) => {
                    adj[x as usize] += a * vals[y as usize];
                    adj[y as usize] += a * vals[x as usize];
                }
                Op::Div(x, y) => {
                    adj[x as usize] += a / vals[y as usize];
                    adj[y as usize] -= a * vals[i] / vals[y as usize];
                }
                Op::AddC(x, _) => adj[x as usize] += a,
                Op::CSub(_, x) => adj[x as usize] -= a,
                Op::MulC(x, c) => adj[x as usize] += a * c,
                Op::DivC(x, c) => adj[x as usize] += a / c,
                Op::CDiv(_, x) => adj[x as usize] -= a * vals[i] / vals[x as usize],
                Op::Neg(x) => adj[x as usize] -= a,
                Op::Exp(x) => adj[x as usize] += a * vals[i],
                Op::Ln(x) => adj[x as usize] += a / vals[x as usize],
                Op::Sin(x) => adj[x as usize] += a * math::cos(vals[x as usize]),
                Op::Cos(x) => adj[x as usize] -= a * math::sin(vals[x as usize]),
                Op::Tanh(x) => adj[x as usize] += a * (1.0 - vals[i] * vals[i]),
                Op::Sqrt(x) => adj[x as usize] += a / (vals[i] * 2.0),
                Op::Powf(x, p) => {
                    adj[x as usize] += a * p * math::powf(vals[x as usize], p - 1.0);
                }
                Op::Powi(x, k) => {
                    adj[x as usize] += a * (k as f64) * math::powi(vals[x as usize], k - 1);
                }
                Op::Min(x, y) => {
                    if vals[x as usize] <= vals[y as usize] {
                        adj[x as usize] += a;
                    } else {
                        adj[y as usize] += a;
                    }
                }
                Op::Max(x, y) => {
                    if vals[x as usize] >= vals[y as usize] {
                        adj[x as usize] += a;
                    } else {
                        adj[y as usize] += a;
                    }
                }
                Op::Select(c, x, y) => {
                    if vals[c as usize] >= 0.0 {
                        adj[x as usize] += a;
                    } else {
                        adj[y as usize] += a;
                    }
                }
                Op::Abs(x) => {
                    if vals[x as usize] >= 0.0 {
                        adj[x as usize] += a;
                    } else {
                        adj[x as usize] -= a;
                    }
                }
            }
        }
        Adjoints { adj }
    }
}

/// Result of a numeric backward sweep.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    /// Adjoint (partial derivative of the seeded output) of `v`.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj.get(v.idx as usize).copied().unwrap_or(0.0)
    }

    fn wrt_index(&self, idx: u32) -> f64 {
        self.adj.get(idx as usize).copied().unwrap_or(0.0)
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.val
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Node index on the owning tape.
    pub fn index(self) -> usize {
        self.idx as usize
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.push(Op::Exp(self.idx), math::exp(self.val))
    }

    pub fn ln(self) -> Var<'t> {
        if self.val <= 0.0 {
            self.tape.set_fault("ln", self.val);
        }
        self.tape.push(Op::Ln(self.idx), math::ln(self.val))
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.push(Op::Sin(self.idx), math::sin(self.val))
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.push(Op::Cos(self.idx), math::cos(self.val))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.push(Op::Tanh(self.idx), math::tanh(self.val))
    }

    pub fn sqrt(self) -> Var<'t> {
        if self.val < 0.0 {
            self.tape.set_fault("sqrt", self.val);
        }
        self.tape.push(Op::Sqrt(self.idx), math::sqrt(self.val))
    }

    /// Real power with constant exponent. Negative bases fault (the result
    /// would be NaN for non-integer exponents); use [`Var::powi`] for
    /// integer powers of signed values.
    pub fn powf(self, p: f64) -> Var<'t> {
        if self.val < 0.0 {
            self.tape.set_fault("powf", self.val);
        }
        self.tape
            .push(Op::Powf(self.idx, p), math::powf(self.val, p))
    }

    pub fn powi(self, k: i32) -> Var<'t> {
        self.tape
            .push(Op::Powi(self.idx, k), math::powi(self.val, k))
    }

    /// Elementwise minimum; the left argument wins ties, so `d min/dx = 1`
    /// at `x == y`. Clipping-style projections rely on this rule.
    pub fn min(self, other: Var<'t>) -> Var<'t> {
        self.tape.same_tape(other.tape);
        let v = if self.val <= other.val {
            self.val
        } else {
            other.val
        };
        self.tape.push(Op::Min(self.idx, other.idx), v)
    }

    /// Elementwise maximum; the left argument wins ties.
    pub fn max(self, other: Var<'t>) -> Var<'t> {
        self.tape.same_tape(other.tape);
        let v = if self.val >= other.val {
            self.val
        } else {
            other.val
        };
        self.tape.push(Op::Max(self.idx, other.idx), v)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.push(Op::Abs(self.idx), math::abs(self.val))
    }

    /// Clamp into `[lo, hi]` via min/max nodes.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let mut v = self;
        if lo > f64::NEG_INFINITY {
            v = v.max(self.tape.constant(lo));
        }
        if hi < f64::INFINITY {
            v = v.min(self.tape.constant(hi));
        }
        v
    }
}

/// `if cond >= 0 { a } else { b }`, recorded as a gate node. The condition
/// itself receives no gradient.
pub fn select<'t>(cond: Var<'t>, a: Var<'t>, b: Var<'t>) -> Var<'t> {
    cond.tape.same_tape(a.tape);
    cond.tape.same_tape(b.tape);
    let v = if cond.val >= 0.0 { a.val } else { b.val };
    cond.tape.push(Op::Select(cond.idx, a.idx, b.idx), v)
}

macro_rules! binop {
    ($trait:ident, $fn:ident, $op:ident, $cop:ident, $copr:ident, $apply:expr, $ca:expr, $cb:expr) => {
        impl<'t> core::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $fn(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.same_tape(rhs.tape);
                let f: fn(f64, f64) -> f64 = $apply;
                self.tape.push(Op::$op(self.idx, rhs.idx), f(self.val, rhs.val))
            }
        }
        impl<'t> core::ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $fn(self, rhs: f64) -> Var<'t> {
                let f: fn(Var<'t>, f64) -> (Op, f64) = $ca;
                let (op, v) = f(self, rhs);
                self.tape.push(op, v)
            }
        }
        impl<'t> core::ops::$trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $fn(self, rhs: Var<'t>) -> Var<'t> {
                let f: fn(f64, Var<'t>) -> (Op, f64) = $cb;
                let (op, v) = f(self, rhs);
                rhs.tape.push(op, v)
            }
        }
    };
}

binop!(
    Add,
    add,
    Add,
    AddC,
    AddC,
    |a, b| a + b,
    |x, c| (Op::AddC(x.idx, c), x.val + c),
    |c, x| (Op::AddC(x.idx, c), x.val + c)
);
binop!(
    Sub,
    sub,
    Sub,
    AddC,
    CSub,
    |a, b| a - b,
    |x, c| (Op::AddC(x.idx, -c), x.val - c),
    |c, x| (Op::CSub(c, x.idx), c - x.val)
);
binop!(
    Mul,
    mul,
    Mul,
    MulC,
    MulC,
    |a, b| a * b,
    |x, c| (Op::MulC(x.idx, c), x.val * c),
    |c, x| (Op::MulC(x.idx, c), x.val * c)
);
binop!(
    Div,
    div,
    Div,
    DivC,
    CDiv,
    |a, b| a / b,
    |x, c| (Op::DivC(x.idx, c), x.val / c),
    |c, x| {
        if x.val == 0.0 {
            x.tape.set_fault("div", x.val);
        }
        (Op::CDiv(c, x.idx), c / x.val)
    }
);

impl<'t> core::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push(Op::Neg(self.idx), -self.val)
    }
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var[{}]={}", self.idx, self.val)
    }
}

// ---------------------------------------------------------------------------
// Function traits: differentiable callables stored behind trait objects.
// ---------------------------------------------------------------------------

/// Scalar-valued function recorded on a caller-supplied tape.
pub trait ScalarField: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Var<'t>;
}

/// Vector-valued function recorded on a caller-supplied tape.
pub trait VectorField: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Vec<Var<'t>>;
}

impl<F> ScalarField for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Var<'t> {
        self(tape, x)
    }
}

impl<F> VectorField for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Vec<Var<'t>> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Vec<Var<'t>> {
        self(tape, x)
    }
}

/// Identity helper that pins a closure to the higher-ranked signature of
/// [`ScalarField`]. Closures bound to a `let` before use need this nudge,
/// otherwise inference fixes the tape lifetime too early.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

/// Identity helper pinning a closure to the [`VectorField`] signature.
pub fn vector_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Vec<Var<'t>>,
{
    f
}

// ---------------------------------------------------------------------------
// Recording: an owned tape plus its designated inputs and outputs.
// ---------------------------------------------------------------------------

/// A completed recording of a function: the tape together with the node
/// indices of its inputs and outputs. Owns the tape, so it can be replayed
/// at new inputs and differentiated repeatedly.
pub struct Recording {
    tape: Tape,
    inputs: Vec<u32>,
    outputs: Vec<u32>,
}

impl core::fmt::Debug for Recording {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "Recording({} nodes, {} inputs, {} outputs)",
            self.tape.len(),
            self.inputs.len(),
            self.outputs.len()
        )
    }
}

impl Recording {
    /// Record `f` at `x`. `f` receives the tape and one input [`Var`] per
    /// entry of `x` and returns the output nodes.
    pub fn record<F>(f: F, x: &[f64]) -> Result<Recording, AdError>
    where
        F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Vec<Var<'t>>,
    {
        let tape = Tape::new();
        let (inputs, outputs) = {
            let vars = tape.vars(x);
            let inputs: Vec<u32> = vars.iter().map(|v| v.idx).collect();
            let out = f(&tape, &vars);
            let outputs: Vec<u32> = out.iter().map(|v| v.idx).collect();
            (inputs, outputs)
        };
        if let Some(e) = tape.fault() {
            return Err(e);
        }
        let rec = Recording {
            tape,
            inputs,
            outputs,
        };
        for (k, &o) in rec.outputs.iter().enumerate() {
            if !rec.value_at(o).is_finite() {
                return Err(AdError::NonFinite { index: k });
            }
        }
        Ok(rec)
    }

    fn value_at(&self, idx: u32) -> f64 {
        self.tape.vals.borrow()[idx as usize]
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Number of nodes on the underlying tape.
    pub fn len(&self) -> usize {
        self.tape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tape.is_empty()
    }

    /// Value of output `k` at the most recent evaluation point.
    pub fn output(&self, k: usize) -> f64 {
        self.value_at(self.outputs[k])
    }

    pub fn outputs(&self) -> Vec<f64> {
        let vals = self.tape.vals.borrow();
        self.outputs.iter().map(|&o| vals[o as usize]).collect()
    }

    /// Re-evaluate the recorded graph at new input values, in place.
    ///
    /// Branch decisions (min/max/select/abs) are re-taken from the new
    /// values. The graph structure itself is fixed: this is only valid for
    /// the straight-line functions this crate records, and it is what makes
    /// per-iteration solver gradients cheap.
    pub fn replay(&mut self, x: &[f64]) -> Result<(), AdError> {
        assert_eq!(x.len(), self.inputs.len(), "replay input arity mismatch");
        let ops = self.tape.ops.borrow();
        let mut vals = self.tape.vals.borrow_mut();
        for (k, &i) in self.inputs.iter().enumerate() {
            vals[i as usize] = x[k];
        }
        let mut fault: Option<AdError> = None;
        let set_fault = |op: &'static str, arg: f64, fault: &mut Option<AdError>| {
            if fault.is_none() {
                *fault = Some(AdError::Domain { op, arg });
            }
        };
        for i in 0..ops.len() {
            let v = match ops[i] {
                Op::Leaf => continue,
                Op::Add(x, y) => vals[x as usize] + vals[y as usize],
                Op::Sub(x, y) => vals[x as usize] - vals[y as usize],
                Op::Mul(x, y) => vals[x as usize] * vals[y as usize],
                Op::Div(x, y) => vals[x as usize] / vals[y as usize],
                Op::AddC(x, c) => vals[x as usize] + c,
                Op::CSub(c, x) => c - vals[x as usize],
                Op::MulC(x, c) => vals[x as usize] * c,
                Op::DivC(x, c) => vals[x as usize] / c,
                Op::CDiv(c, x) => c / vals[x as usize],
                Op::Neg(x) => -vals[x as usize],
                Op::Exp(x) => math::exp(vals[x as usize]),
                Op::Ln(x) => {
                    if vals[x as usize] <= 0.0 {
                        set_fault("ln", vals[x as usize], &mut fault);
                    }
                    math::ln(vals[x as usize])
                }
                Op::Sin(x) => math::sin(vals[x as usize]),
                Op::Cos(x) => math::cos(vals[x as usize]),
                Op::Tanh(x) => math::tanh(vals[x as usize]),
                Op::Sqrt(x) => {
                    if vals[x as usize] < 0.0 {
                        set_fault("sqrt", vals[x as usize], &mut fault);
                    }
                    math::sqrt(vals[x as usize])
                }
                Op::Powf(x, p) => {
                    if vals[x as usize] < 0.0 {
                        set_fault("powf", vals[x as usize], &mut fault);
                    }
                    math::powf(vals[x as usize], p)
                }
                Op::Powi(x, k) => math::powi(vals[x as usize], k),
                Op::Min(x, y) => {
                    if vals[x as usize] <= vals[y as usize] {
                        vals[x as usize]
                    } else {
                        vals[y as usize]
                    }
                }
                Op::Max(x, y) => {
                    if vals[x as usize] >= vals[y as usize] {
                        vals[x as usize]
                    } else {
                        vals[y as usize]
                    }
                }
                Op::Select(c, x, y) => {
                    if vals[c as usize] >= 0.0 {
                        vals[x as usize]
                    } else {
                        vals[y as usize]
                    }
                }
                Op::Abs(x) => math::abs(vals[x as usize]),
            };
            vals[i] = v;
        }
        match fault {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Numeric reverse sweep seeded at output `k`.
    pub fn backward(&self, k: usize) -> Adjoints {
        let out = self.outputs[k];
        let v = Var {
            tape: &self.tape,
            idx: out,
            val: self.value_at(out),
        };
        self.tape.backward(v)
    }

    /// Gradient of output `k` with respect to the recorded inputs.
    pub fn gradient(&self, k: usize) -> Vec<f64> {
        let adj = self.backward(k);
        self.inputs.iter().map(|&i| adj.wrt_index(i)).collect()
    }

    /// Re-emit the backward sweep of output `k` onto `host`, substituting
    /// this recording's inputs with `input_subs` (host variables, typically
    /// carrying different values than the original recording point).
    ///
    /// Returns the adjoints of the recorded inputs as host variables, so the
    /// gradient itself can be differentiated again on `host`.
    pub fn gradient_graph<'h>(&self, k: usize, host: &'h Tape, input_subs: &[Var<'h>]) -> Vec<Var<'h>> {
        assert_eq!(input_subs.len(), self.inputs.len(), "substitution arity mismatch");
        let ops = self.tape.ops.borrow();
        let vals = self.tape.vals.borrow();
        let out = self.outputs[k] as usize;

        // Forward replay as host expressions.
        let mut re: Vec<Option<Var<'h>>> = vec![None; out + 1];
        let mut sub_of = vec![usize::MAX; self.tape.len()];
        for (s, &i) in self.inputs.iter().enumerate() {
            sub_of[i as usize] = s;
        }
        for i in 0..=out {
            let v = match ops[i] {
                Op::Leaf => {
                    if sub_of[i] != usize::MAX {
                        input_subs[sub_of[i]]
                    } else {
                        host.constant(vals[i])
                    }
                }
                Op::Add(x, y) => re[x as usize].unwrap() + re[y as usize].unwrap(),
                Op::Sub(x, y) => re[x as usize].unwrap() - re[y as usize].unwrap(),
                Op::Mul(x, y) => re[x as usize].unwrap() * re[y as usize].unwrap(),
                Op::Div(x, y) => re[x as usize].unwrap() / re[y as usize].unwrap(),
                Op::AddC(x, c) => re[x as usize].unwrap() + c,
                Op::CSub(c, x) => c - re[x as usize].unwrap(),
                Op::MulC(x, c) => re[x as usize].unwrap() * c,
                Op::DivC(x, c) => re[x as usize].unwrap() / c,
                Op::CDiv(c, x) => c / re[x as usize].unwrap(),
                Op::Neg(x) => -re[x as usize].unwrap(),
                Op::Exp(x) => re[x as usize].unwrap().exp(),
                Op::Ln(x) => re[x as usize].unwrap().ln(),
                Op::Sin(x) => re[x as usize].unwrap().sin(),
                Op::Cos(x) => re[x as usize].unwrap().cos(),
                Op::Tanh(x) => re[x as usize].unwrap().tanh(),
                Op::Sqrt(x) => re[x as usize].unwrap().sqrt(),
                Op::Powf(x, p) => re[x as usize].unwrap().powf(p),
                Op::Powi(x, k2) => re[x as usize].unwrap().powi(k2),
                Op::Min(x, y) => re[x as usize].unwrap().min(re[y as usize].unwrap()),
                Op::Max(x, y) => re[x as usize].unwrap().max(re[y as usize].unwrap()),
                Op::Select(c, x, y) => select(
                    re[c as usize].unwrap(),
                    re[x as usize].unwrap(),
                    re[y as usize].unwrap(),
                ),
                Op::Abs(x) => re[x as usize].unwrap().abs(),
            };
            re[i] = Some(v);
        }

        // Backward sweep with host-expression adjoints. Branch decisions use
        // the replayed (current) values, not the originally recorded ones.
        let mut adj: Vec<Option<Var<'h>>> = vec![None; out + 1];
        adj[out] = Some(host.constant(1.0));
        fn acc<'h>(slot: &mut Option<Var<'h>>, c: Var<'h>) {
            *slot = Some(match slot.take() {
                Some(a) => a + c,
                None => c,
            });
        }
        for i in (0..=out).rev() {
            let a = match adj[i] {
                Some(a) => a,
                None => continue,
            };
            let rv = |j: u32| re[j as usize].unwrap();
            match ops[i] {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    acc(&mut adj[x as usize], a);
                    acc(&mut adj[y as usize], a);
                }
                Op::Sub(x, y) => {
                    acc(&mut adj[x as usize], a);
                    acc(&mut adj[y as usize], -a);
                }
                Op::Mul(x, y) => {
                    acc(&mut adj[x as usize], a * rv(y));
                    acc(&mut adj[y as usize], a * rv(x));
                }
                Op::Div(x, y) => {
                    acc(&mut adj[x as usize], a / rv(y));
                    acc(&mut adj[y as usize], -(a * re[i].unwrap() / rv(y)));
                }
                Op::AddC(x, _) => acc(&mut adj[x as usize], a),
                Op::CSub(_, x) => acc(&mut adj[x as usize], -a),
                Op::MulC(x, c) => acc(&mut adj[x as usize], a * c),
                Op::DivC(x, c) => acc(&mut adj[x as usize], a / c),
                Op::CDiv(_, x) => acc(&mut adj[x as usize], -(a * re[i].unwrap() / rv(x))),
                Op::Neg(x) => acc(&mut adj[x as usize], -a),
                Op::Exp(x) => acc(&mut adj[x as usize], a * re[i].unwrap()),
                Op::Ln(x) => acc(&mut adj[x as usize], a / rv(x)),
                Op::Sin(x) => acc(&mut adj[x as usize], a * rv(x).cos()),
                Op::Cos(x) => acc(&mut adj[x as usize], -(a * rv(x).sin())),
                Op::Tanh(x) => {
                    let t = re[i].unwrap();
                    acc(&mut adj[x as usize], a * (1.0 - t * t));
                }
                Op::Sqrt(x) => acc(&mut adj[x as usize], a / (re[i].unwrap() * 2.0)),
                Op::Powf(x, p) => {
                    acc(&mut adj[x as usize], a * rv(x).powf(p - 1.0) * p);
                }
                Op::Powi(x, k2) => {
                    acc(&mut adj[x as usize], a * rv(x).powi(k2 - 1) * (k2 as f64));
                }
                Op::Min(x, y) => {
                    if rv(x).value() <= rv(y).value() {
                        acc(&mut adj[x as usize], a);
                    } else {
                        acc(&mut adj[y as usize], a);
                    }
                }
                Op::Max(x, y) => {
                    if rv(x).value() >= rv(y).value() {
                        acc(&mut adj[x as usize], a);
                    } else {
                        acc(&mut adj[y as usize], a);
                    }
                }
                Op::Select(c, x, y) => {
                    if rv(c).value() >= 0.0 {
                        acc(&mut adj[x as usize], a);
                    } else {
                        acc(&mut adj[y as usize], a);
                    }
                }
                Op::Abs(x) => {
                    if rv(x).value() >= 0.0 {
                        acc(&mut adj[x as usize], a);
                    } else {
                        acc(&mut adj[x as usize], -a);
                    }
                }
            }
        }
        self.inputs
            .iter()
            .map(|&i| adj[i as usize].unwrap_or_else(|| host.constant(0.0)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Convenience front-ends.
// ---------------------------------------------------------------------------

/// Record a scalar function of `n` inputs at `x`; returns its value and the
/// completed recording.
pub fn record<F>(f: F, x: &[f64]) -> Result<(f64, Recording), AdError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let rec = Recording::record(|tape, vars| vec![f(tape, vars)], x)?;
    Ok((rec.output(0), rec))
}

/// Value and gradient of a scalar function at `x` via one reverse sweep.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>), AdError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let (v, rec) = record(f, x)?;
    let g = rec.gradient(0);
    for (i, gi) in g.iter().enumerate() {
        if !gi.is_finite() {
            return Err(AdError::NonFinite { index: i });
        }
    }
    Ok((v, g))
}

/// Dense Jacobian of a vector function: row `i` is the gradient of output
/// `i`. One forward recording, `m` reverse sweeps.
pub fn jacobian<F>(f: F, x: &[f64]) -> Result<(Vec<f64>, Mat), AdError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Vec<Var<'t>>,
{
    let rec = Recording::record(f, x)?;
    let m = rec.n_outputs();
    let n = x.len();
    let mut jac = Mat::zeros(m, n);
    for i in 0..m {
        let row = rec.gradient(i);
        for (j, v) in row.iter().enumerate() {
            jac[(i, j)] = *v;
        }
    }
    Ok((rec.outputs(), jac))
}

/// Evaluate a tape-recorded scalar function as a plain number.
pub fn eval_scalar(f: &dyn ScalarField, x: &[f64]) -> f64 {
    let tape = Tape::new();
    let vars = tape.vars(x);
    f.eval(&tape, &vars).value()
}

/// Central-difference gradient, the verification oracle for the reverse
/// sweep: `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert!(h > 0.0, "fd_gradient requires h > 0");
    let eval = |pt: &[f64]| {
        let tape = Tape::new();
        let vars = tape.vars(pt);
        f(&tape, &vars).value()
    };
    let mut g = Vec::with_capacity(x.len());
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let xi = x[i];
        pt[i] = xi + h;
        let fp = eval(&pt);
        pt[i] = xi - h;
        let fm = eval(&pt);
        pt[i] = xi;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn record_square() {
        let (v, rec) = record(|_, x| x[0] * x[0], &[3.0]).unwrap();
        assert_eq!(v, 9.0);
        // one input leaf + one multiply node
        assert_eq!(rec.len(), 2);
        assert_eq!(rec.gradient(0), vec![6.0]);
    }

    #[test]
    fn record_additive_identity() {
        let (v, _) = record(|_, x| x[0] + x[1], &[0.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn record_exp_sin() {
        // exp(sin(0.5)), frozen from an independent high-precision evaluation
        let (v, _) = record(|_, x| x[0].sin().exp(), &[0.5]).unwrap();
        assert_relative_eq!(v, 1.6151462964420837, max_relative = 1e-12);
    }

    #[test]
    fn gradient_constant_is_zero() {
        let (_, g) = gradient(|t, _| t.constant(4.0), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_product_plus_sin() {
        // f = x0*x1 + sin(x0) at (1,2): [2 + cos 1, 1]
        let (_, g) = gradient(|_, x| x[0] * x[1] + x[0].sin(), &[1.0, 2.0]).unwrap();
        assert_relative_eq!(g[0], 2.0 + math::cos(1.0), max_relative = 1e-14);
        assert_relative_eq!(g[1], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn fd_matches_quadratic() {
        let g = fd_gradient(|_, x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant() {
        let g = fd_gradient(|t, _| t.constant(5.0), &[1.0, -2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn fd_exponential() {
        let g = fd_gradient(|_, x| x[0].exp(), &[0.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jacobian_identity() {
        let (_, j) = jacobian(|_, x| x.to_vec(), &[1.0, 2.0]).unwrap();
        assert_eq!(j[(0, 0)], 1.0);
        assert_eq!(j[(0, 1)], 0.0);
        assert_eq!(j[(1, 0)], 0.0);
        assert_eq!(j[(1, 1)], 1.0);
    }

    #[test]
    fn jacobian_linear_map() {
        let (_, j) = jacobian(|_, x| vec![x[0] + x[1], x[0] - x[1]], &[1.0, 1.0]).unwrap();
        assert_eq!((j[(0, 0)], j[(0, 1)]), (1.0, 1.0));
        assert_eq!((j[(1, 0)], j[(1, 1)]), (1.0, -1.0));
    }

    #[test]
    fn jacobian_products() {
        // f = [x0 x1, x0^2] at (2,3) -> [[3,2],[4,0]]
        let (_, j) = jacobian(|_, x| vec![x[0] * x[1], x[0] * x[0]], &[2.0, 3.0]).unwrap();
        assert_eq!((j[(0, 0)], j[(0, 1)]), (3.0, 2.0));
        assert_eq!((j[(1, 0)], j[(1, 1)]), (4.0, 0.0));
    }

    #[test]
    fn domain_fault_ln() {
        let err = record(|_, x| x[0].ln(), &[-1.0]).unwrap_err();
        assert_eq!(
            err,
            AdError::Domain {
                op: "ln",
                arg: -1.0
            }
        );
    }

    #[test]
    fn min_max_tie_rule_left_wins() {
        let (_, g) = gradient(|_, x| x[0].min(x[1]), &[2.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
        let (_, g) = gradient(|_, x| x[0].max(x[1]), &[2.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn select_gates_gradient() {
        let f = scalar_fn(|_, x| select(x[0], x[1] * 2.0, x[2] * 3.0));
        let (v, g) = gradient(&f, &[1.0, 5.0, 7.0]).unwrap();
        assert_eq!(v, 10.0);
        assert_eq!(g, vec![0.0, 2.0, 0.0]);
        let (v, g) = gradient(&f, &[-1.0, 5.0, 7.0]).unwrap();
        assert_eq!(v, 21.0);
        assert_eq!(g, vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn replay_reevaluates_and_rebranches() {
        let mut rec = Recording::record(
            |_, x| vec![x[0].max(x[1]) * x[0] + x[1].exp()],
            &[3.0, 1.0],
        )
        .unwrap();
        assert_relative_eq!(rec.output(0), 9.0 + math::exp(1.0));
        assert_eq!(rec.gradient(0), vec![6.0, math::exp(1.0)]);
        // max branch flips to x1
        rec.replay(&[1.0, 4.0]).unwrap();
        assert_relative_eq!(rec.output(0), 4.0 + math::exp(4.0));
        assert_eq!(rec.gradient(0), vec![4.0, 1.0 + math::exp(4.0)]);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let f = vector_fn(|_, x| {
            vec![(x[0] * x[1]).tanh() + x[2].sin() * x[0].exp() - x[1] / (x[2] * x[2] + 2.0)]
        });
        let x = [0.3, -1.2, 0.7];
        let mut rec = Recording::record(&f, &x).unwrap();
        let g1 = rec.gradient(0);
        let g2 = rec.gradient(0);
        assert_eq!(g1, g2, "same tape, same sweep, same bits");
        rec.replay(&x).unwrap();
        let g3 = rec.gradient(0);
        assert_eq!(g1, g3, "replay at the same point reproduces bits");
    }

    #[test]
    fn gradient_graph_second_derivative() {
        // f(x) = x^3: f' = 3x^2, f'' = 6x
        let rec = Recording::record(|_, x| vec![x[0] * x[0] * x[0]], &[2.0]).unwrap();
        let host = Tape::new();
        let hx = host.var(2.0);
        let g = rec.gradient_graph(0, &host, &[hx]);
        assert_relative_eq!(g[0].value(), 12.0, max_relative = 1e-14);
        let adj = host.backward(g[0]);
        assert_relative_eq!(adj.wrt(hx), 12.0, max_relative = 1e-14);
    }

    #[test]
    fn gradient_graph_at_new_point() {
        // Recorded at x=1, evaluated as a graph at x=5: gradient must follow
        // the substituted point.
        let rec = Recording::record(|_, x| vec![x[0] * x[0]], &[1.0]).unwrap();
        let host = Tape::new();
        let hx = host.var(5.0);
        let g = rec.gradient_graph(0, &host, &[hx]);
        assert_eq!(g[0].value(), 10.0);
    }

    #[test]
    fn gradient_graph_mixed_second_derivatives() {
        // f(x,y) = x^2 y + y^3: fx = 2xy, fxy = 2x, fxx = 2y
        let rec =
            Recording::record(|_, x| vec![x[0] * x[0] * x[1] + x[1].powi(3)], &[1.5, -2.0]).unwrap();
        let host = Tape::new();
        let hx = host.var(1.5);
        let hy = host.var(-2.0);
        let g = rec.gradient_graph(0, &host, &[hx, hy]);
        let adj = host.backward(g[0]);
        assert_relative_eq!(adj.wrt(hx), -4.0, max_relative = 1e-14); // fxx = 2y
        assert_relative_eq!(adj.wrt(hy), 3.0, max_relative = 1e-14); // fxy = 2x
    }

    #[test]
    fn gradient_linearity() {
        // Each input receives exactly one adjoint contribution per summand,
        // so linearity is exact (float addition is commutative).
        let f = scalar_fn(|_, x| x[0].sin() * x[1]);
        let g = scalar_fn(|_, x| x[1].exp() - 3.0 * x[0]);
        let x = [0.7, -0.4];
        let (_, gf) = gradient(&f, &x).unwrap();
        let (_, gg) = gradient(&g, &x).unwrap();
        let (_, gs) = gradient(scalar_fn(|t, x| f.eval(t, x) + g.eval(t, x)), &x).unwrap();
        for i in 0..2 {
            assert_eq!(gs[i], gf[i] + gg[i], "exact to floating point");
        }
    }

    proptest::proptest! {
        #[test]
        fn random_compositions_match_fd(vals in proptest::collection::vec(-2.0f64..2.0, 3), seed in 0u64..200) {
            // Small random expression over the supported primitives, kept
            // well-conditioned so the central-difference oracle is tight.
            let f = scalar_fn(move |_, x: &[Var<'_>]| {
                let mut acc = x[0] * 0.5 + 1.0;
                let mut s = seed;
                for k in 0..6 {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let v = x[(s >> 33) as usize % x.len()];
                    acc = match (s >> 7) % 7 {
                        0 => acc + v,
                        1 => acc - v * 0.7,
                        2 => acc * (v * 0.3).tanh(),
                        3 => acc + v.sin(),
                        4 => acc * ((v * v + 2.0).sqrt() * 0.25),
                        5 => acc + (v * v + 1.5).ln(),
                        _ => acc.max(v) + (acc.min(v) * 0.1) * ((k as f64) * 0.05),
                    };
                }
                acc + (acc * 0.2).cos()
            });
            let x: [f64; 3] = [vals[0], vals[1], vals[2]];
            let (_, g) = gradient(&f, &x).unwrap();
            let fd = fd_gradient(&f, &x, 1e-5);
            for i in 0..3 {
                let denom = fd[i].abs().max(1.0);
                proptest::prop_assert!((g[i] - fd[i]).abs() / denom <= 1e-5,
                    "entry {}: ad={} fd={}", i, g[i], fd[i]);
            }
        }
    }
}
