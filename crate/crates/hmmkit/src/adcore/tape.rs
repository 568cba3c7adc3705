//! Reverse-mode tape. A fresh tape is built for every evaluation; nothing is
//! cached across calls, so concurrent evaluations never share state.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::opcount;
use super::scalar::{DiffScalar, TapeScalar};

/// One recorded operation. Local partials are computed at record time, so the
/// reverse sweep is a pure weighted accumulation.
#[derive(Clone, Copy, Debug)]
enum Node<S> {
    Leaf,
    Unary { p: u32, w: S },
    Binary { p0: u32, w0: S, p1: u32, w1: S },
    Nary { start: u32, len: u32 },
}

#[derive(Debug, Default)]
struct TapeInner<S> {
    nodes: Vec<Node<S>>,
    nary_parents: Vec<u32>,
    nary_weights: Vec<S>,
}

/// Recording arena for one evaluation of a differentiable function.
#[derive(Debug)]
pub struct Tape<S: TapeScalar> {
    inner: RefCell<TapeInner<S>>,
}

/// A value participating in a recorded computation. Cheap to copy; carries a
/// reference to its tape.
#[derive(Clone, Copy)]
pub struct Ad<'t, S: TapeScalar> {
    tape: &'t Tape<S>,
    idx: u32,
    val: S,
}

impl<S: TapeScalar> std::fmt::Debug for Ad<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Ad({:?} @ {})", self.val, self.idx)
    }
}

impl<S: TapeScalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                nary_parents: Vec::new(),
                nary_weights: Vec::new(),
            }),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        let t = Tape::new();
        t.inner.borrow_mut().nodes.reserve(n);
        t
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an independent variable (or a constant; both are leaves).
    pub fn var(&self, v: S) -> Ad<'_, S> {
        let idx = self.push(Node::Leaf);
        Ad {
            tape: self,
            idx,
            val: v,
        }
    }

    fn push(&self, node: Node<S>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(node);
        idx
    }

    fn unary(&self, p: u32, w: S, val: S, cost: u64) -> Ad<'_, S> {
        opcount::add(cost);
        let idx = self.push(Node::Unary { p, w });
        Ad {
            tape: self,
            idx,
            val,
        }
    }

    fn binary(&self, p0: u32, w0: S, p1: u32, w1: S, val: S, cost: u64) -> Ad<'_, S> {
        opcount::add(cost);
        let idx = self.push(Node::Binary { p0, w0, p1, w1 });
        Ad {
            tape: self,
            idx,
            val,
        }
    }

    fn nary(&self, parents: &[u32], weights: &[S], val: S, cost: u64) -> Ad<'_, S> {
        debug_assert_eq!(parents.len(), weights.len());
        opcount::add(cost);
        let mut inner = self.inner.borrow_mut();
        let start = inner.nary_parents.len() as u32;
        inner.nary_parents.extend_from_slice(parents);
        inner.nary_weights.extend_from_slice(weights);
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node::Nary {
            start,
            len: parents.len() as u32,
        });
        drop(inner);
        Ad {
            tape: self,
            idx,
            val,
        }
    }

    /// Reverse sweep: adjoints of `inputs` with respect to `output`.
    ///
    /// The adjoint array spans the whole tape: the output may be an early
    /// node (even an input itself) while later nodes carry zero adjoint.
    pub fn gradient(&self, output: Ad<'_, S>, inputs: &[Ad<'_, S>]) -> Vec<S> {
        debug_assert!(std::ptr::eq(self, output.tape));
        let inner = self.inner.borrow();
        let mut adj = vec![S::zero(); inner.nodes.len()];
        adj[output.idx as usize] = S::one();
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a.is_zero() {
                continue;
            }
            match inner.nodes[i] {
                Node::Leaf => {}
                Node::Unary { p, w } => {
                    opcount::add(1);
                    adj[p as usize] = adj[p as usize] + w * a;
                }
                Node::Binary { p0, w0, p1, w1 } => {
                    opcount::add(2);
                    adj[p0 as usize] = adj[p0 as usize] + w0 * a;
                    adj[p1 as usize] = adj[p1 as usize] + w1 * a;
                }
                Node::Nary { start, len } => {
                    opcount::add(len as u64);
                    for k in 0..len as usize {
                        let p = inner.nary_parents[start as usize + k] as usize;
                        let w = inner.nary_weights[start as usize + k];
                        adj[p] = adj[p] + w * a;
                    }
                }
            }
        }
        inputs
            .iter()
            .map(|x| {
                debug_assert!(std::ptr::eq(self, x.tape));
                adj[x.idx as usize]
            })
            .collect()
    }
}

impl<S: TapeScalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'t, S: TapeScalar> Ad<'t, S> {
    pub fn value(&self) -> S {
        self.val
    }
}

impl<'t, S: TapeScalar> Add for Ad<'t, S> {
    type Output = Ad<'t, S>;
    fn add(self, rhs: Self) -> Self::Output {
        self.tape.binary(
            self.idx,
            S::one(),
            rhs.idx,
            S::one(),
            self.val + rhs.val,
            1,
        )
    }
}

impl<'t, S: TapeScalar> Sub for Ad<'t, S> {
    type Output = Ad<'t, S>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.tape.binary(
            self.idx,
            S::one(),
            rhs.idx,
            -S::one(),
            self.val - rhs.val,
            1,
        )
    }
}

impl<'t, S: TapeScalar> Mul for Ad<'t, S> {
    type Output = Ad<'t, S>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.tape
            .binary(self.idx, rhs.val, rhs.idx, self.val, self.val * rhs.val, 1)
    }
}

impl<'t, S: TapeScalar> Div for Ad<'t, S> {
    type Output = Ad<'t, S>;
    fn div(self, rhs: Self) -> Self::Output {
        let recip = S::one() / rhs.val;
        let val = self.val * recip;
        // d(a/b)/da = 1/b, d(a/b)/db = -a/b^2 = -val/b
        self.tape
            .binary(self.idx, recip, rhs.idx, -(val * recip), val, 3)
    }
}

impl<'t, S: TapeScalar> Neg for Ad<'t, S> {
    type Output = Ad<'t, S>;
    fn neg(self) -> Self::Output {
        self.tape.unary(self.idx, -S::one(), -self.val, 1)
    }
}

impl<'t, S: TapeScalar> DiffScalar for Ad<'t, S> {
    fn raw(&self) -> f64 {
        self.val.raw()
    }

    fn lift(&self, v: f64) -> Self {
        self.tape.var(S::from_f64(v))
    }

    fn add_c(self, c: f64) -> Self {
        self.tape
            .unary(self.idx, S::one(), self.val + S::from_f64(c), 1)
    }

    fn mul_c(self, c: f64) -> Self {
        let c = S::from_f64(c);
        self.tape.unary(self.idx, c, self.val * c, 1)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.tape.unary(self.idx, e, e, 1)
    }

    fn ln(self) -> Self {
        self.tape
            .unary(self.idx, S::one() / self.val, self.val.ln(), 2)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.tape
            .unary(self.idx, S::from_f64(0.5) / s, s, 2)
    }

    fn powf(self, e: f64) -> Self {
        let w = self.val.powf(e - 1.0) * S::from_f64(e);
        self.tape.unary(self.idx, w, self.val.powf(e), 3)
    }

    /// Fused log-sum-exp: one tape node with the softmax of the inputs as its
    /// exact local partials.
    fn logsumexp(terms: &[Self]) -> Self {
        assert!(!terms.is_empty(), "logsumexp of an empty slice");
        let tape = terms[0].tape;
        // shift by the max value (constant payload; its contribution cancels exactly)
        let mut m = terms[0].val;
        for t in &terms[1..] {
            debug_assert!(std::ptr::eq(tape, t.tape));
            if t.val.raw() > m.raw() {
                m = t.val;
            }
        }
        if !m.raw().is_finite() {
            // degenerate column (all -inf, or NaN present): keep the limit/NaN
            let mut s = S::zero();
            for t in terms {
                s = s + t.val.exp();
            }
            let val = s.ln();
            let parents: Vec<u32> = terms.iter().map(|t| t.idx).collect();
            let weights: Vec<S> = terms.iter().map(|t| (t.val - val).exp()).collect();
            return tape.nary(&parents, &weights, val, 5 * terms.len() as u64 + 1);
        }
        let mut s = S::zero();
        for t in terms {
            s = s + (t.val - m).exp();
        }
        let val = m + s.ln();
        let parents: Vec<u32> = terms.iter().map(|t| t.idx).collect();
        // softmax_i = exp(x_i - lse)
        let weights: Vec<S> = terms.iter().map(|t| (t.val - val).exp()).collect();
        tape.nary(&parents, &weights, val, 5 * terms.len() as u64 + 1)
    }
}
