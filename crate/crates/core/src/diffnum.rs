//! Reverse-mode differentiation over a flat parameter vector.
//!
//! Objectives are recorded onto a [`Tape`] as a sequence of vector-valued
//! primitives (elementwise arithmetic, `exp`, `ln`, `tanh`, reductions and
//! affine maps whose weights live in the parameter vector). The tape is
//! rebuilt on every call to [`value_and_grad`]; nothing persists between
//! evaluations, so the functions here are safe to call from many threads.
//!
//! Non-finite intermediates do not abort recording. The tape remembers the
//! first primitive that produced one and [`value_and_grad`] reports it.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced by `{primitive}` (node {node})")]
    NonFinite { primitive: Primitive, node: usize },
    #[error("parameter {index} is not finite ({value})")]
    NonFiniteParam { index: usize, value: f64 },
    #[error("invalid parameter layout: {0}")]
    Layout(String),
}

/// A named slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Flat vector of model parameters, partitioned into named segments.
///
/// Segments are disjoint, contiguous and cover the vector exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self, DiffError> {
        let mut next = 0;
        for seg in &segments {
            if seg.start != next {
                return Err(DiffError::Layout(format!(
                    "segment `{}` starts at {} but previous segment ends at {}",
                    seg.name, seg.start, next
                )));
            }
            next += seg.len;
        }
        if next != values.len() {
            return Err(DiffError::Layout(format!(
                "segments cover {} entries, vector has {}",
                next,
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self { values, segments })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Replace all values. Length must match and every entry must be finite.
    pub fn set_values(&mut self, values: &[f64]) -> Result<(), DiffError> {
        if values.len() != self.values.len() {
            return Err(DiffError::Layout(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        check_finite(values)?;
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

fn check_finite(values: &[f64]) -> Result<(), DiffError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(DiffError::NonFiniteParam {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Sequential allocator for parameter segments.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve `len` entries under `name`, returning the offset of the first one.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let start = self.len;
        self.segments.push(Segment {
            name: name.into(),
            start,
            len,
        });
        self.len += len;
        start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn finish(self, values: Vec<f64>) -> Result<ParamVector, DiffError> {
        ParamVector::new(values, self.segments)
    }
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Identity of a primitive, used in error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Constant,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Offset,
    Exp,
    Ln,
    Tanh,
    Softplus,
    Sqrt,
    Maximum,
    MaxAll,
    Sum,
    Affine,
    Slice,
    Gather,
    Concat,
    CumSum,
    SymSums,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Softplus(Var),
    Sqrt(Var),
    Maximum(Var, Var),
    MaxAll(Var, usize),
    Sum(Var),
    Affine {
        input: Var,
        weight: usize,
        bias: usize,
    },
    Slice(Var, usize),
    Gather(Var, Box<[u32]>),
    Concat(Box<[Var]>),
    CumSum(Var),
    SymSums(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Constant => Primitive::Constant,
            Op::Param { .. } => Primitive::Param,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Neg(_) => Primitive::Neg,
            Op::Scale(..) => Primitive::Scale,
            Op::Offset(_) => Primitive::Offset,
            Op::Exp(_) => Primitive::Exp,
            Op::Ln(_) => Primitive::Ln,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Softplus(_) => Primitive::Softplus,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Maximum(..) => Primitive::Maximum,
            Op::MaxAll(..) => Primitive::MaxAll,
            Op::Sum(_) => Primitive::Sum,
            Op::Affine { .. } => Primitive::Affine,
            Op::Slice(..) => Primitive::Slice,
            Op::Gather(..) => Primitive::Gather,
            Op::Concat(_) => Primitive::Concat,
            Op::CumSum(_) => Primitive::CumSum,
            Op::SymSums(_) => Primitive::SymSums,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    start: usize,
    len: usize,
    needs_grad: bool,
}

/// Recording of one evaluation. Parameter-dependent nodes read from the
/// parameter slice the tape was created with.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    values: Vec<f64>,
    first_bad: Option<(usize, Primitive)>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            values: Vec::with_capacity(4096),
            first_bad: None,
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.values[n.start..n.start + n.len]
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let vals = self.value(v);
        debug_assert_eq!(vals.len(), 1);
        vals[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0 as usize].len
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(usize, Primitive)> {
        self.first_bad
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].needs_grad
    }

    fn push_with<F>(&mut self, op: Op, len: usize, needs_grad: bool, fill: F) -> Var
    where
        F: FnOnce(&[f64], &[f64], &mut [f64]),
    {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let (before, out) = self.values.split_at_mut(start);
        fill(before, self.params, out);
        if self.first_bad.is_none() && out.iter().any(|v| !v.is_finite()) {
            self.first_bad = Some((self.nodes.len(), op.primitive()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            start,
            len,
            needs_grad,
        });
        Var(id as u32)
    }

    fn span(&self, v: Var) -> Range<usize> {
        let n = &self.nodes[v.0 as usize];
        n.start..n.start + n.len
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push_with(Op::Constant, values.len(), false, |_, _, out| {
            out.copy_from_slice(values)
        })
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(&[value])
    }

    /// Leaf reading `params[range]`.
    pub fn param(&mut self, range: Range<usize>) -> Var {
        let offset = range.start;
        let len = range.len();
        self.push_with(Op::Param { offset }, len, true, |_, p, out| {
            out.copy_from_slice(&p[offset..offset + len])
        })
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Var {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        assert!(
            la == lb || la == 1 || lb == 1,
            "{} operands of length {la} and {lb}",
            op.primitive()
        );
        let len = la.max(lb);
        let (ra, rb) = (self.span(a), self.span(b));
        let needs = self.needs(a) || self.needs(b);
        self.push_with(op, len, needs, |vals, _, out| {
            let (xa, xb) = (&vals[ra], &vals[rb]);
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(xa[if la == 1 { 0 } else { i }], xb[if lb == 1 { 0 } else { i }]);
            }
        })
    }

    /// Elementwise `a + b`; a length-1 operand is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum. At ties the derivative flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let r = self.span(a);
        let needs = self.needs(a);
        self.push_with(op, r.len(), needs, |vals, _, out| {
            for (o, &x) in out.iter_mut().zip(&vals[r]) {
                *o = f(x);
            }
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), move |x| c * x)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), move |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Maximum over all entries. The derivative goes to the first entry
    /// attaining it.
    pub fn max_all(&mut self, a: Var) -> Var {
        let r = self.span(a);
        assert!(!r.is_empty(), "max over an empty node");
        let arg = {
            let vals = &self.values[r.clone()];
            let mut best = 0;
            for (i, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = i;
                }
            }
            best
        };
        let needs = self.needs(a);
        self.push_with(Op::MaxAll(a, arg), 1, needs, |vals, _, out| {
            out[0] = vals[r.start + arg]
        })
    }

    /// Sum of all entries (compensated).
    pub fn sum(&mut self, a: Var) -> Var {
        let r = self.span(a);
        let needs = self.needs(a);
        self.push_with(Op::Sum(a), 1, needs, |vals, _, out| {
            out[0] = neumaier_sum(vals[r].iter().copied())
        })
    }

    /// `W x + b` with `W` (`out_len x len(x)`, row-major) stored at
    /// `params[weight..]` and `b` at `params[bias..]`.
    pub fn affine(&mut self, input: Var, weight: usize, bias: usize, out_len: usize) -> Var {
        let r = self.span(input);
        let cols = r.len();
        assert!(weight + out_len * cols <= self.params.len());
        assert!(bias + out_len <= self.params.len());
        self.push_with(
            Op::Affine {
                input,
                weight,
                bias,
            },
            out_len,
            true,
            |vals, p, out| {
                let x = &vals[r];
                for (row, o) in out.iter_mut().enumerate() {
                    let w = &p[weight + row * cols..weight + (row + 1) * cols];
                    *o = p[bias + row] + dot(w, x);
                }
            },
        )
    }

    /// Contiguous sub-range `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let r = self.span(a);
        assert!(start + len <= r.len(), "slice out of bounds");
        let needs = self.needs(a);
        self.push_with(Op::Slice(a, start), len, needs, |vals, _, out| {
            out.copy_from_slice(&vals[r.start + start..r.start + start + len])
        })
    }

    /// `out[i] = a[indices[i]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let r = self.span(a);
        assert!(indices.iter().all(|&i| i < r.len()), "gather out of bounds");
        let idx: Box<[u32]> = indices.iter().map(|&i| i as u32).collect();
        let needs = self.needs(a);
        self.push_with(
            Op::Gather(a, idx.clone()),
            indices.len(),
            needs,
            |vals, _, out| {
                for (o, &i) in out.iter_mut().zip(idx.iter()) {
                    *o = vals[r.start + i as usize];
                }
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let spans: Vec<Range<usize>> = parts.iter().map(|&p| self.span(p)).collect();
        let len = spans.iter().map(|s| s.len()).sum();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push_with(Op::Concat(parts.into()), len, needs, |vals, _, out| {
            let mut at = 0;
            for s in spans {
                out[at..at + s.len()].copy_from_slice(&vals[s.clone()]);
                at += s.len();
            }
        })
    }

    /// Inclusive prefix sums.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let r = self.span(a);
        let needs = self.needs(a);
        self.push_with(Op::CumSum(a), r.len(), needs, |vals, _, out| {
            let mut acc = 0.0;
            for (o, &x) in out.iter_mut().zip(&vals[r]) {
                acc += x;
                *o = acc;
            }
        })
    }

    /// Elementary symmetric sums `e_0..=e_m` of the `m` entries of `a`.
    pub fn sym_sums(&mut self, a: Var) -> Var {
        let r = self.span(a);
        let needs = self.needs(a);
        self.push_with(Op::SymSums(a), r.len() + 1, needs, |vals, _, out| {
            symmetric_sums_into(&vals[r], out)
        })
    }

    /// Reverse sweep from the scalar node `output`; returns d output / d params.
    pub fn gradient(&self, output: Var) -> Vec<f64> {
        assert_eq!(self.len_of(output), 1, "gradient of a non-scalar node");
        let mut grads = vec![0.0; self.values.len()];
        let mut pgrad = vec![0.0; self.params.len()];
        grads[self.nodes[output.0 as usize].start] = 1.0;
        let vals = &self.values;
        for node in self.nodes[..=output.0 as usize].iter().rev() {
            if !node.needs_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(node.start);
            let g = &rest[..node.len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let out = &vals[node.start..node.start + node.len];
            let span = |v: &Var| {
                let n = &self.nodes[v.0 as usize];
                (n.start..n.start + n.len, n.needs_grad)
            };
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (pg, gi) in pgrad[*offset..*offset + node.len].iter_mut().zip(g) {
                        *pg += gi;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (ra, na) = span(a);
                    let (rb, nb) = span(b);
                    if na {
                        accumulate_broadcast(&mut before[ra], g, |i| g[i]);
                    }
                    if nb {
                        accumulate_broadcast(&mut before[rb], g, |i| sign * g[i]);
                    }
                }
                Op::Mul(a, b) => {
                    let (ra, na) = span(a);
                    let (rb, nb) = span(b);
                    let (la, lb) = (ra.len(), rb.len());
                    let xa = &vals[ra.clone()];
                    let xb = &vals[rb.clone()];
                    if na {
                        accumulate_broadcast(&mut before[ra], g, |i| {
                            g[i] * xb[if lb == 1 { 0 } else { i }]
                        });
                    }
                    if nb {
                        accumulate_broadcast(&mut before[rb], g, |i| {
                            g[i] * xa[if la == 1 { 0 } else { i }]
                        });
                    }
                }
                Op::Div(a, b) => {
                    let (ra, na) = span(a);
                    let (rb, nb) = span(b);
                    let lb = rb.len();
                    let xb = &vals[rb.clone()];
                    if na {
                        accumulate_broadcast(&mut before[ra], g, |i| {
                            g[i] / xb[if lb == 1 { 0 } else { i }]
                        });
                    }
                    if nb {
                        accumulate_broadcast(&mut before[rb], g, |i| {
                            -g[i] * out[i] / xb[if lb == 1 { 0 } else { i }]
                        });
                    }
                }
                Op::Maximum(a, b) => {
                    let (ra, na) = span(a);
                    let (rb, nb) = span(b);
                    let (la, lb) = (ra.len(), rb.len());
                    let xa = &vals[ra.clone()];
                    let xb = &vals[rb.clone()];
                    let a_wins =
                        |i: usize| xa[if la == 1 { 0 } else { i }] >= xb[if lb == 1 { 0 } else { i }];
                    if na {
                        accumulate_broadcast(&mut before[ra], g, |i| {
                            if a_wins(i) {
                                g[i]
                            } else {
                                0.0
                            }
                        });
                    }
                    if nb {
                        accumulate_broadcast(&mut before[rb], g, |i| {
                            if a_wins(i) {
                                0.0
                            } else {
                                g[i]
                            }
                        });
                    }
                }
                Op::Neg(a) | Op::Scale(a, _) | Op::Offset(a) | Op::Exp(a) | Op::Ln(a)
                | Op::Tanh(a) | Op::Softplus(a) | Op::Sqrt(a) => {
                    let (ra, _) = span(a);
                    let x = &vals[ra.clone()];
                    let dst = &mut before[ra];
                    for i in 0..node.len {
                        let d = match &node.op {
                            Op::Neg(_) => -1.0,
                            Op::Scale(_, c) => *c,
                            Op::Offset(_) => 1.0,
                            Op::Exp(_) => out[i],
                            Op::Ln(_) => 1.0 / x[i],
                            Op::Tanh(_) => 1.0 - out[i] * out[i],
                            Op::Softplus(_) => sigmoid(x[i]),
                            Op::Sqrt(_) => 0.5 / out[i],
                            _ => unreachable!(),
                        };
                        dst[i] += g[i] * d;
                    }
                }
                Op::MaxAll(a, arg) => {
                    let (ra, _) = span(a);
                    before[ra.start + arg] += g[0];
                }
                Op::Sum(a) => {
                    let (ra, _) = span(a);
                    for d in &mut before[ra] {
                        *d += g[0];
                    }
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let (ri, ni) = span(input);
                    let cols = ri.len();
                    let x = &vals[ri.clone()];
                    for (row, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        pgrad[bias + row] += gr;
                        let wg = &mut pgrad[weight + row * cols..weight + (row + 1) * cols];
                        for (w, &xi) in wg.iter_mut().zip(x) {
                            *w += gr * xi;
                        }
                    }
                    if ni {
                        let dst = &mut before[ri];
                        for (row, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let w = &self.params[weight + row * cols..weight + (row + 1) * cols];
                            for (d, &wi) in dst.iter_mut().zip(w) {
                                *d += gr * wi;
                            }
                        }
                    }
                }
                Op::Slice(a, start) => {
                    let (ra, _) = span(a);
                    let dst = &mut before[ra.start + start..ra.start + start + node.len];
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                Op::Gather(a, idx) => {
                    let (ra, _) = span(a);
                    for (&i, gi) in idx.iter().zip(g) {
                        before[ra.start + i as usize] += gi;
                    }
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts.iter() {
                        let (rp, np) = span(p);
                        let l = rp.len();
                        if np {
                            for (d, gi) in before[rp].iter_mut().zip(&g[at..at + l]) {
                                *d += gi;
                            }
                        }
                        at += l;
                    }
                }
                Op::CumSum(a) => {
                    let (ra, _) = span(a);
                    let mut acc = 0.0;
                    let dst = &mut before[ra];
                    for i in (0..node.len).rev() {
                        acc += g[i];
                        dst[i] += acc;
                    }
                }
                Op::SymSums(a) => {
                    // d e_l / d c_j = e_{l-1}(c without c_j)
                    let (ra, _) = span(a);
                    let c = &vals[ra.clone()];
                    let m = c.len();
                    let mut rest = Vec::with_capacity(m.saturating_sub(1));
                    let mut e = vec![0.0; m];
                    for j in 0..m {
                        rest.clear();
                        rest.extend(c.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, &v)| v));
                        symmetric_sums_into(&rest, &mut e);
                        let d: f64 = (1..=m).map(|l| g[l] * e[l - 1]).sum();
                        before[ra.start + j] += d;
                    }
                }
            }
        }
        pgrad
    }
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], term: impl Fn(usize) -> f64) {
    if dst.len() == 1 && g.len() != 1 {
        dst[0] += (0..g.len()).map(&term).sum::<f64>();
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += term(i);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Neumaier-compensated summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Coefficients of `prod_j (t + c_j)`, highest power first, written into
/// `out[0..=m]`; `out[l]` is the l-th elementary symmetric sum.
///
/// Each update is carried with an error-free transformation so that the
/// running coefficients keep a compensation term.
pub(crate) fn symmetric_sums_into(c: &[f64], out: &mut [f64]) {
    let m = c.len();
    debug_assert!(out.len() > m);
    out[..=m].fill(0.0);
    out[0] = 1.0;
    let mut err = vec![0.0; m + 1];
    for (j, &cj) in c.iter().enumerate() {
        for l in (1..=j + 1).rev() {
            let prod = cj * out[l - 1];
            let prod_err = cj.mul_add(out[l - 1], -prod) + cj * err[l - 1];
            let s = out[l] + prod;
            let bp = s - out[l];
            let sum_err = (out[l] - (s - bp)) + (prod - bp);
            out[l] = s;
            err[l] += sum_err + prod_err;
        }
    }
    for l in 0..=m {
        out[l] += err[l];
    }
}

/// Anything that can record a scalar onto a tape.
pub trait DifferentiableScalar {
    fn record(&self, tape: &mut Tape<'_>) -> Var;
}

impl<F> DifferentiableScalar for F
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    fn record(&self, tape: &mut Tape<'_>) -> Var {
        self(tape)
    }
}

/// Evaluate `objective` at `params` without the reverse sweep.
pub fn value<O: DifferentiableScalar + ?Sized>(objective: &O, params: &[f64]) -> Result<f64, DiffError> {
    check_finite(params)?;
    let mut tape = Tape::new(params);
    let out = objective.record(&mut tape);
    if let Some((node, primitive)) = tape.first_non_finite() {
        return Err(DiffError::NonFinite { primitive, node });
    }
    Ok(tape.scalar(out))
}

/// Objective value and its exact gradient with respect to `params`.
pub fn value_and_grad<O: DifferentiableScalar + ?Sized>(
    objective: &O,
    params: &[f64],
) -> Result<(f64, Vec<f64>), DiffError> {
    check_finite(params)?;
    let mut tape = Tape::new(params);
    let out = objective.record(&mut tape);
    if let Some((node, primitive)) = tape.first_non_finite() {
        return Err(DiffError::NonFinite { primitive, node });
    }
    let grad = tape.gradient(out);
    Ok((tape.scalar(out), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff<O: DifferentiableScalar>(obj: &O, p: &[f64], h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let mut hi = p.to_vec();
                let mut lo = p.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (value(obj, &hi).unwrap() - value(obj, &lo).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close_rel(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!(((x - y) / scale).abs() <= tol, "coord {i}: {x} vs {y}");
        }
    }

    #[test]
    fn sum_of_squares() {
        let obj = |t: &mut Tape<'_>| {
            let p = t.param(0..2);
            let sq = t.mul(p, p);
            t.sum(sq)
        };
        let (v, g) = value_and_grad(&obj, &[1.0, 2.0]).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let obj = |t: &mut Tape<'_>| t.scalar_constant(7.0);
        let (v, g) = value_and_grad(&obj, &[0.3, -1.0, 4.0]).unwrap();
        assert_eq!(v, 7.0);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_reports_primitive() {
        let obj = |t: &mut Tape<'_>| {
            let p = t.param(0..1);
            let z = t.scale(p, 0.0);
            t.ln(z)
        };
        let err = value_and_grad(&obj, &[1.0]).unwrap_err();
        assert!(matches!(
            err,
            DiffError::NonFinite {
                primitive: Primitive::Ln,
                ..
            }
        ));
    }

    #[test]
    fn non_finite_param_rejected() {
        let obj = |t: &mut Tape<'_>| t.param(0..1);
        assert!(matches!(
            value_and_grad(&obj, &[f64::NAN]),
            Err(DiffError::NonFiniteParam { index: 0, .. })
        ));
    }

    #[test]
    fn max_tie_goes_to_first_argument() {
        let obj = |t: &mut Tape<'_>| {
            let a = t.param(0..1);
            let b = t.param(1..2);
            t.maximum(a, b)
        };
        let (_, g) = value_and_grad(&obj, &[2.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
        let obj = |t: &mut Tape<'_>| {
            let p = t.param(0..3);
            t.max_all(p)
        };
        let (_, g) = value_and_grad(&obj, &[1.0, 3.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn affine_matches_hand_gradient() {
        // params: W (2x3), b (2), x as params too
        let obj = |t: &mut Tape<'_>| {
            let x = t.param(8..11);
            let y = t.affine(x, 0, 6, 2);
            let y2 = t.mul(y, y);
            t.sum(y2)
        };
        let p = [0.1, -0.2, 0.3, 0.5, 0.7, -1.1, 0.05, -0.4, 1.0, 2.0, -0.5];
        let (_, g) = value_and_grad(&obj, &p).unwrap();
        let fd = central_diff(&obj, &p, 1e-6);
        assert_close_rel(&g, &fd, 1e-7);
    }

    #[test]
    fn symmetric_sums_and_gradient() {
        let mut out = [0.0; 4];
        symmetric_sums_into(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, [1.0, 6.0, 11.0, 6.0]);
        let obj = |t: &mut Tape<'_>| {
            let c = t.param(0..4);
            let e = t.sym_sums(c);
            let w = t.constant(&[0.3, -1.0, 0.5, 2.0, -0.7]);
            let we = t.mul(e, w);
            t.sum(we)
        };
        let p = [0.4, -1.3, 2.2, 0.9];
        let (_, g) = value_and_grad(&obj, &p).unwrap();
        assert_close_rel(&g, &central_diff(&obj, &p, 1e-6), 1e-7);
    }

    /// Random composite of every primitive, used for the property tests.
    fn composite(t: &mut Tape<'_>, a: f64, b: f64) -> Var {
        let p = t.param(0..4);
        let q = t.param(4..6);
        let th = t.tanh(p);
        let e = t.exp(q);
        let two = t.slice(th, 1, 2);
        let r = t.div(two, e);
        let sp = t.softplus(p);
        let cs = t.cumsum(sp);
        let lg = t.ln(cs);
        let g = t.gather(lg, &[3, 0, 0, 2]);
        let cat = t.concat(&[r, g]);
        let h = t.affine(cat, 6, 18, 2);
        let k = t.max_all(h);
        let mx = t.maximum(h, k);
        let s1 = t.sum(mx);
        let sq = t.sqrt(e);
        let s2 = t.sum(sq);
        let ss = t.sym_sums(q);
        let s3 = t.sum(ss);
        let f = t.add(s1, s2);
        let f = t.sub(f, s3);
        let ng = t.neg(f);
        let f = t.scale(ng, a);
        let f = t.offset(f, b);
        let sub = t.slice(p, 0, 1);
        t.mul(f, sub)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gradient_matches_finite_differences(p in prop::collection::vec(-1.5f64..1.5, 20)) {
            let obj = |t: &mut Tape<'_>| composite(t, 1.3, 0.2);
            let (_, g) = value_and_grad(&obj, &p).unwrap();
            let fd = central_diff(&obj, &p, 1e-5);
            for (x, y) in g.iter().zip(&fd) {
                let scale = x.abs().max(y.abs()).max(1e-2);
                prop_assert!(((x - y) / scale).abs() <= 1e-4, "{} vs {}", x, y);
            }
        }

        #[test]
        fn gradient_is_linear(p in prop::collection::vec(-1.5f64..1.5, 20), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let f = |t: &mut Tape<'_>| composite(t, 1.0, 0.0);
            let g = |t: &mut Tape<'_>| {
                let x = t.param(0..20);
                let s = t.mul(x, x);
                let e = t.exp(s);
                t.sum(e)
            };
            let h = |t: &mut Tape<'_>| {
                let fv = f(t);
                let gv = g(t);
                let fa = t.scale(fv, a);
                let gb = t.scale(gv, b);
                t.add(fa, gb)
            };
            let (_, gf) = value_and_grad(&f, &p).unwrap();
            let (_, gg) = value_and_grad(&g, &p).unwrap();
            let (_, gh) = value_and_grad(&h, &p).unwrap();
            for i in 0..p.len() {
                let expect = a * gf[i] + b * gg[i];
                prop_assert!((gh[i] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn layout_rejects_gaps() {
        let segs = vec![
            Segment { name: "a".into(), start: 0, len: 2 },
            Segment { name: "b".into(), start: 3, len: 1 },
        ];
        assert!(ParamVector::new(vec![0.0; 4], segs).is_err());
        let mut layout = ParamLayout::new();
        layout.push("w", 3);
        layout.push("b", 2);
        let pv = layout.finish(vec![0.0; 5]).unwrap();
        assert_eq!(pv.segment("b").unwrap().range(), 3..5);
    }
}
