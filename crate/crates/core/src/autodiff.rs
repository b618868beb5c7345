//! Reverse-mode differentiation over a small, explicitly shaped set of
//! vector primitives.
//!
//! A [`Tape`] records every primitive application in evaluation order.
//! Trainable arrays live outside the tape as [`Parameter`]s; a forward pass
//! binds them with [`Tape::param`] and [`Tape::backward`] adds the chain-rule
//! gradient into each bound parameter's accumulator. Nothing broadcasts: a
//! scalar is a vector of length one.

use crate::error::{GmcfError, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    /// Row-major `rows x cols`.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// A trainable array plus its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn vector(name: impl Into<String>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            shape: Shape::Vector(n),
            grad: vec![0.0; n],
            value,
        }
    }

    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize, value: Vec<f64>) -> Self {
        assert_eq!(value.len(), rows * cols, "matrix parameter size");
        Self {
            name: name.into(),
            shape: Shape::Matrix(rows, cols),
            grad: vec![0.0; rows * cols],
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        Self {
            name: name.into(),
            shape,
            value: vec![0.0; shape.len()],
            grad: vec![0.0; shape.len()],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn squared_norm(&self) -> f64 {
        self.value.iter().map(|x| x * x).sum()
    }
}

/// Position of a parameter in a model's registry order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Multiplication by a constant.
    Scale(f64),
    /// Element-wise product.
    Mul,
    /// `matrix · vector`, matrix first.
    MatVec,
    /// Concatenation of any number of vectors.
    Concat,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Inner product of two equally shaped arrays, producing a scalar.
    Dot,
    Sigmoid,
    Tanh,
    Relu,
    /// Binary cross-entropy of `sigmoid(input)` against a fixed label,
    /// with the probability clamped by [`BCE_EPS`].
    BceWithLogit(f64),
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Scale(_) => "scale",
            Primitive::Mul => "elementwise-product",
            Primitive::MatVec => "matrix-vector-product",
            Primitive::Concat => "concatenate",
            Primitive::Sum => "sum-reduce",
            Primitive::Dot => "dot",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::BceWithLogit(_) => "bce",
        }
    }
}

#[derive(Debug, Clone)]
enum Origin {
    Constant,
    Param,
    Op(Primitive, Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    origin: Origin,
    shape: Shape,
    value: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Indexed by `ParamId`.
    bound: Vec<Option<Var>>,
}

/// Inner product with four independent accumulators.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce(probability: f64, label: f64) -> f64 {
    let p = probability.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Value of a length-one node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, origin: Origin, shape: Shape, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node { origin, shape, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        let shape = Shape::Vector(value.len());
        self.push(Origin::Constant, shape, value)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    /// Binds a parameter to this tape. Binding the same id twice returns
    /// the first handle, so gradients from every use meet in one node.
    pub fn param(&mut self, id: ParamId, p: &Parameter) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let v = self.push(Origin::Param, p.shape, p.value.clone());
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    /// Smallest `|x|` over all Relu inputs on the tape (infinite if none).
    /// Finite differences are meaningless within one step of a kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match &n.origin {
                Origin::Op(Primitive::Relu, inputs) => Some(inputs[0]),
                _ => None,
            })
            .flat_map(|v| self.value(v).iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Bound parameters in ascending id order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| (ParamId(k), v)))
    }

    fn vector_len(&self, prim: Primitive, v: Var) -> Result<usize> {
        match self.shape(v) {
            Shape::Vector(n) => Ok(n),
            Shape::Matrix(r, c) => Err(GmcfError::shape(
                prim.name(),
                format!("expected a vector, got a {r}x{c} matrix"),
            )),
        }
    }

    fn arity(prim: Primitive, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(GmcfError::shape(
                prim.name(),
                format!("takes {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    fn same_len(&self, prim: Primitive, a: Var, b: Var) -> Result<usize> {
        let (na, nb) = (self.vector_len(prim, a)?, self.vector_len(prim, b)?);
        if na != nb {
            return Err(GmcfError::shape(prim.name(), format!("lengths {na} and {nb}")));
        }
        Ok(na)
    }

    /// Applies `prim` to `inputs`, appending the result to the tape.
    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let (shape, value) = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                Self::arity(prim, inputs, 2)?;
                let n = self.same_len(prim, inputs[0], inputs[1])?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let out: Vec<f64> = match prim {
                    Primitive::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                    Primitive::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
                    _ => a.iter().zip(b).map(|(x, y)| x * y).collect(),
                };
                (Shape::Vector(n), out)
            }
            Primitive::Dot => {
                // vectors, or two matrices of identical shape (Frobenius product)
                Self::arity(prim, inputs, 2)?;
                let (sa, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                if sa != sb {
                    return Err(GmcfError::shape(prim.name(), format!("{sa:?} and {sb:?}")));
                }
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                (Shape::Vector(1), vec![a.iter().zip(b).map(|(x, y)| x * y).sum()])
            }
            Primitive::MatVec => {
                Self::arity(prim, inputs, 2)?;
                let (rows, cols) = match self.shape(inputs[0]) {
                    Shape::Matrix(r, c) => (r, c),
                    Shape::Vector(n) => {
                        return Err(GmcfError::shape(
                            prim.name(),
                            format!("first input must be a matrix, got a vector of {n}"),
                        ))
                    }
                };
                let n = self.vector_len(prim, inputs[1])?;
                if n != cols {
                    return Err(GmcfError::shape(
                        prim.name(),
                        format!("{rows}x{cols} matrix times vector of {n}"),
                    ));
                }
                let (m, x) = (self.value(inputs[0]), self.value(inputs[1]));
                let out = m.chunks_exact(cols).map(|row| dot4(row, x)).collect();
                (Shape::Vector(rows), out)
            }
            Primitive::Concat => {
                if inputs.is_empty() {
                    return Err(GmcfError::shape(prim.name(), "no inputs"));
                }
                let mut out = Vec::new();
                for &v in inputs {
                    self.vector_len(prim, v)?;
                    out.extend_from_slice(self.value(v));
                }
                (Shape::Vector(out.len()), out)
            }
            Primitive::Scale(_)
            | Primitive::Sum
            | Primitive::Sigmoid
            | Primitive::Tanh
            | Primitive::Relu
            | Primitive::BceWithLogit(_) => {
                Self::arity(prim, inputs, 1)?;
                let n = self.vector_len(prim, inputs[0])?;
                let a = self.value(inputs[0]);
                match prim {
                    Primitive::Scale(c) => (Shape::Vector(n), a.iter().map(|x| c * x).collect()),
                    Primitive::Sum => (Shape::Vector(1), vec![a.iter().sum()]),
                    Primitive::Sigmoid => (Shape::Vector(n), a.iter().map(|&x| sigmoid(x)).collect()),
                    Primitive::Tanh => (Shape::Vector(n), a.iter().map(|x| x.tanh()).collect()),
                    Primitive::Relu => (Shape::Vector(n), a.iter().map(|&x| x.max(0.0)).collect()),
                    Primitive::BceWithLogit(label) => {
                        if n != 1 {
                            return Err(GmcfError::shape(
                                prim.name(),
                                format!("expects a scalar logit, got length {n}"),
                            ));
                        }
                        (Shape::Vector(1), vec![bce(sigmoid(a[0]), label)])
                    }
                    _ => unreachable!(),
                }
            }
        };
        Ok(self.push(Origin::Op(prim, inputs.to_vec()), shape, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Primitive::Scale(c), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        self.record(Primitive::MatVec, &[m, x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Primitive::Concat, parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Dot, &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Result<Var> {
        self.record(Primitive::BceWithLogit(label), &[logit])
    }

    /// Left fold with `add`. The order of `terms` is the summation order.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| GmcfError::shape("add", "no terms to add"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Adjoint of every node with respect to `output`.
    fn adjoints(&self, output: Var) -> Result<Vec<Vec<f64>>> {
        if output.0 >= self.nodes.len() {
            return Err(GmcfError::Contract("output is not on this tape".into()));
        }
        if self.nodes[output.0].value.len() != 1 {
            return Err(GmcfError::Contract(format!(
                "backward needs a scalar output, got length {}",
                self.nodes[output.0].value.len()
            )));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); output.0 + 1];
        adj[output.0] = vec![1.0];
        for idx in (0..=output.0).rev() {
            if adj[idx].is_empty() {
                continue;
            }
            let node = &self.nodes[idx];
            let Origin::Op(prim, inputs) = &node.origin else {
                continue;
            };
            let g = std::mem::take(&mut adj[idx]);
            // Adjoint slot of `v`, taken out of `adj` so that two inputs can be
            // updated in turn; `put` returns it.
            let take = |adj: &mut Vec<Vec<f64>>, v: Var| -> Vec<f64> {
                let slot = std::mem::take(&mut adj[v.0]);
                if slot.is_empty() {
                    vec![0.0; self.nodes[v.0].value.len()]
                } else {
                    slot
                }
            };
            let put = |adj: &mut Vec<Vec<f64>>, v: Var, slot: Vec<f64>| adj[v.0] = slot;
            let unary = |adj: &mut Vec<Vec<f64>>, v: Var, f: &dyn Fn(usize) -> f64| {
                let mut a = take(adj, v);
                a.iter_mut().enumerate().for_each(|(k, x)| *x += f(k));
                put(adj, v, a);
            };
            match *prim {
                Primitive::Add => {
                    unary(&mut adj, inputs[0], &|k| g[k]);
                    unary(&mut adj, inputs[1], &|k| g[k]);
                }
                Primitive::Sub => {
                    unary(&mut adj, inputs[0], &|k| g[k]);
                    unary(&mut adj, inputs[1], &|k| -g[k]);
                }
                Primitive::Scale(c) => unary(&mut adj, inputs[0], &|k| c * g[k]),
                Primitive::Mul => {
                    let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                    unary(&mut adj, inputs[0], &|k| g[k] * b[k]);
                    unary(&mut adj, inputs[1], &|k| g[k] * a[k]);
                }
                Primitive::Dot => {
                    let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                    unary(&mut adj, inputs[0], &|k| g[0] * b[k]);
                    unary(&mut adj, inputs[1], &|k| g[0] * a[k]);
                }
                Primitive::MatVec => {
                    let Shape::Matrix(_, cols) = self.shape(inputs[0]) else {
                        unreachable!("checked at record time")
                    };
                    let (m, x) = (self.value(inputs[0]), self.value(inputs[1]));
                    let mut gm = take(&mut adj, inputs[0]);
                    for (row, &gi) in gm.chunks_exact_mut(cols).zip(&g) {
                        if gi != 0.0 {
                            row.iter_mut().zip(x).for_each(|(r, &xj)| *r += gi * xj);
                        }
                    }
                    put(&mut adj, inputs[0], gm);
                    let mut gx = take(&mut adj, inputs[1]);
                    for (row, &gi) in m.chunks_exact(cols).zip(&g) {
                        if gi != 0.0 {
                            gx.iter_mut().zip(row).for_each(|(r, &mij)| *r += gi * mij);
                        }
                    }
                    put(&mut adj, inputs[1], gx);
                }
                Primitive::Concat => {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = self.nodes[v.0].value.len();
                        unary(&mut adj, v, &|k| g[offset + k]);
                        offset += n;
                    }
                }
                Primitive::Sum => unary(&mut adj, inputs[0], &|_| g[0]),
                Primitive::Sigmoid => {
                    let y = &node.value;
                    unary(&mut adj, inputs[0], &|k| g[k] * y[k] * (1.0 - y[k]));
                }
                Primitive::Tanh => {
                    let y = &node.value;
                    unary(&mut adj, inputs[0], &|k| g[k] * (1.0 - y[k] * y[k]));
                }
                Primitive::Relu => {
                    // derivative at exactly 0 is 0
                    let a = self.value(inputs[0]);
                    unary(&mut adj, inputs[0], &|k| if a[k] > 0.0 { g[k] } else { 0.0 });
                }
                Primitive::BceWithLogit(label) => {
                    let p = sigmoid(self.value(inputs[0])[0]);
                    let d = if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                        0.0
                    } else {
                        p - label
                    };
                    unary(&mut adj, inputs[0], &|_| g[0] * d);
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of the scalar `output` with respect to every bound parameter.
    pub fn gradients(&self, output: Var) -> Result<Vec<(ParamId, Vec<f64>)>> {
        let adj = self.adjoints(output)?;
        Ok(self
            .bound_params()
            .map(|(id, v)| {
                let g = adj
                    .get(v.0)
                    .filter(|g| !g.is_empty())
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (id, g)
            })
            .collect())
    }

    /// Adds `d output / d p` into `p.grad` for every bound parameter, where
    /// `params[id.0]` is the parameter bound under `id`. Calling twice
    /// without zeroing accumulates.
    pub fn backward(&self, output: Var, params: &mut [&mut Parameter]) -> Result<()> {
        for (id, g) in self.gradients(output)? {
            let p = params
                .get_mut(id.0)
                .ok_or_else(|| GmcfError::Contract(format!("parameter {} not in registry", id.0)))?;
            if p.grad.len() != g.len() {
                return Err(GmcfError::shape(
                    "backward",
                    format!(
                        "parameter {} has {} entries, tape has {}",
                        p.name,
                        p.grad.len(),
                        g.len()
                    ),
                ));
            }
            p.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}

/// Anything that exposes its parameters in registry order.
pub trait ParameterSet {
    fn param_refs(&self) -> Vec<&Parameter>;
    fn param_refs_mut(&mut self) -> Vec<&mut Parameter>;
}

impl ParameterSet for [Parameter] {
    fn param_refs(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

/// Gradients below this magnitude are compared in absolute terms: central
/// differences carry roughly `1e-16 / step` of cancellation noise.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares tape gradients against central finite differences for every
/// entry of every bound parameter, returning the worst relative error
/// `|g - fd| / max(|g|, |fd|, GRAD_FLOOR)`.
///
/// `forward` must build a scalar on the given tape, binding the `k`-th
/// registry parameter under `ParamId(k)`. Parameters the forward never binds
/// are skipped. Parameter values are restored before returning.
pub fn gradient_check<P, F>(params: &mut P, step: f64, forward: F) -> Result<f64>
where
    P: ParameterSet + ?Sized,
    F: Fn(&mut Tape, &P) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(GmcfError::InvalidConfig(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let eval = |params: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, params)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(GmcfError::Numeric("forward value is not finite".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = forward(&mut tape, params)?;
    if !tape.scalar(out).is_finite() {
        return Err(GmcfError::Numeric("forward value is not finite".into()));
    }
    let shapes: Vec<usize> = params.param_refs().iter().map(|p| p.value.len()).collect();
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; shapes.len()];
    for (id, g) in tape.gradients(out)? {
        analytic[id.0] = Some(g);
    }

    let mut worst: f64 = 0.0;
    for (k, analytic) in analytic.iter().enumerate() {
        let Some(analytic) = analytic else { continue };
        for (e, &g) in analytic.iter().enumerate() {
            let orig = params.param_refs()[k].value[e];
            params.param_refs_mut()[k].value[e] = orig + step;
            let plus = eval(params);
            params.param_refs_mut()[k].value[e] = orig - step;
            let minus = eval(params);
            params.param_refs_mut()[k].value[e] = orig;
            let fd = (plus? - minus?) / (2.0 * step);
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
