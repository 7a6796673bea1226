//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! forward value immediately and pushes a node describing how to route
//! the output gradient back to its inputs. Nodes only ever reference
//! earlier nodes, so the tape is acyclic by construction and a single
//! reverse sweep in push order is a valid topological traversal.
//!
//! A graph is meant to live for one training step and be dropped after
//! [`Graph::backward`].

use super::tensor::Broadcast;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    Slice(Var, usize),
    Custom(Vec<Var>, BackwardFn<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = va.broadcast_kind(vb).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let out = va.zip_with(vb, name, f)?;
        self.push(name, out, op(a, b, kind), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == T::zero()) {
            return Err(TensorError::Domain { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("offset", out, Op::Offset(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add(xw, bias)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// Natural log; the input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        let out = self.value(a).map(|x| x.ln());
        self.push("log", out, Op::Log(a), &[a])
    }

    /// Square root; the input must be strictly positive so the derivative exists.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        let out = self.value(a).map(|x| x.sqrt());
        self.push("sqrt", out, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the input is not
    /// strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / T::lift(v.len() as f64));
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// `[m, n] -> [m]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "sum_rows on shape {:?}",
                v.shape()
            )));
        }
        let out = Tensor::from_vec(
            (0..v.rows())
                .map(|i| v.row(i).iter().copied().sum())
                .collect(),
        );
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "log_softmax_rows on shape {:?}",
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(v.len());
        for i in 0..v.rows() {
            let row = v.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.rows() != vb.rows() {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, p, q) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let out = Tensor::from_parts(vec![m, p + q], data);
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "gather_rows on shape {:?}",
                v.shape()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(TensorError::Contract(format!(
                "row index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * v.cols());
        for &i in indices {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), v.cols()], data);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        )
    }

    /// Contiguous run of elements starting at `start`, reshaped to `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let len: usize = shape.iter().product();
        if start + len > v.len() {
            return Err(TensorError::Contract(format!(
                "slice {start}..{} of {} elements",
                start + len,
                v.len()
            )));
        }
        let out = Tensor::new(shape.to_vec(), v.data()[start..start + len].to_vec())?;
        self.push("slice", out, Op::Slice(a, start), &[a])
    }

    /// Operation with a caller-supplied backward rule.
    ///
    /// `backward` receives the output gradient and the input values and must
    /// return one gradient per input, shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>> + 'static,
    ) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom(inputs.to_vec(), Box::new(backward)),
            inputs,
        )
    }

    /// Propagates `d loss / d node` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].tracked {
                    continue;
                }
                accumulate(&mut grads[parent.0], pg)?;
            }
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.tracked, g) {
                (Op::Leaf, true, None) => Some(Tensor::zeros(node.value.shape())),
                (_, _, g) => g,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b, k) => vec![
                (*a, g.reduce_to(val(*a).shape(), *k, true)),
                (*b, g.reduce_to(val(*b).shape(), *k, false)),
            ],
            Op::Sub(a, b, k) => vec![
                (*a, g.reduce_to(val(*a).shape(), *k, true)),
                (*b, g.map(|x| -x).reduce_to(val(*b).shape(), *k, false)),
            ],
            Op::Mul(a, b, k) => vec![
                (*a, g.mul(val(*b))?.reduce_to(val(*a).shape(), *k, true)),
                (*b, g.mul(val(*a))?.reduce_to(val(*b).shape(), *k, false)),
            ],
            Op::Div(a, b, k) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g.div(vb)?;
                let gb = g.mul(va)?.div(&vb.map(|x| x * x))?.map(|x| -x);
                vec![
                    (*a, ga.reduce_to(va.shape(), *k, true)),
                    (*b, gb.reduce_to(vb.shape(), *k, false)),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g.matmul(&vb.transpose()?)?.reshape(va.shape())?;
                let a2 = va.clone().reshape(&[va.rows(), va.cols()])?;
                let gb = a2.transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(a) => vec![(
                *a,
                g.zip_with(
                    val(*a),
                    "relu'",
                    |d, x| {
                        if x > T::zero() {
                            d
                        } else {
                            T::zero()
                        }
                    },
                )?,
            )],
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Log(a) => vec![(*a, g.div(val(*a))?)],
            Op::Sqrt(a) => {
                let half = T::lift(0.5);
                vec![(*a, g.zip_with(&node.value, "sqrt'", |d, y| d * half / y)?)]
            }
            Op::Square(a) => {
                let two = T::lift(2.0);
                vec![(*a, g.zip_with(val(*a), "square'", |d, x| d * two * x)?)]
            }
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip_with(val(*a), "clamp'", |d, x| {
                    if x > *lo && x < *hi {
                        d
                    } else {
                        T::zero()
                    }
                })?,
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let v = val(*a);
                let d = g.data()[0] / T::lift(v.len() as f64);
                vec![(*a, Tensor::full(v.shape(), d))]
            }
            Op::SumRows(a) => {
                let v = val(*a);
                let n = v.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d, n))
                    .collect();
                vec![(*a, Tensor::from_parts(v.shape().to_vec(), data))]
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut data = Vec::with_capacity(y.len());
                for i in 0..y.rows() {
                    let gs: T = g.row(i).iter().copied().sum();
                    data.extend(
                        g.row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(&d, &yy)| d - yy.exp() * gs),
                    );
                }
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), data))]
            }
            Op::ConcatCols(a, b) => {
                let p = val(*a).cols();
                let q = val(*b).cols();
                let m = g.rows();
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for i in 0..m {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![
                    (*a, Tensor::from_parts(vec![m, p], ga)),
                    (*b, Tensor::from_parts(vec![m, q], gb)),
                ]
            }
            Op::GatherRows(a, indices) => {
                let v = val(*a);
                let n = v.cols();
                let mut data = vec![T::zero(); v.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &s) in data[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                        *d = *d + s;
                    }
                }
                vec![(*a, Tensor::from_parts(v.shape().to_vec(), data))]
            }
            Op::Slice(a, start) => {
                let v = val(*a);
                let mut data = vec![T::zero(); v.len()];
                data[*start..*start + g.len()].copy_from_slice(g.data());
                vec![(*a, Tensor::from_parts(v.shape().to_vec(), data))]
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let out = backward(g, &values);
                if out.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "custom backward returned {} gradients for {} inputs",
                        out.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(out).collect()
            }
        };
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "backward",
                    lhs: acc.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            *acc = acc.add(&g)?;
        }
    }
    Ok(())
}

/// Gradients of a scalar loss with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter leaf. Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v)
            .expect("gradient requested for an untracked node")
    }
}
