//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Tensor`] is a cheap copyable handle into a
//! graph. Leaves are either parameters (gradients are accumulated for them) or
//! constants (no gradient is ever computed through them).

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("value count {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduction over an empty extent")]
    EmptyReduction,
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Sqrt,
    /// `sqrt(x)` whose derivative is evaluated as `1 / (2 sqrt(x + eps))`,
    /// finite at `x = 0`.
    SqrtEps(f64),
    Clamp(f64, f64),
    LeakyRelu,
    Sigmoid,
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Which operand of a binary op is a one-element tensor broadcast over the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Sparse linear resampling used by [`Graph::replace_gather`]: every listed
/// destination element is replaced by a weighted sum of source elements.
#[derive(Debug, Clone, Default)]
pub struct GatherMap {
    pub entries: Vec<GatherEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct GatherEntry {
    pub dest: usize,
    pub taps: [(usize, f64); 4],
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        broadcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
        log: bool,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        // input flat index -> output flat index (sum/mean) or argmax per output (max)
        routing: Vec<usize>,
        group: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    BiasAdd {
        input: usize,
        bias: usize,
        inner: usize,
    },
    Reshape {
        a: usize,
    },
    /// `source_index[o]` is the input flat index read by output `o`.
    Index {
        a: usize,
        source_index: Vec<usize>,
    },
    ReplaceGather {
        base: usize,
        source: usize,
        map: Arc<GatherMap>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. Distinct graphs share nothing and can live on
/// different threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if values.len() != numel(shape) {
            return Err(TensorError::BadLength {
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(values, shape, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Tensor {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn item(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, `None` before any backward
    /// pass or for constants.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ----- elementwise -----

    pub fn binary(&mut self, kind: BinaryKind, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (la, lb) = (numel(sa), numel(sb));
        let broadcast = if sa == sb {
            Broadcast::None
        } else if lb == 1 {
            Broadcast::Rhs
        } else if la == 1 {
            Broadcast::Lhs
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        };
        let shape = if broadcast == Broadcast::Lhs {
            sb.clone()
        } else {
            sa.clone()
        };
        let n = numel(&shape);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value: Vec<f64> = match broadcast {
            Broadcast::None => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::Lhs => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        debug_assert_eq!(value.len(), n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Tensor) -> Tensor {
        let va = &self.nodes[a.0].value;
        let value: Vec<f64> = match kind {
            UnaryKind::Sqrt | UnaryKind::SqrtEps(_) => va.iter().map(|x| x.sqrt()).collect(),
            UnaryKind::Clamp(lo, hi) => va.iter().map(|x| x.clamp(lo, hi)).collect(),
            UnaryKind::LeakyRelu => va
                .iter()
                .map(|&x| if x >= 0.0 { x } else { LEAKY_SLOPE * x })
                .collect(),
            UnaryKind::Sigmoid => va.iter().map(|&x| sigmoid(x)).collect(),
            UnaryKind::AddScalar(s) => va.iter().map(|x| x + s).collect(),
            UnaryKind::MulScalar(s) => va.iter().map(|x| x * s).collect(),
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(shape, value, Op::Unary { kind, a: a.0 }, rg)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    pub fn leaky_relu(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::LeakyRelu, a)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn add_scalar(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(UnaryKind::AddScalar(s), a)
    }

    pub fn mul_scalar(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(UnaryKind::MulScalar(s), a)
    }

    // ----- softmax -----

    fn axis_split(&self, a: Tensor, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn softmax_impl(&mut self, a: Tensor, axis: usize, log: bool) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(a, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let va = &self.nodes[a.0].value;
        let mut value = vec![0.0; va.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| va[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|k| (va[at(k)] - max).exp()).sum();
                let log_sum = sum.ln();
                for k in 0..len {
                    let shifted = va[at(k)] - max;
                    value[at(k)] = if log {
                        shifted - log_sum
                    } else {
                        shifted.exp() / sum
                    };
                }
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape, value, Op::Softmax { a: a.0, axis, log }, rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the per-group maximum.
    pub fn softmax(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        self.softmax_impl(a, axis, true)
    }

    // ----- reductions -----

    /// Reduces over `axes` (removed from the result shape). An empty `axes`
    /// slice reduces over every axis and yields a scalar.
    pub fn reduce(&mut self, kind: ReduceKind, a: Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let all: Vec<usize>;
        let axes = if axes.is_empty() {
            all = (0..rank).collect();
            &all[..]
        } else {
            axes
        };
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let group: usize = (0..rank).filter(|&d| reduced[d]).map(|d| shape[d]).product();
        let n_in = numel(&shape);
        if group == 0 || n_in == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
        let out_strides = strides(&out_shape);
        let n_out = numel(&out_shape);

        // Map every input flat index to its output slot.
        let mut out_of = vec![0usize; n_in];
        let mut idx = vec![0usize; rank];
        for slot in out_of.iter_mut() {
            let mut o = 0;
            let mut k = 0;
            for d in 0..rank {
                if !reduced[d] {
                    o += idx[d] * out_strides[k];
                    k += 1;
                }
            }
            *slot = o;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let va = &self.nodes[a.0].value;
        let (value, routing) = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut v = vec![0.0; n_out];
                for (i, &o) in out_of.iter().enumerate() {
                    v[o] += va[i];
                }
                if kind == ReduceKind::Mean {
                    for x in &mut v {
                        *x /= group as f64;
                    }
                }
                (v, out_of)
            }
            ReduceKind::Max => {
                let mut best = vec![usize::MAX; n_out];
                for (i, &o) in out_of.iter().enumerate() {
                    // strict comparison keeps the lowest flat index on ties
                    if best[o] == usize::MAX || va[i] > va[best[o]] {
                        best[o] = i;
                    }
                }
                let v = best.iter().map(|&i| va[i]).collect();
                (v, best)
            }
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            out_shape,
            value,
            Op::Reduce {
                kind,
                a: a.0,
                routing,
                group,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, a, &[])
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, a, &[])
    }

    pub fn max(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, a, &[])
    }

    // ----- convolution -----

    /// Cross-correlation of `input [Cin,H,W]` with `kernel [Cout,Cin,k,k]`.
    pub fn conv2d(
        &mut self,
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(TensorError::InvalidGeometry(format!(
                "conv2d expects input [C,H,W] and kernel [O,C,k,k], got {si:?} and {sk:?}"
            )));
        }
        if sk[1] != si[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let k = sk[2];
        if stride == 0 || k == 0 || k > si[1] + 2 * padding || k > si[2] + 2 * padding {
            return Err(TensorError::InvalidGeometry(format!(
                "kernel {k} stride {stride} padding {padding} on {}x{}",
                si[1], si[2]
            )));
        }
        let geom = ConvGeometry {
            in_channels: si[0],
            in_height: si[1],
            in_width: si[2],
            out_channels: sk[0],
            kernel: k,
            stride,
            padding,
            out_height: (si[1] + 2 * padding - k) / stride + 1,
            out_width: (si[2] + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(&self.nodes[input.0].value, &geom);
        let (m, kk, n) = (geom.out_channels, geom.patch_len(), geom.positions());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            kk,
            n,
            &self.nodes[kernel.0].value,
            Layout::RowMajor,
            &cols,
            Layout::RowMajor,
            &mut out,
        );
        let rg = self.rg(&[input.0, kernel.0]);
        Ok(self.push(
            vec![geom.out_channels, geom.out_height, geom.out_width],
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds `bias[C]` to every element of channel `c` of `input [C,...]`.
    pub fn bias_add(&mut self, input: Tensor, bias: Tensor) -> Result<Tensor> {
        let si = &self.nodes[input.0].shape;
        let sb = &self.nodes[bias.0].shape;
        if si.is_empty() || sb.len() != 1 || sb[0] != si[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: si.clone(),
                rhs: sb.clone(),
            });
        }
        let inner: usize = si[1..].iter().product();
        let vb = &self.nodes[bias.0].value;
        let value: Vec<f64> = self.nodes[input.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i / inner])
            .collect();
        let shape = si.clone();
        let rg = self.rg(&[input.0, bias.0]);
        Ok(self.push(
            shape,
            value,
            Op::BiasAdd {
                input: input.0,
                bias: bias.0,
                inner,
            },
            rg,
        ))
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let old = &self.nodes[a.0].shape;
        if numel(old) != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a: a.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(TensorError::InvalidGeometry(format!(
                "permutation {axes:?} for rank {rank}"
            )));
        }
        for &ax in axes {
            if ax >= rank || seen[ax] {
                return Err(TensorError::InvalidGeometry(format!(
                    "permutation {axes:?} for rank {rank}"
                )));
            }
            seen[ax] = true;
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let mapped_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let source_index = walk_index(&out_shape, &mapped_strides, 0);
        Ok(self.index(a, out_shape, source_index))
    }

    /// Keeps indices `start..start+len` of `axis`.
    pub fn narrow(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::InvalidGeometry(format!(
                "narrow {start}..{} of extent {}",
                start + len,
                shape[axis]
            )));
        }
        let in_strides = strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let source_index = walk_index(&out_shape, &in_strides, start * in_strides[axis]);
        Ok(self.index(a, out_shape, source_index))
    }

    fn index(&mut self, a: Tensor, shape: Vec<usize>, source_index: Vec<usize>) -> Tensor {
        let va = &self.nodes[a.0].value;
        let value = source_index.iter().map(|&i| va[i]).collect();
        let rg = self.rg(&[a.0]);
        self.push(
            shape,
            value,
            Op::Index {
                a: a.0,
                source_index,
            },
            rg,
        )
    }

    /// Copies `base` and overwrites each destination listed in `map` with the
    /// weighted sum of its source taps, optionally clamped into `bounds`.
    /// Gradients reach `base` only at untouched positions.
    pub fn replace_gather(
        &mut self,
        base: Tensor,
        source: Tensor,
        map: Arc<GatherMap>,
        bounds: Option<(f64, f64)>,
    ) -> Result<Tensor> {
        let nb = self.nodes[base.0].value.len();
        let ns = self.nodes[source.0].value.len();
        let mut value = self.nodes[base.0].value.clone();
        let vs = &self.nodes[source.0].value;
        for e in &map.entries {
            if e.dest >= nb || e.taps.iter().any(|&(s, _)| s >= ns) {
                return Err(TensorError::InvalidGeometry(
                    "gather entry out of range".into(),
                ));
            }
            let mut v: f64 = e.taps.iter().map(|&(s, w)| w * vs[s]).sum();
            if let Some((lo, hi)) = bounds {
                v = v.clamp(lo, hi);
            }
            value[e.dest] = v;
        }
        let shape = self.nodes[base.0].shape.clone();
        let rg = self.rg(&[base.0, source.0]);
        Ok(self.push(
            shape,
            value,
            Op::ReplaceGather {
                base: base.0,
                source: source.0,
                map,
            },
            rg,
        ))
    }

    // ----- backward -----

    /// Accumulates d(root)/d(leaf) into every parameter leaf reachable from
    /// `root`. Calling it twice without [`Graph::zero_grad`] adds twice.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        let root_shape = &self.nodes[root.0].shape;
        if numel(root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(dout) = adj[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = self.grads[id].get_or_insert_with(|| vec![0.0; dout.len()]);
                for (acc, d) in g.iter_mut().zip(&dout) {
                    *acc += d;
                }
                continue;
            }
            self.propagate(id, &dout, &mut adj);
        }
        // parameters never reached still report a (zero) gradient
        for (id, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[id].is_none() {
                self.grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! grad_of {
            ($i:expr) => {
                accumulator(adj, nodes, $i)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (a, b) = (*a, *b);
                let va = &nodes[a].value;
                let vb = &nodes[b].value;
                let pick = |v: &[f64], i: usize, scalar: bool| if scalar { v[0] } else { v[i] };
                let a_scalar = *broadcast == Broadcast::Lhs;
                let b_scalar = *broadcast == Broadcast::Rhs;
                if wants(a) {
                    let ga = grad_of!(a);
                    for (i, &d) in dout.iter().enumerate() {
                        let y = pick(vb, i, b_scalar);
                        let local = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => y,
                            BinaryKind::Div => 1.0 / y,
                        };
                        ga[if a_scalar { 0 } else { i }] += d * local;
                    }
                }
                if wants(b) {
                    let gb = grad_of!(b);
                    for (i, &d) in dout.iter().enumerate() {
                        let x = pick(va, i, a_scalar);
                        let y = pick(vb, i, b_scalar);
                        let local = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => x,
                            BinaryKind::Div => -x / (y * y),
                        };
                        gb[if b_scalar { 0 } else { i }] += d * local;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let va = &nodes[a].value;
                let vo = &node.value;
                let ga = grad_of!(a);
                for (i, &d) in dout.iter().enumerate() {
                    let x = va[i];
                    let local = match *kind {
                        UnaryKind::Sqrt => 0.5 / vo[i],
                        UnaryKind::SqrtEps(eps) => 0.5 / (x + eps).sqrt(),
                        UnaryKind::Clamp(lo, hi) => {
                            if x >= lo && x <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::LeakyRelu => {
                            if x >= 0.0 {
                                1.0
                            } else {
                                LEAKY_SLOPE
                            }
                        }
                        UnaryKind::Sigmoid => vo[i] * (1.0 - vo[i]),
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::MulScalar(s) => s,
                    };
                    ga[i] += d * local;
                }
            }
            Op::Softmax { a, axis, log } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let shape = &nodes[a].shape;
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let y = &node.value;
                let ga = grad_of!(a);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        if *log {
                            let total: f64 = (0..len).map(|k| dout[at(k)]).sum();
                            for k in 0..len {
                                ga[at(k)] += dout[at(k)] - y[at(k)].exp() * total;
                            }
                        } else {
                            let dot: f64 = (0..len).map(|k| dout[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                ga[at(k)] += y[at(k)] * (dout[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reduce {
                kind,
                a,
                routing,
                group,
            } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let ga = grad_of!(a);
                match kind {
                    ReduceKind::Sum => {
                        for (i, &o) in routing.iter().enumerate() {
                            ga[i] += dout[o];
                        }
                    }
                    ReduceKind::Mean => {
                        let inv = 1.0 / *group as f64;
                        for (i, &o) in routing.iter().enumerate() {
                            ga[i] += dout[o] * inv;
                        }
                    }
                    ReduceKind::Max => {
                        for (o, &i) in routing.iter().enumerate() {
                            ga[i] += dout[o];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (input, kernel) = (*input, *kernel);
                let (m, kk, n) = (geom.out_channels, geom.patch_len(), geom.positions());
                if wants(kernel) {
                    let gk = grad_of!(kernel);
                    // dK[m,kk] += dY[m,n] * cols^T[n,kk]
                    gemm_acc(m, n, kk, dout, Layout::RowMajor, cols, Layout::Transposed(n), gk);
                }
                if wants(input) {
                    let mut dcols = vec![0.0; kk * n];
                    // dcols[kk,n] = K^T[kk,m] * dY[m,n]
                    gemm(
                        kk,
                        m,
                        n,
                        &nodes[kernel].value,
                        Layout::Transposed(kk),
                        dout,
                        Layout::RowMajor,
                        &mut dcols,
                    );
                    let gi = grad_of!(input);
                    col2im_acc(&dcols, geom, gi);
                }
            }
            Op::BiasAdd { input, bias, inner } => {
                let (input, bias) = (*input, *bias);
                if wants(input) {
                    let gi = grad_of!(input);
                    for (g, d) in gi.iter_mut().zip(dout) {
                        *g += d;
                    }
                }
                if wants(bias) {
                    let gb = grad_of!(bias);
                    for (i, &d) in dout.iter().enumerate() {
                        gb[i / inner] += d;
                    }
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if wants(a) {
                    let ga = grad_of!(a);
                    for (g, d) in ga.iter_mut().zip(dout) {
                        *g += d;
                    }
                }
            }
            Op::Index { a, source_index } => {
                let a = *a;
                if wants(a) {
                    let ga = grad_of!(a);
                    for (o, &i) in source_index.iter().enumerate() {
                        ga[i] += dout[o];
                    }
                }
            }
            Op::ReplaceGather { base, source, map } => {
                let (base, source) = (*base, *source);
                if wants(base) {
                    let mut masked = dout.to_vec();
                    for e in &map.entries {
                        masked[e.dest] = 0.0;
                    }
                    let gb = grad_of!(base);
                    for (g, d) in gb.iter_mut().zip(&masked) {
                        *g += d;
                    }
                }
                if wants(source) {
                    let gs = grad_of!(source);
                    for e in &map.entries {
                        let d = dout[e.dest];
                        for &(s, w) in &e.taps {
                            gs[s] += d * w;
                        }
                    }
                }
            }
        }
    }
}

fn accumulator<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
    let len = nodes[i].value.len();
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

/// Enumerates flat source indices for an output of `shape` whose axis `d`
/// advances the source by `strides[d]`.
fn walk_index(shape: &[usize], strides: &[usize], offset: usize) -> Vec<usize> {
    let n = numel(shape);
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = offset;
    for _ in 0..n {
        out.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            pos -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Layout {
    RowMajor,
    /// Logical matrix is the transpose of a row-major buffer whose row length is given.
    Transposed(usize),
}

/// c[m,n] = a[m,k] * b[k,n]
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    gemm_impl(m, k, n, a, la, b, lb, c, 0.0);
}

/// c[m,n] += a[m,k] * b[k,n]
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    gemm_impl(m, k, n, a, la, b, lb, c, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_impl(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed(row) => (1, row as isize),
    };
    let (rsb, csb) = match lb {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed(row) => (1, row as isize),
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can produce.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (g.kernel, g.positions());
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_height as isize {
                        continue;
                    }
                    let src_row = (c * g.in_height + iy as usize) * g.in_width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_width {
                            dst[oy * g.out_width + ox] = input[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (k, p) = (g.kernel, g.positions());
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_height as isize {
                        continue;
                    }
                    let dst_row = (c * g.in_height + iy as usize) * g.in_width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_width {
                            out[dst_row + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}
