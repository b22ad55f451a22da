//! Build-then-backward computation graph.
//!
//! Nodes are appended in topological order; `backward` walks them in
//! reverse, accumulating gradients. Every op validates shapes at build
//! time and checks its output for NaN/Inf before it enters the graph.

use super::conv::{self, ConvDims};
use super::ops::{self, BinKind, UnaryKind};
use super::{numel, Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

pub const NORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: VarId,
    },
    AffineScalar {
        x: VarId,
        mul: f64,
    },
    Binary {
        kind: BinKind,
        a: VarId,
        b: VarId,
    },
    BiasAdd {
        x: VarId,
        b: VarId,
    },
    BroadcastVec {
        v: VarId,
    },
    Reshape {
        x: VarId,
    },
    Permute {
        x: VarId,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<VarId>,
        axis: usize,
    },
    Slice {
        x: VarId,
        axis: usize,
        start: usize,
    },
    SumAll {
        x: VarId,
    },
    MeanAll {
        x: VarId,
    },
    ReduceAxis {
        x: VarId,
        axis: usize,
        mean: bool,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    MatmulNN {
        a: VarId,
        b: VarId,
    },
    MatmulNT {
        a: VarId,
        b: VarId,
    },
    Conv3d {
        x: VarId,
        w: VarId,
        b: VarId,
        dims: ConvDims,
    },
    TConv3d {
        x: VarId,
        w: VarId,
        b: VarId,
        dims: ConvDims,
    },
    GroupNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        groups: usize,
    },
    SoftmaxLast {
        x: VarId,
    },
    CausalSoftmax {
        x: VarId,
    },
    Rope3d {
        x: VarId,
        alloc: [usize; 3],
        pos: Box<[[u32; 3]]>,
    },
    LfqQuantize {
        x: VarId,
    },
    LfqUsageEntropy {
        x: VarId,
        quant_dim: usize,
    },
    CrossEntropyLogits {
        logits: VarId,
        targets: Box<[u32]>,
    },
    EmbedLookup {
        table: VarId,
        ids: Box<[u32]>,
    },
    SegmentEmbed {
        x: VarId,
        table: VarId,
        seg: Box<[u32]>,
    },
    Dropout {
        x: VarId,
        mask: Box<[bool]>,
        keep: f64,
    },
    Clamp {
        x: VarId,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    fn parents(&self, buf: &mut Vec<usize>) {
        buf.clear();
        match self {
            Op::Leaf => {}
            Op::Unary { x, .. }
            | Op::AffineScalar { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::ReduceAxis { x, .. }
            | Op::SoftmaxLast { x }
            | Op::CausalSoftmax { x }
            | Op::Rope3d { x, .. }
            | Op::LfqQuantize { x }
            | Op::LfqUsageEntropy { x, .. }
            | Op::Dropout { x, .. }
            | Op::Clamp { x, .. } => buf.push(x.0),
            Op::Binary { a, b, .. } | Op::MatmulNN { a, b } | Op::MatmulNT { a, b } => {
                buf.push(a.0);
                buf.push(b.0);
            }
            Op::BiasAdd { x, b } => {
                buf.push(x.0);
                buf.push(b.0);
            }
            Op::BroadcastVec { v } => buf.push(v.0),
            Op::Concat { parts, .. } => buf.extend(parts.iter().map(|p| p.0)),
            Op::Linear { x, w, b } => {
                buf.push(x.0);
                buf.push(w.0);
                if let Some(b) = b {
                    buf.push(b.0);
                }
            }
            Op::Conv3d { x, w, b, .. } | Op::TConv3d { x, w, b, .. } => {
                buf.push(x.0);
                buf.push(w.0);
                buf.push(b.0);
            }
            Op::GroupNorm { x, gain, bias, .. } => {
                buf.push(x.0);
                buf.push(gain.0);
                buf.push(bias.0);
            }
            Op::CrossEntropyLogits { logits, .. } => buf.push(logits.0),
            Op::EmbedLookup { table, .. } => buf.push(table.0),
            Op::SegmentEmbed { x, table, .. } => {
                buf.push(x.0);
                buf.push(table.0);
            }
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
    op: Op,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    threads: usize,
}

fn all_finite<T: Real>(data: &[T]) -> bool {
    data.iter().all(|v| v.is_finite())
}

fn ensure<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn split_pair<T>(
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
) -> (&mut Option<Vec<T>>, &mut Option<Vec<T>>) {
    debug_assert_ne!(a, b);
    if a < b {
        let (l, r) = grads.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = grads.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            threads: crate::threads(),
        }
    }

    pub fn with_threads(threads: usize) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            threads: threads.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: VarId) -> Tensor<T> {
        Tensor::from_vec(&self.nodes[id.0].shape, self.nodes[id.0].data.clone())
            .expect("node invariant")
    }

    pub fn scalar_value(&self, id: VarId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<VarId, TensorError> {
        debug_assert_eq!(data.len(), numel(&shape));
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        self.grads.push(None);
        Ok(VarId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<VarId, TensorError> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            requires_grad,
            "leaf",
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<VarId, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::ShapeMismatch(format!(
                "constant data length {} vs shape {:?}",
                data.len(),
                shape
            )));
        }
        self.push(shape.to_vec(), data, Op::Leaf, false, "constant")
    }

    pub fn scalar(&mut self, v: T) -> Result<VarId, TensorError> {
        self.push(vec![], vec![v], Op::Leaf, false, "scalar")
    }

    fn unary(&mut self, kind: UnaryKind, x: VarId) -> Result<VarId, TensorError> {
        let data = ops::unary_forward(kind, &self.nodes[x.0].data);
        let needs = self.needs(&[x]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::Unary { kind, x },
            needs,
            "unary",
        )
    }

    pub fn silu(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn abs(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn ln(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(UnaryKind::Ln, x)
    }

    /// y = mul * x + add, with f64 coefficients applied in T's precision.
    pub fn affine(&mut self, x: VarId, mul: f64, add: f64) -> Result<VarId, TensorError> {
        let (m, a) = (T::from_f64(mul), T::from_f64(add));
        let data = self.nodes[x.0].data.iter().map(|&v| m * v + a).collect();
        let needs = self.needs(&[x]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::AffineScalar { x, mul },
            needs,
            "affine",
        )
    }

    pub fn neg(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.affine(x, -1.0, 0.0)
    }

    fn binary(&mut self, kind: BinKind, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "binary op on {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data = ops::binary_forward(kind, &self.nodes[a.0].data, &self.nodes[b.0].data);
        let needs = self.needs(&[a, b]);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Binary { kind, a, b },
            needs,
            "binary",
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Broadcast add of a rank-1 bias over the last axis.
    pub fn bias_add(&mut self, x: VarId, b: VarId) -> Result<VarId, TensorError> {
        let c = *self.nodes[x.0].shape.last().ok_or_else(|| {
            TensorError::ShapeMismatch("bias_add needs rank >= 1 input".into())
        })?;
        if self.nodes[b.0].shape != [c] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias shape {:?} vs channel count {}",
                self.nodes[b.0].shape, c
            )));
        }
        let data = ops::bias_add_forward(&self.nodes[x.0].data, &self.nodes[b.0].data);
        let needs = self.needs(&[x, b]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::BiasAdd { x, b },
            needs,
            "bias_add",
        )
    }

    /// Tile a rank-1 vector over leading dims: out shape = lead ++ [len(v)].
    pub fn broadcast_vec(&mut self, v: VarId, lead: &[usize]) -> Result<VarId, TensorError> {
        if self.nodes[v.0].shape.len() != 1 {
            return Err(TensorError::ShapeMismatch(
                "broadcast_vec expects a rank-1 input".into(),
            ));
        }
        let c = self.nodes[v.0].shape[0];
        let reps = numel(lead);
        let mut data = Vec::with_capacity(reps * c);
        for _ in 0..reps {
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        let mut shape = lead.to_vec();
        shape.push(c);
        let needs = self.needs(&[v]);
        self.push(shape, data, Op::BroadcastVec { v }, needs, "broadcast_vec")
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId, TensorError> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(&[x]);
        self.push(shape.to_vec(), data, Op::Reshape { x }, needs, "reshape")
    }

    pub fn permute(&mut self, x: VarId, perm: &[usize]) -> Result<VarId, TensorError> {
        let shape = &self.nodes[x.0].shape;
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArg(format!(
                "permutation {:?} invalid for rank {}",
                perm, rank
            )));
        }
        let data = ops::permute_forward(&self.nodes[x.0].data, shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(&[x]);
        self.push(
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
            "permute",
        )
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg("concat of zero parts".into()));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidArg(format!("concat axis {} out of range", axis)));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat shapes {:?} vs {:?}",
                    s, first
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); numel(&out_shape)];
        let mut off = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let len = s[axis];
            let src = &self.nodes[p.0].data;
            for o in 0..outer {
                let dst_base = (o * axis_total + off) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            off += len;
        }
        let needs = self.needs(parts);
        self.push(
            out_shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    pub fn slice(
        &mut self,
        x: VarId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<VarId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::InvalidArg(format!(
                "slice axis {} [{}, {}) of {:?}",
                axis,
                start,
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&out_shape));
        let src = &self.nodes[x.0].data;
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let needs = self.needs(&[x]);
        self.push(out_shape, data, Op::Slice { x, axis, start }, needs, "slice")
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let s: T = self.nodes[x.0].data.iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push(vec![], vec![s], Op::SumAll { x }, needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(TensorError::InvalidArg("mean of empty tensor".into()));
        }
        let s: T = self.nodes[x.0].data.iter().copied().sum();
        let mean = s / T::from_f64(n as f64);
        let needs = self.needs(&[x]);
        self.push(vec![], vec![mean], Op::MeanAll { x }, needs, "mean_all")
    }

    /// Sum or mean over one axis, dropping it.
    pub fn reduce_axis(&mut self, x: VarId, axis: usize, mean: bool) -> Result<VarId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArg(format!("reduce axis {} of {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut data = vec![T::zero(); outer * inner];
        let src = &self.nodes[x.0].data;
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_f64(len as f64);
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let needs = self.needs(&[x]);
        self.push(
            out_shape,
            data,
            Op::ReduceAxis { x, axis, mean },
            needs,
            "reduce_axis",
        )
    }

    /// y[..., n] = sum_k x[..., k] w[k, n] + b[n]
    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId, TensorError> {
        let xshape = self.nodes[x.0].shape.clone();
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 2 || xshape.last() != Some(&wshape[0]) {
            return Err(TensorError::ShapeMismatch(format!(
                "linear x {:?} vs w {:?}",
                xshape, wshape
            )));
        }
        let (k, n) = (wshape[0], wshape[1]);
        if let Some(b) = b {
            if self.nodes[b.0].shape != [n] {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear bias {:?} vs out features {}",
                    self.nodes[b.0].shape, n
                )));
            }
        }
        let bdata = b.map(|b| self.nodes[b.0].data.as_slice());
        let data = ops::linear_forward(&self.nodes[x.0].data, &self.nodes[w.0].data, bdata, k, n);
        let mut out_shape = xshape;
        *out_shape.last_mut().unwrap() = n;
        let needs = match b {
            Some(b) => self.needs(&[x, w, b]),
            None => self.needs(&[x, w]),
        };
        self.push(out_shape, data, Op::Linear { x, w, b }, needs, "linear")
    }

    fn matmul_dims(
        &self,
        a: VarId,
        b: VarId,
        transposed: bool,
    ) -> Result<(usize, usize, usize, usize, Vec<usize>), TensorError> {
        let ashape = &self.nodes[a.0].shape;
        let bshape = &self.nodes[b.0].shape;
        if ashape.len() < 2 || ashape.len() != bshape.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul ranks {:?} vs {:?}",
                ashape, bshape
            )));
        }
        let r = ashape.len();
        if ashape[..r - 2] != bshape[..r - 2] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul batch dims {:?} vs {:?}",
                ashape, bshape
            )));
        }
        let batch: usize = ashape[..r - 2].iter().product();
        let (m, k) = (ashape[r - 2], ashape[r - 1]);
        let n = if transposed {
            if bshape[r - 1] != k {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul_nt inner dims {:?} vs {:?}",
                    ashape, bshape
                )));
            }
            bshape[r - 2]
        } else {
            if bshape[r - 2] != k {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul_nn inner dims {:?} vs {:?}",
                    ashape, bshape
                )));
            }
            bshape[r - 1]
        };
        let mut out_shape = ashape.clone();
        out_shape[r - 2] = m;
        out_shape[r - 1] = n;
        Ok((batch, m, k, n, out_shape))
    }

    pub fn matmul_nn(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (batch, m, k, n, out_shape) = self.matmul_dims(a, b, false)?;
        let data = ops::matmul_nn_forward(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            batch,
            m,
            k,
            n,
        );
        let needs = self.needs(&[a, b]);
        self.push(out_shape, data, Op::MatmulNN { a, b }, needs, "matmul_nn")
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (batch, m, k, n, out_shape) = self.matmul_dims(a, b, true)?;
        let data = ops::matmul_nt_forward(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            batch,
            m,
            k,
            n,
        );
        let needs = self.needs(&[a, b]);
        self.push(out_shape, data, Op::MatmulNT { a, b }, needs, "matmul_nt")
    }

    /// Causal 3D convolution; see `tensor::conv` for padding rules.
    pub fn conv3d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: [usize; 3],
    ) -> Result<VarId, TensorError> {
        if x == w || x == b || w == b {
            return Err(TensorError::InvalidArg("conv3d arguments must be distinct nodes".into()));
        }
        let dims = ConvDims::conv(
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            self.nodes[b.0].data.len(),
            stride,
        )?;
        let data = conv::conv3d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            &dims,
            self.threads,
        );
        let needs = self.needs(&[x, w, b]);
        self.push(
            dims.out_shape(),
            data,
            Op::Conv3d { x, w, b, dims },
            needs,
            "conv3d",
        )
    }

    /// Causal transpose 3D convolution (upsampling by stride per axis).
    pub fn tconv3d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: [usize; 3],
    ) -> Result<VarId, TensorError> {
        if x == w || x == b || w == b {
            return Err(TensorError::InvalidArg("tconv3d arguments must be distinct nodes".into()));
        }
        let dims = ConvDims::tconv(
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            self.nodes[b.0].data.len(),
            stride,
        )?;
        let data = conv::tconv3d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            &dims,
            self.threads,
        );
        let needs = self.needs(&[x, w, b]);
        self.push(
            dims.out_shape(),
            data,
            Op::TConv3d { x, w, b, dims },
            needs,
            "tconv3d",
        )
    }

    /// Per-position normalization over groups of channels (last axis).
    /// With `groups == 1` this is layer normalization over the last axis.
    pub fn group_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        groups: usize,
    ) -> Result<VarId, TensorError> {
        if x == gain || x == bias || gain == bias {
            return Err(TensorError::InvalidArg("group_norm arguments must be distinct".into()));
        }
        let c = *self.nodes[x.0].shape.last().ok_or_else(|| {
            TensorError::ShapeMismatch("group_norm needs rank >= 1 input".into())
        })?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidArg(format!(
                "channels {} not divisible into {} groups",
                c, groups
            )));
        }
        if self.nodes[gain.0].shape != [c] || self.nodes[bias.0].shape != [c] {
            return Err(TensorError::ShapeMismatch("group_norm gain/bias shape".into()));
        }
        let data = ops::group_norm_forward(
            &self.nodes[x.0].data,
            &self.nodes[gain.0].data,
            &self.nodes[bias.0].data,
            c,
            groups,
            NORM_EPS,
        );
        let needs = self.needs(&[x, gain, bias]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::GroupNorm { x, gain, bias, groups },
            needs,
            "group_norm",
        )
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId, TensorError> {
        self.group_norm(x, gain, bias, 1)
    }

    pub fn softmax_last(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let width = *self.nodes[x.0].shape.last().ok_or_else(|| {
            TensorError::ShapeMismatch("softmax needs rank >= 1 input".into())
        })?;
        let data = ops::softmax_forward(&self.nodes[x.0].data, width);
        let needs = self.needs(&[x]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::SoftmaxLast { x },
            needs,
            "softmax",
        )
    }

    /// Softmax over the last axis of [..., L, L] scores where row i only
    /// attends to columns 0..=i; masked columns are exactly zero.
    pub fn causal_softmax(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let shape = &self.nodes[x.0].shape;
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(TensorError::ShapeMismatch(format!(
                "causal_softmax expects square trailing dims, got {:?}",
                shape
            )));
        }
        let l = shape[r - 1];
        let data = ops::causal_softmax_forward(&self.nodes[x.0].data, l);
        let needs = self.needs(&[x]);
        self.push(
            shape.clone(),
            data,
            Op::CausalSoftmax { x },
            needs,
            "causal_softmax",
        )
    }

    /// 3D rotary embedding over x = [B, H, L, D] with D split across the
    /// (t, h, w) axes by `alloc`; `pos[l]` are the coordinates of position l.
    pub fn rope3d(
        &mut self,
        x: VarId,
        alloc: [usize; 3],
        pos: &[[u32; 3]],
    ) -> Result<VarId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "rope3d expects [B, H, L, D], got {:?}",
                shape
            )));
        }
        let (l, d) = (shape[2], shape[3]);
        if alloc.iter().sum::<usize>() != d || alloc.iter().any(|a| a % 2 != 0) {
            return Err(TensorError::InvalidArg(format!(
                "rope allocation {:?} must be even per axis and sum to head dim {}",
                alloc, d
            )));
        }
        if pos.len() != l {
            return Err(TensorError::ShapeMismatch(format!(
                "rope positions {} vs sequence length {}",
                pos.len(),
                l
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        ops::rope3d_apply(&mut data, shape[0] * shape[1], l, alloc, pos, ROPE_BASE, false);
        let needs = self.needs(&[x]);
        self.push(
            shape,
            data,
            Op::Rope3d {
                x,
                alloc,
                pos: pos.into(),
            },
            needs,
            "rope3d",
        )
    }

    /// Elementwise sign with sign(0) = -1; straight-through gradient.
    pub fn lfq_quantize(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > T::zero() { T::one() } else { -T::one() })
            .collect();
        let needs = self.needs(&[x]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::LfqQuantize { x },
            needs,
            "lfq_quantize",
        )
    }

    /// Usage entropy (nats) of the batch-mean code distribution over all
    /// 2^quant_dim codes, from per-bit logits [N, quant_dim].
    pub fn lfq_usage_entropy(&mut self, x: VarId, quant_dim: usize) -> Result<VarId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || shape[1] != quant_dim {
            return Err(TensorError::ShapeMismatch(format!(
                "usage entropy expects [N, {}], got {:?}",
                quant_dim, shape
            )));
        }
        if quant_dim == 0 || quant_dim > 16 {
            return Err(TensorError::InvalidArg(format!(
                "usage entropy supports quant_dim 1..=16, got {}",
                quant_dim
            )));
        }
        let h = ops::lfq_usage_entropy_forward(&self.nodes[x.0].data, quant_dim);
        let needs = self.needs(&[x]);
        self.push(
            vec![],
            vec![h],
            Op::LfqUsageEntropy { x, quant_dim },
            needs,
            "lfq_usage_entropy",
        )
    }

    /// Per-row CE with logits: out[n] = logsumexp(logits[n]) - logits[n][t_n].
    pub fn cross_entropy_logits(
        &mut self,
        logits: VarId,
        targets: &[u32],
    ) -> Result<VarId, TensorError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cross entropy logits {:?} vs {} targets",
                shape,
                targets.len()
            )));
        }
        let vocab = shape[1];
        if targets.iter().any(|&t| t as usize >= vocab) {
            return Err(TensorError::InvalidArg("target index out of vocabulary".into()));
        }
        let data = ops::cross_entropy_forward(&self.nodes[logits.0].data, targets, vocab);
        let needs = self.needs(&[logits]);
        self.push(
            vec![targets.len()],
            data,
            Op::CrossEntropyLogits {
                logits,
                targets: targets.into(),
            },
            needs,
            "cross_entropy",
        )
    }

    /// Row gather: out = table[ids] reshaped to lead ++ [D].
    pub fn embed_lookup(
        &mut self,
        table: VarId,
        ids: &[u32],
        lead: &[usize],
    ) -> Result<VarId, TensorError> {
        let tshape = self.nodes[table.0].shape.clone();
        if tshape.len() != 2 {
            return Err(TensorError::ShapeMismatch("embedding table must be rank 2".into()));
        }
        if numel(lead) != ids.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "lead shape {:?} vs {} ids",
                lead,
                ids.len()
            )));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if ids.iter().any(|&i| i as usize >= vocab) {
            return Err(TensorError::InvalidArg("embedding id out of range".into()));
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let needs = self.needs(&[table]);
        self.push(
            shape,
            data,
            Op::EmbedLookup {
                table,
                ids: ids.into(),
            },
            needs,
            "embed_lookup",
        )
    }

    /// y[b, l, :] = x[b, l, :] + table[seg[l], :]
    pub fn segment_embed(
        &mut self,
        x: VarId,
        table: VarId,
        seg: &[u32],
    ) -> Result<VarId, TensorError> {
        let xshape = self.nodes[x.0].shape.clone();
        let tshape = self.nodes[table.0].shape.clone();
        if xshape.len() != 3 || tshape.len() != 2 || xshape[2] != tshape[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "segment_embed x {:?} vs table {:?}",
                xshape, tshape
            )));
        }
        if seg.len() != xshape[1] || seg.iter().any(|&s| s as usize >= tshape[0]) {
            return Err(TensorError::InvalidArg("segment ids invalid".into()));
        }
        let d = xshape[2];
        let tdata = &self.nodes[table.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for b in 0..xshape[0] {
            for (l, &s) in seg.iter().enumerate() {
                let dst = &mut data[(b * xshape[1] + l) * d..(b * xshape[1] + l + 1) * d];
                let src = &tdata[s as usize * d..(s as usize + 1) * d];
                for (dv, &sv) in dst.iter_mut().zip(src) {
                    *dv += sv;
                }
            }
        }
        let needs = self.needs(&[x, table]);
        self.push(
            xshape,
            data,
            Op::SegmentEmbed {
                x,
                table,
                seg: seg.into(),
            },
            needs,
            "segment_embed",
        )
    }

    /// Inverted dropout with a mask drawn from `rng`; `p == 0` is identity.
    pub fn dropout(
        &mut self,
        x: VarId,
        p: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<VarId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArg(format!("dropout p {} outside [0, 1)", p)));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Box<[bool]> = (0..self.nodes[x.0].data.len())
            .map(|_| rng.random::<f64>() >= p)
            .collect();
        let scale = T::from_f64(1.0 / keep);
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { v * scale } else { T::zero() })
            .collect();
        let needs = self.needs(&[x]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::Dropout { x, mask, keep },
            needs,
            "dropout",
        )
    }

    /// Clamp with zero gradient outside the open interval (lo, hi).
    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId, TensorError> {
        if lo >= hi {
            return Err(TensorError::InvalidArg(format!("clamp bounds [{}, {}]", lo, hi)));
        }
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.max(l).min(h))
            .collect();
        let needs = self.needs(&[x]);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::Clamp { x, lo, hi },
            needs,
            "clamp",
        )
    }

    /// Reverse pass from a scalar loss. Gradients of all `needs_grad`
    /// ancestors accumulate; calling twice without `zero_grads` doubles them.
    pub fn backward(&mut self, loss: VarId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        // restrict the walk to ancestors of the loss
        let mut marked = vec![false; self.nodes.len()];
        marked[loss.0] = true;
        let mut stack = vec![loss.0];
        let mut parents = Vec::new();
        while let Some(i) = stack.pop() {
            self.nodes[i].op.parents(&mut parents);
            for &p in &parents {
                if self.nodes[p].needs_grad && !marked[p] {
                    marked[p] = true;
                    stack.push(p);
                }
            }
        }
        // transient per-pass gradients; only leaf gradients persist, so a
        // second backward adds exactly one more gradient contribution
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        ensure(&mut grads[loss.0], 1)[0] += T::one();

        let Graph { nodes, threads, .. } = self;
        let threads = *threads;
        let grads = &mut grads;
        for i in (0..=loss.0).rev() {
            if !marked[i] || grads[i].is_none() {
                continue;
            }
            let gout = grads[i].take().expect("checked above");
            let node = &nodes[i];
            let ng = |id: VarId| nodes[id.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Unary { kind, x } => {
                    if ng(*x) {
                        let gx = ensure(&mut grads[x.0], gout.len());
                        ops::unary_backward(*kind, &nodes[x.0].data, &node.data, &gout, gx);
                    }
                }
                Op::AffineScalar { x, mul } => {
                    if ng(*x) {
                        let m = T::from_f64(*mul);
                        let gx = ensure(&mut grads[x.0], gout.len());
                        for (g, &go) in gx.iter_mut().zip(&gout) {
                            *g += go * m;
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    if a == b {
                        if ng(*a) {
                            let len = gout.len();
                            let ga = ensure(&mut grads[a.0], len);
                            ops::binary_backward(
                                *kind,
                                &nodes[a.0].data,
                                &nodes[b.0].data,
                                &gout,
                                Some(ga),
                                None,
                            );
                            let gb = ensure(&mut grads[b.0], len);
                            ops::binary_backward(
                                *kind,
                                &nodes[a.0].data,
                                &nodes[b.0].data,
                                &gout,
                                None,
                                Some(gb),
                            );
                        }
                    } else {
                        let len = gout.len();
                        let (ga_slot, gb_slot) = split_pair(grads, a.0, b.0);
                        let ga = ng(*a).then(|| ensure(ga_slot, len));
                        let gb = ng(*b).then(|| ensure(gb_slot, len));
                        ops::binary_backward(
                            *kind,
                            &nodes[a.0].data,
                            &nodes[b.0].data,
                            &gout,
                            ga,
                            gb,
                        );
                    }
                }
                Op::BiasAdd { x, b } => {
                    let c = nodes[b.0].data.len();
                    let xlen = nodes[x.0].data.len();
                    let (gx_slot, gb_slot) = split_pair(grads, x.0, b.0);
                    let gx = ng(*x).then(|| ensure(gx_slot, xlen));
                    let gb = ng(*b).then(|| ensure(gb_slot, c));
                    ops::bias_add_backward(&gout, c, gx, gb);
                }
                Op::BroadcastVec { v } => {
                    if ng(*v) {
                        let c = nodes[v.0].data.len();
                        let gv = ensure(&mut grads[v.0], c);
                        for row in gout.chunks_exact(c) {
                            for (g, &r) in gv.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if ng(*x) {
                        let gx = ensure(&mut grads[x.0], gout.len());
                        for (g, &r) in gx.iter_mut().zip(&gout) {
                            *g += r;
                        }
                    }
                }
                Op::Permute { x, perm } => {
                    if ng(*x) {
                        let xlen = nodes[x.0].data.len();
                        let xshape = nodes[x.0].shape.clone();
                        let gx = ensure(&mut grads[x.0], xlen);
                        ops::permute_backward(&gout, &xshape, perm, gx);
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = &node.shape;
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total = out_shape[*axis];
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].shape[*axis];
                        if ng(*p) {
                            let plen = nodes[p.0].data.len();
                            let gp = ensure(&mut grads[p.0], plen);
                            for o in 0..outer {
                                let src_base = (o * total + off) * inner;
                                let dst_base = o * len * inner;
                                for j in 0..len * inner {
                                    gp[dst_base + j] += gout[src_base + j];
                                }
                            }
                        }
                        off += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    if ng(*x) {
                        let xshape = nodes[x.0].shape.clone();
                        let outer: usize = xshape[..*axis].iter().product();
                        let inner: usize = xshape[*axis + 1..].iter().product();
                        let len = node.shape[*axis];
                        let xlen = nodes[x.0].data.len();
                        let gx = ensure(&mut grads[x.0], xlen);
                        for o in 0..outer {
                            let dst_base = (o * xshape[*axis] + start) * inner;
                            let src_base = o * len * inner;
                            for j in 0..len * inner {
                                gx[dst_base + j] += gout[src_base + j];
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if ng(*x) {
                        let g = gout[0];
                        let xlen = nodes[x.0].data.len();
                        let gx = ensure(&mut grads[x.0], xlen);
                        for v in gx.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if ng(*x) {
                        let xlen = nodes[x.0].data.len();
                        let g = gout[0] / T::from_f64(xlen as f64);
                        let gx = ensure(&mut grads[x.0], xlen);
                        for v in gx.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::ReduceAxis { x, axis, mean } => {
                    if ng(*x) {
                        let xshape = nodes[x.0].shape.clone();
                        let outer: usize = xshape[..*axis].iter().product();
                        let inner: usize = xshape[*axis + 1..].iter().product();
                        let len = xshape[*axis];
                        let scale = if *mean {
                            T::one() / T::from_f64(len as f64)
                        } else {
                            T::one()
                        };
                        let xlen = nodes[x.0].data.len();
                        let gx = ensure(&mut grads[x.0], xlen);
                        for o in 0..outer {
                            let grow = &gout[o * inner..(o + 1) * inner];
                            for j in 0..len {
                                let base = (o * len + j) * inner;
                                for (jj, &g) in grow.iter().enumerate() {
                                    gx[base + jj] += g * scale;
                                }
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let wshape = nodes[w.0].shape.clone();
                    let (k, n) = (wshape[0], wshape[1]);
                    let xlen = nodes[x.0].data.len();
                    let wlen = nodes[w.0].data.len();
                    {
                        let (gx_slot, gw_slot) = split_pair(grads, x.0, w.0);
                        let gx = ng(*x).then(|| ensure(gx_slot, xlen));
                        let gw = ng(*w).then(|| ensure(gw_slot, wlen));
                        ops::linear_backward(
                            &nodes[x.0].data,
                            &nodes[w.0].data,
                            &gout,
                            k,
                            n,
                            gx,
                            gw,
                            None,
                        );
                    }
                    if let Some(b) = b {
                        if ng(*b) {
                            let gb = ensure(&mut grads[b.0], n);
                            ops::linear_backward(
                                &nodes[x.0].data,
                                &nodes[w.0].data,
                                &gout,
                                k,
                                n,
                                None,
                                None,
                                Some(gb),
                            );
                        }
                    }
                }
                Op::MatmulNN { a, b } | Op::MatmulNT { a, b } => {
                    let transposed = matches!(node.op, Op::MatmulNT { .. });
                    let ashape = nodes[a.0].shape.clone();
                    let r = ashape.len();
                    let batch: usize = ashape[..r - 2].iter().product();
                    let (m, k) = (ashape[r - 2], ashape[r - 1]);
                    let n = node.shape[r - 1];
                    let alen = nodes[a.0].data.len();
                    let blen = nodes[b.0].data.len();
                    if a == b {
                        // same operand on both sides: two accumulation passes
                        for side in 0..2 {
                            if !ng(*a) {
                                break;
                            }
                            let ga = ensure(&mut grads[a.0], alen);
                            let (l, rr) = if side == 0 {
                                (Some(&mut *ga), None)
                            } else {
                                (None, Some(&mut *ga))
                            };
                            let (l, rr) = (l.map(|v| &mut v[..]), rr.map(|v| &mut v[..]));
                            if transposed {
                                ops::matmul_nt_backward(
                                    &nodes[a.0].data,
                                    &nodes[b.0].data,
                                    &gout,
                                    batch,
                                    m,
                                    k,
                                    n,
                                    l,
                                    rr,
                                );
                            } else {
                                ops::matmul_nn_backward(
                                    &nodes[a.0].data,
                                    &nodes[b.0].data,
                                    &gout,
                                    batch,
                                    m,
                                    k,
                                    n,
                                    l,
                                    rr,
                                );
                            }
                        }
                    } else {
                        let (ga_slot, gb_slot) = split_pair(grads, a.0, b.0);
                        let ga = ng(*a).then(|| ensure(ga_slot, alen));
                        let gb = ng(*b).then(|| ensure(gb_slot, blen));
                        if transposed {
                            ops::matmul_nt_backward(
                                &nodes[a.0].data,
                                &nodes[b.0].data,
                                &gout,
                                batch,
                                m,
                                k,
                                n,
                                ga,
                                gb,
                            );
                        } else {
                            ops::matmul_nn_backward(
                                &nodes[a.0].data,
                                &nodes[b.0].data,
                                &gout,
                                batch,
                                m,
                                k,
                                n,
                                ga,
                                gb,
                            );
                        }
                    }
                }
                Op::Conv3d { x, w, b, dims } | Op::TConv3d { x, w, b, dims } => {
                    let transpose = matches!(node.op, Op::TConv3d { .. });
                    let xlen = nodes[x.0].data.len();
                    let wlen = nodes[w.0].data.len();
                    let clen = nodes[b.0].data.len();
                    // x, w, b are validated distinct at build time
                    let (gx_slot, gw_slot) = split_pair(grads, x.0, w.0);
                    let gx = ng(*x).then(|| ensure(gx_slot, xlen));
                    let gw = ng(*w).then(|| ensure(gw_slot, wlen));
                    if transpose {
                        conv::tconv3d_backward(
                            &nodes[x.0].data,
                            &nodes[w.0].data,
                            &gout,
                            dims,
                            gx,
                            gw,
                            None,
                            threads,
                        );
                    } else {
                        conv::conv3d_backward(
                            &nodes[x.0].data,
                            &nodes[w.0].data,
                            &gout,
                            dims,
                            gx,
                            gw,
                            None,
                            threads,
                        );
                    }
                    if ng(*b) {
                        let gb = ensure(&mut grads[b.0], clen);
                        for row in gout.chunks_exact(clen) {
                            for (g, &v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::GroupNorm { x, gain, bias, groups } => {
                    let c = *nodes[x.0].shape.last().unwrap();
                    let xlen = nodes[x.0].data.len();
                    {
                        let (gx_slot, ggain_slot) = split_pair(grads, x.0, gain.0);
                        let gx = ng(*x).then(|| ensure(gx_slot, xlen));
                        let ggain = ng(*gain).then(|| ensure(ggain_slot, c));
                        ops::group_norm_backward(
                            &nodes[x.0].data,
                            &nodes[gain.0].data,
                            &gout,
                            c,
                            *groups,
                            NORM_EPS,
                            gx,
                            ggain,
                            None,
                        );
                    }
                    if ng(*bias) {
                        let gbias = ensure(&mut grads[bias.0], c);
                        for row in gout.chunks_exact(c) {
                            for (g, &v) in gbias.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::SoftmaxLast { x } => {
                    if ng(*x) {
                        let width = *node.shape.last().unwrap();
                        let gx = ensure(&mut grads[x.0], gout.len());
                        ops::softmax_backward(&node.data, &gout, width, gx);
                    }
                }
                Op::CausalSoftmax { x } => {
                    if ng(*x) {
                        let l = *node.shape.last().unwrap();
                        let gx = ensure(&mut grads[x.0], gout.len());
                        ops::causal_softmax_backward(&node.data, &gout, l, gx);
                    }
                }
                Op::Rope3d { x, alloc, pos } => {
                    if ng(*x) {
                        let shape = &node.shape;
                        let mut rotated = gout.clone();
                        ops::rope3d_apply(
                            &mut rotated,
                            shape[0] * shape[1],
                            shape[2],
                            *alloc,
                            pos,
                            ROPE_BASE,
                            true,
                        );
                        let gx = ensure(&mut grads[x.0], rotated.len());
                        for (g, &r) in gx.iter_mut().zip(&rotated) {
                            *g += r;
                        }
                    }
                }
                Op::LfqQuantize { x } => {
                    if ng(*x) {
                        let gx = ensure(&mut grads[x.0], gout.len());
                        for (g, &r) in gx.iter_mut().zip(&gout) {
                            *g += r;
                        }
                    }
                }
                Op::LfqUsageEntropy { x, quant_dim } => {
                    if ng(*x) {
                        let xlen = nodes[x.0].data.len();
                        let gx = ensure(&mut grads[x.0], xlen);
                        ops::lfq_usage_entropy_backward(&nodes[x.0].data, *quant_dim, gout[0], gx);
                    }
                }
                Op::CrossEntropyLogits { logits, targets } => {
                    if ng(*logits) {
                        let vocab = nodes[logits.0].shape[1];
                        let llen = nodes[logits.0].data.len();
                        let gx = ensure(&mut grads[logits.0], llen);
                        ops::cross_entropy_backward(
                            &nodes[logits.0].data,
                            targets,
                            vocab,
                            &gout,
                            gx,
                        );
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    if ng(*table) {
                        let d = nodes[table.0].shape[1];
                        let tlen = nodes[table.0].data.len();
                        let gt = ensure(&mut grads[table.0], tlen);
                        for (n, &id) in ids.iter().enumerate() {
                            let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                            let src = &gout[n * d..(n + 1) * d];
                            for (g, &v) in dst.iter_mut().zip(src) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::SegmentEmbed { x, table, seg } => {
                    if ng(*x) {
                        let gx = ensure(&mut grads[x.0], gout.len());
                        for (g, &r) in gx.iter_mut().zip(&gout) {
                            *g += r;
                        }
                    }
                    if ng(*table) {
                        let d = nodes[table.0].shape[1];
                        let lseq = node.shape[1];
                        let b = node.shape[0];
                        let tlen = nodes[table.0].data.len();
                        let gt = ensure(&mut grads[table.0], tlen);
                        for bi in 0..b {
                            for (l, &s) in seg.iter().enumerate() {
                                let src = &gout[(bi * lseq + l) * d..(bi * lseq + l + 1) * d];
                                let dst = &mut gt[s as usize * d..(s as usize + 1) * d];
                                for (g, &v) in dst.iter_mut().zip(src) {
                                    *g += v;
                                }
                            }
                        }
                    }
                }
                Op::Dropout { x, mask, keep } => {
                    if ng(*x) {
                        let scale = T::from_f64(1.0 / *keep);
                        let gx = ensure(&mut grads[x.0], gout.len());
                        for i in 0..gout.len() {
                            if mask[i] {
                                gx[i] += gout[i] * scale;
                            }
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if ng(*x) {
                        let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                        let xdata = &nodes[x.0].data;
                        let gx = ensure(&mut grads[x.0], gout.len());
                        for i in 0..gout.len() {
                            if xdata[i] > l && xdata[i] < h {
                                gx[i] += gout[i];
                            }
                        }
                    }
                }
            }
            grads[i] = Some(gout);
        }
        // fold this pass's leaf gradients into the persistent buffers
        for i in 0..=loss.0 {
            if marked[i] && matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(g) = &grads[i] {
                    let dst = ensure(&mut self.grads[i], g.len());
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(
                &Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(),
                true,
            )
            .unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(&Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true)
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), true)
            .unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), true)
            .unwrap();
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn nan_is_rejected_at_op_boundary() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(&Tensor::from_vec(&[1], vec![-1.0]).unwrap(), false)
            .unwrap();
        // ln of a negative number produces NaN, which must be an error
        assert!(matches!(
            g.ln(x),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn straight_through_quantize_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(
                &Tensor::from_vec(&[4], vec![0.7, -0.3, 0.0, 2.0]).unwrap(),
                true,
            )
            .unwrap();
        let q = g.lfq_quantize(x).unwrap();
        assert_eq!(g.data(q), &[1.0, -1.0, -1.0, 1.0]);
        let loss = g.sum_all(q).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(
                &Tensor::from_vec(&[1, 3, 3], vec![1.0; 9]).unwrap(),
                false,
            )
            .unwrap();
        let y = g.causal_softmax(x).unwrap();
        let d = g.data(y);
        assert_eq!(d[0], 1.0); // row 0 sees only col 0
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert!((d[3] - 0.5).abs() < 1e-12);
        assert!((d[4] - 0.5).abs() < 1e-12);
        assert_eq!(d[5], 0.0);
    }
}
