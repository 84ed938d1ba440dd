//! Reverse-mode tape over the fixed operator set the recommender needs:
//! matmul, embedding gather, layer norm, GELU, causal softmax and the two
//! loss heads. Forward values are computed eagerly as nodes are appended;
//! `backward` walks the tape once and accumulates per-parameter gradients.

use thiserror::Error;

use crate::losses::{non_uniformity_with_grad, GFunction, LossError};
use crate::sampling::PreferenceVector;
use crate::tensor::{matmul, matmul_nt, matmul_tn_accum, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("parameters changed between forward and backward (version {tape} vs {params})")]
    TapeMismatch { tape: u64, params: u64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Index of a parameter tensor inside `Parameters`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-parameter gradient accumulator. Parameters untouched by the recorded
/// computation stay `None` and read back as exact zeros.
#[derive(Debug)]
pub struct Gradients {
    tensors: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            tensors: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.tensors[id.0].as_ref()
    }

    fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.tensors[id.0] {
            Some(t) => t.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .flatten()
            .all(|t| t.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.iter_mut().flatten() {
            t.scale_in_place(factor);
        }
    }
}

enum Op {
    Param {
        id: ParamId,
    },
    Constant,
    GatherRows {
        src: NodeId,
        indices: Vec<u32>,
    },
    /// `a (m x n) + row (1 x n)` broadcast over rows.
    AddRowBroadcast {
        a: NodeId,
        row: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a * b^T`.
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    /// Row-wise softmax over the lower triangle of a square score matrix.
    CausalSoftmax {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        scale: NodeId,
        offset: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: NodeId,
    },
    /// Row-wise dot product of `a` with gathered rows of `table`:
    /// `out[i] = a[i] . table[indices[i]]`.
    GatherRowDot {
        a: NodeId,
        table: NodeId,
        indices: Vec<u32>,
    },
    /// Sampled softmax click loss per row; negatives equal to that row's
    /// positive are masked out of the denominator.
    SampledSoftmaxLoss {
        pos: NodeId,
        negs: NodeId,
        mask: Vec<bool>,
        lse: Vec<f64>,
    },
    BceWithLogits {
        logits: NodeId,
        labels: Vec<f64>,
    },
    MeanAll {
        a: NodeId,
    },
    /// Non-uniformity penalty on two scalar loss nodes; partials with
    /// respect to both losses are computed at record time.
    NonUniformity {
        l_c: NodeId,
        l_o: NodeId,
        d_lc: f64,
        d_lo: f64,
    },
    /// Weighted sum of scalar nodes.
    AffineCombine {
        terms: Vec<(f64, NodeId)>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
    params_version: u64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

impl Tape {
    pub fn new(params_version: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params_version,
        }
    }

    pub fn params_version(&self) -> u64 {
        self.params_version
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a parameter leaf; the tensor is a snapshot taken at record time.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.push(Op::Param { id }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn gather_rows(&mut self, src: NodeId, indices: &[u32]) -> NodeId {
        let table = self.value(src);
        let cols = table.cols();
        let mut out = Tensor::zeros(indices.len(), cols);
        for (r, &idx) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(idx as usize));
        }
        self.push(
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
            out,
        )
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(rv.row(0).iter()) {
                *o += x;
            }
        }
        self.push(Op::AddRowBroadcast { a, row }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add { a, b }, out)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_in_place(factor);
        self.push(Op::Scale { a, factor }, out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul { a, b }, out)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNT { a, b }, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols());
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        )
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows(), av.cols(), "attention scores must be square");
        let t = av.rows();
        let mut out = Tensor::zeros(t, t);
        for i in 0..t {
            let row = av.row(i);
            let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out.set(i, j, e);
                sum += e;
            }
            for j in 0..=i {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
        self.push(Op::CausalSoftmax { a }, out)
    }

    pub fn layer_norm(&mut self, a: NodeId, scale: NodeId, offset: NodeId) -> NodeId {
        let (av, sv, ov) = (self.value(a), self.value(scale), self.value(offset));
        let n = av.cols();
        assert_eq!(sv.shape(), (1, n));
        assert_eq!(ov.shape(), (1, n));
        let mut out = Tensor::zeros(av.rows(), n);
        let mut means = Vec::with_capacity(av.rows());
        let mut inv_stds = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                out.set(r, j, xh * sv.get(0, j) + ov.get(0, j));
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        self.push(
            Op::LayerNorm {
                a,
                scale,
                offset,
                mean: means,
                inv_std: inv_stds,
            },
            out,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        self.push(Op::Gelu { a }, out)
    }

    pub fn gather_row_dot(&mut self, a: NodeId, table: NodeId, indices: &[u32]) -> NodeId {
        let (av, tv) = (self.value(a), self.value(table));
        assert_eq!(av.rows(), indices.len());
        assert_eq!(av.cols(), tv.cols());
        let mut out = Tensor::zeros(indices.len(), 1);
        for (r, &idx) in indices.iter().enumerate() {
            let dot = av
                .row(r)
                .iter()
                .zip(tv.row(idx as usize).iter())
                .map(|(x, y)| x * y)
                .sum();
            out.set(r, 0, dot);
        }
        self.push(Op::GatherRowDot { a, table, indices: indices.to_vec() }, out)
    }

    /// Per-row sampled softmax loss. `targets[i]` and `neg_ids[j]` identify
    /// the items behind the logits; negatives colliding with the row's own
    /// target are excluded from that row's denominator.
    pub fn sampled_softmax_loss(
        &mut self,
        pos: NodeId,
        negs: NodeId,
        targets: &[u32],
        neg_ids: &[u32],
    ) -> NodeId {
        let (pv, nv) = (self.value(pos), self.value(negs));
        let (m, k) = nv.shape();
        assert_eq!(pv.shape(), (m, 1));
        assert_eq!(targets.len(), m);
        assert_eq!(neg_ids.len(), k);
        let mut mask = vec![true; m * k];
        let mut lse = Vec::with_capacity(m);
        let mut out = Tensor::zeros(m, 1);
        for i in 0..m {
            let p = pv.get(i, 0);
            let mut max = p;
            for j in 0..k {
                if neg_ids[j] == targets[i] {
                    mask[i * k + j] = false;
                } else if nv.get(i, j) > max {
                    max = nv.get(i, j);
                }
            }
            let mut sum = (p - max).exp();
            for j in 0..k {
                if mask[i * k + j] {
                    sum += (nv.get(i, j) - max).exp();
                }
            }
            let l = max + sum.ln();
            lse.push(l);
            out.set(i, 0, l - p);
        }
        self.push(Op::SampledSoftmaxLoss { pos, negs, mask, lse }, out)
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), (labels.len(), 1));
        let mut out = Tensor::zeros(labels.len(), 1);
        for (i, &y) in labels.iter().enumerate() {
            let x = lv.get(i, 0);
            out.set(i, 0, x.max(0.0) - x * y + (-x.abs()).exp().ln_1p());
        }
        self.push(
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            out,
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert!(!av.is_empty());
        let mean = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Op::MeanAll { a }, Tensor::from_vec(1, 1, vec![mean]))
    }

    pub fn non_uniformity(
        &mut self,
        l_c: NodeId,
        l_o: NodeId,
        pi: &PreferenceVector,
        g: GFunction,
    ) -> Result<NodeId, LossError> {
        let lc = self.value(l_c).scalar();
        let lo = self.value(l_o).scalar();
        let (value, d_lc, d_lo) = non_uniformity_with_grad(lc, lo, pi, g)?;
        Ok(self.push(
            Op::NonUniformity { l_c, l_o, d_lc, d_lo },
            Tensor::from_vec(1, 1, vec![value]),
        ))
    }

    pub fn affine_combine(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let mut acc = 0.0;
        for &(coef, node) in terms {
            acc += coef * self.value(node).scalar();
        }
        self.push(
            Op::AffineCombine {
                terms: terms.to_vec(),
            },
            Tensor::from_vec(1, 1, vec![acc]),
        )
    }

    /// Reverse pass from a scalar node. `seed` is the upstream gradient of
    /// that scalar; gradients of all parameter leaves are accumulated and
    /// returned. The caller is responsible for the version check against the
    /// live parameters (see `model::backward`).
    pub fn backward_from(&self, output: NodeId, seed: f64, n_params: usize) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward seeds a scalar node"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_vec(1, 1, vec![seed]));
        let mut out = Gradients::new(n_params);

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Param { id } => out.accumulate(*id, &g),
                Op::Constant => {}
                Op::GatherRows { src, indices } => {
                    let shape = self.value(*src).shape();
                    let acc = grads[src.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
                    for (r, &idx) in indices.iter().enumerate() {
                        let dst = acc.row_mut(idx as usize);
                        for (d, &x) in dst.iter_mut().zip(g.row(r).iter()) {
                            *d += x;
                        }
                    }
                }
                Op::AddRowBroadcast { a, row } => {
                    accumulate(&mut grads, *a, &g);
                    let mut rg = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in rg.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, &rg);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Scale { a, factor } => {
                    let mut ga = g.clone();
                    ga.scale_in_place(*factor);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::MatMul { a, b } => {
                    let ga = matmul_nt(&g, self.value(*b));
                    accumulate(&mut grads, *a, &ga);
                    let bv = self.value(*b).shape();
                    let acc = grads[b.0].get_or_insert_with(|| Tensor::zeros(bv.0, bv.1));
                    matmul_tn_accum(self.value(*a), &g, acc);
                }
                Op::MatMulNT { a, b } => {
                    let ga = matmul(&g, self.value(*b));
                    accumulate(&mut grads, *a, &ga);
                    let bv = self.value(*b).shape();
                    let acc = grads[b.0].get_or_insert_with(|| Tensor::zeros(bv.0, bv.1));
                    matmul_tn_accum(&g, self.value(*a), acc);
                }
                Op::SliceCols { a, start, len } => {
                    let shape = self.value(*a).shape();
                    let acc = grads[a.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
                    for r in 0..g.rows() {
                        let dst = &mut acc.row_mut(r)[*start..*start + *len];
                        for (d, &x) in dst.iter_mut().zip(g.row(r).iter()) {
                            *d += x;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let shape = self.value(p).shape();
                        let acc =
                            grads[p.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
                        for r in 0..g.rows() {
                            let src = &g.row(r)[offset..offset + cols];
                            for (d, &x) in acc.row_mut(r).iter_mut().zip(src.iter()) {
                                *d += x;
                            }
                        }
                        offset += cols;
                    }
                }
                Op::CausalSoftmax { a } => {
                    let av = self.value(NodeId(idx));
                    let t = av.rows();
                    let mut ga = Tensor::zeros(t, t);
                    for i in 0..t {
                        let probs = av.row(i);
                        let grow = g.row(i);
                        let dot: f64 = (0..=i).map(|j| grow[j] * probs[j]).sum();
                        for j in 0..=i {
                            ga.set(i, j, probs[j] * (grow[j] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LayerNorm {
                    a,
                    scale,
                    offset,
                    mean,
                    inv_std,
                } => {
                    let av = self.value(*a);
                    let sv = self.value(*scale);
                    let n = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), n);
                    let mut gs = Tensor::zeros(1, n);
                    let mut go = Tensor::zeros(1, n);
                    for r in 0..av.rows() {
                        let row = av.row(r);
                        let grow = g.row(r);
                        let inv = inv_std[r];
                        let mu = mean[r];
                        // x_hat and the two row means the gradient needs.
                        let mut mean_gxh = 0.0;
                        let mut mean_gxh_xh = 0.0;
                        for j in 0..n {
                            let xh = (row[j] - mu) * inv;
                            let gxh = grow[j] * sv.get(0, j);
                            mean_gxh += gxh;
                            mean_gxh_xh += gxh * xh;
                            gs.set(0, j, gs.get(0, j) + grow[j] * xh);
                            go.set(0, j, go.get(0, j) + grow[j]);
                        }
                        mean_gxh /= n as f64;
                        mean_gxh_xh /= n as f64;
                        for j in 0..n {
                            let xh = (row[j] - mu) * inv;
                            let gxh = grow[j] * sv.get(0, j);
                            ga.set(r, j, inv * (gxh - mean_gxh - xh * mean_gxh_xh));
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *scale, &gs);
                    accumulate(&mut grads, *offset, &go);
                }
                Op::Gelu { a } => {
                    let av = self.value(*a);
                    let mut ga = g.clone();
                    for (gd, &x) in ga.data_mut().iter_mut().zip(av.data().iter()) {
                        *gd *= gelu_derivative(x);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::GatherRowDot { a, table, indices } => {
                    let av = self.value(*a);
                    let tv = self.value(*table);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let tshape = tv.shape();
                    for (r, &idx) in indices.iter().enumerate() {
                        let gr = g.get(r, 0);
                        for (d, &x) in ga.row_mut(r).iter_mut().zip(tv.row(idx as usize).iter()) {
                            *d += gr * x;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    let acc = grads[table.0]
                        .get_or_insert_with(|| Tensor::zeros(tshape.0, tshape.1));
                    for (r, &idx) in indices.iter().enumerate() {
                        let gr = g.get(r, 0);
                        let dst = acc.row_mut(idx as usize);
                        for (d, &x) in dst.iter_mut().zip(av.row(r).iter()) {
                            *d += gr * x;
                        }
                    }
                }
                Op::SampledSoftmaxLoss { pos, negs, mask, lse } => {
                    let pv = self.value(*pos);
                    let nv = self.value(*negs);
                    let (m, k) = nv.shape();
                    let mut gp = Tensor::zeros(m, 1);
                    let mut gn = Tensor::zeros(m, k);
                    for i in 0..m {
                        let gi = g.get(i, 0);
                        gp.set(i, 0, gi * ((pv.get(i, 0) - lse[i]).exp() - 1.0));
                        for j in 0..k {
                            if mask[i * k + j] {
                                gn.set(i, j, gi * (nv.get(i, j) - lse[i]).exp());
                            }
                        }
                    }
                    accumulate(&mut grads, *pos, &gp);
                    accumulate(&mut grads, *negs, &gn);
                }
                Op::BceWithLogits { logits, labels } => {
                    let lv = self.value(*logits);
                    let mut gl = Tensor::zeros(labels.len(), 1);
                    for (i, &y) in labels.iter().enumerate() {
                        let x = lv.get(i, 0);
                        let sigma = 1.0 / (1.0 + (-x).exp());
                        gl.set(i, 0, g.get(i, 0) * (sigma - y));
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::MeanAll { a } => {
                    let av = self.value(*a);
                    let per = g.scalar() / av.len() as f64;
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for v in ga.data_mut() {
                        *v = per;
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::NonUniformity { l_c, l_o, d_lc, d_lo } => {
                    let gs = g.scalar();
                    accumulate(
                        &mut grads,
                        *l_c,
                        &Tensor::from_vec(1, 1, vec![gs * d_lc]),
                    );
                    accumulate(
                        &mut grads,
                        *l_o,
                        &Tensor::from_vec(1, 1, vec![gs * d_lo]),
                    );
                }
                Op::AffineCombine { terms } => {
                    let gs = g.scalar();
                    for &(coef, node) in terms {
                        accumulate(
                            &mut grads,
                            node,
                            &Tensor::from_vec(1, 1, vec![gs * coef]),
                        );
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, g: &Tensor) {
    match &mut grads[node.0] {
        Some(t) => t.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Compare analytic gradients of a scalar-valued graph against central
    /// finite differences on every input coordinate.
    fn fd_check<F>(inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let eval = |ins: &[Tensor]| -> f64 {
            let mut tape = Tape::new(0);
            let ids: Vec<NodeId> = ins
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(ParamId(i), t.clone()))
                .collect();
            let out = build(&mut tape, &ids);
            tape.value(out).scalar()
        };

        let mut tape = Tape::new(0);
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t.clone()))
            .collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward_from(out, 1.0, inputs.len());

        let h = 1e-5;
        for (pi, t) in inputs.iter().enumerate() {
            for c in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[c] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[c] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads
                    .get(ParamId(pi))
                    .map(|g| g.data()[c])
                    .unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "param {pi} coord {c}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        fd_check(
            &[a, b],
            |t, ids| {
                let c = t.matmul(ids[0], ids[1]);
                t.mean_all(c)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_matmul_nt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 5, 4);
        fd_check(
            &[a, b],
            |t, ids| {
                let c = t.matmul_nt(ids[0], ids[1]);
                let g = t.gelu(c);
                t.mean_all(g)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 4, 6);
        let s = random_tensor(&mut rng, 1, 6);
        let o = random_tensor(&mut rng, 1, 6);
        fd_check(
            &[a, s, o],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]);
                let g = t.gelu(y);
                t.mean_all(g)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_causal_softmax_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_tensor(&mut rng, 4, 3);
        let k = random_tensor(&mut rng, 4, 3);
        let v = random_tensor(&mut rng, 4, 3);
        fd_check(
            &[q, k, v],
            |t, ids| {
                let s = t.matmul_nt(ids[0], ids[1]);
                let s = t.scale(s, 1.0 / (3.0f64).sqrt());
                let a = t.causal_softmax(s);
                let o = t.matmul(a, ids[2]);
                t.mean_all(o)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_gather_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = random_tensor(&mut rng, 6, 3);
        let row = random_tensor(&mut rng, 1, 3);
        fd_check(
            &[table, row],
            |t, ids| {
                let gathered = t.gather_rows(ids[0], &[0, 2, 2, 5]);
                let shifted = t.add_row_broadcast(gathered, ids[1]);
                let g = t.gelu(shifted);
                t.mean_all(g)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_gather_row_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_tensor(&mut rng, 3, 4);
        let table = random_tensor(&mut rng, 5, 4);
        fd_check(
            &[a, table],
            |t, ids| {
                let d = t.gather_row_dot(ids[0], ids[1], &[1, 1, 4]);
                t.mean_all(d)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_sampled_softmax_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos = random_tensor(&mut rng, 3, 1);
        let negs = random_tensor(&mut rng, 3, 4);
        // Target 9 collides with the second negative id, exercising the mask.
        fd_check(
            &[pos, negs],
            |t, ids| {
                let l = t.sampled_softmax_loss(ids[0], ids[1], &[7, 9, 8], &[1, 9, 2, 3]);
                t.mean_all(l)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_bce_with_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = random_tensor(&mut rng, 4, 1);
        fd_check(
            &[logits],
            |t, ids| {
                let l = t.bce_with_logits(ids[0], &[1.0, 0.0, 0.0, 1.0]);
                t.mean_all(l)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, 3, 6);
        fd_check(
            &[a],
            |t, ids| {
                let left = t.slice_cols(ids[0], 0, 3);
                let right = t.slice_cols(ids[0], 3, 3);
                let swapped = t.concat_cols(&[right, left]);
                let g = t.gelu(swapped);
                t.mean_all(g)
            },
            1e-7,
        );
    }

    #[test]
    fn fd_non_uniformity_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_tensor(&mut rng, 3, 1);
        let b = random_tensor(&mut rng, 3, 1);
        let pi = PreferenceVector::new(0.3, 0.7).unwrap();
        for g in [GFunction::Identity, GFunction::Softmax] {
            fd_check(
                &[a.clone(), b.clone()],
                |t, ids| {
                    // Keep both loss scalars strictly positive via softplus-ish GELU+2.
                    let la = t.gelu(ids[0]);
                    let lb = t.gelu(ids[1]);
                    let two = t.constant(Tensor::from_vec(1, 1, vec![2.0]));
                    let la = t.mean_all(la);
                    let lb = t.mean_all(lb);
                    let la = t.affine_combine(&[(1.0, la), (1.0, two)]);
                    let lb = t.affine_combine(&[(1.0, lb), (1.0, two)]);
                    let reg = t.non_uniformity(la, lb, &pi, g).unwrap();
                    t.affine_combine(&[(pi.pi_c(), la), (pi.pi_o(), lb), (0.5, reg)])
                },
                1e-6,
            );
        }
    }

    #[test]
    fn untouched_params_have_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, 2, 2);
        let unused = random_tensor(&mut rng, 2, 2);
        let mut tape = Tape::new(0);
        let ia = tape.param(ParamId(0), a);
        let _iu = tape.param(ParamId(1), unused);
        let out = tape.mean_all(ia);
        let grads = tape.backward_from(out, 1.0, 2);
        assert!(grads.get(ParamId(0)).is_some());
        assert!(grads.get(ParamId(1)).is_none());
    }

    #[test]
    fn gather_leaves_absent_rows_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let table = random_tensor(&mut rng, 5, 3);
        let mut tape = Tape::new(0);
        let tb = tape.param(ParamId(0), table);
        let picked = tape.gather_rows(tb, &[1, 3]);
        let out = tape.mean_all(picked);
        let grads = tape.backward_from(out, 1.0, 1);
        let g = grads.get(ParamId(0)).unwrap();
        for j in 0..3 {
            assert_eq!(g.get(0, j), 0.0);
            assert_eq!(g.get(2, j), 0.0);
            assert_eq!(g.get(4, j), 0.0);
            assert_ne!(g.get(1, j), 0.0);
        }
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_tensor(&mut rng, 3, 3);
        let mut tape = Tape::new(0);
        let ia = tape.param(ParamId(0), a);
        let g = tape.gelu(ia);
        let out = tape.mean_all(g);
        let g1 = tape.backward_from(out, 1.0, 1);
        let g2 = tape.backward_from(out, 2.0, 1);
        let t1 = g1.get(ParamId(0)).unwrap();
        let t2 = g2.get(ParamId(0)).unwrap();
        for (x, y) in t1.data().iter().zip(t2.data().iter()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }
}
