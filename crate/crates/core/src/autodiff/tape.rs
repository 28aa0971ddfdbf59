//! The recording tape and the backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_S2OP: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// One recorded operation. Parent links are node indices on the same tape;
/// saved constants (the masked-add mask, embedding ids) live in the variant.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddN(Vec<usize>),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Gelu(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Row { a: usize, row: usize, cols: usize },
    SliceRows { a: usize, r0: usize, cols: usize },
    Concat0 { parts: Vec<usize> },
    Embed { table: usize, ids: Vec<usize>, dim: usize },
    SoftmaxRows { a: usize },
    SoftmaxCrossEntropy { logits: usize, target: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: f64 },
    SumAll(usize),
    MeanAll(usize),
    MeanRows { a: usize },
    L2Norm(usize),
    CosineSim { u: usize, v: usize },
    Resize { a: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    PadCenter { a: usize, c: usize, ih: usize, iw: usize, oh: usize, ow: usize, off: usize },
    Patchify { a: usize, c: usize, h: usize, w: usize, ps: usize },
    MaskedAdd { base: usize, delta: usize, mask: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in the
/// order they were created, so every node's parents precede it and the
/// backward pass is a single reverse sweep that visits each node once.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf. Any existing tape handle on the
    /// input is ignored; the returned tensor is a fresh node on this tape.
    pub fn param(&mut self, t: &Tensor) -> Tensor {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        let idx = self.nodes.len();
        self.nodes.push(Node { shape: shape.clone(), data: data.clone(), op, requires_grad });
        Tensor::with_node(shape, data, (self.id, idx))
    }

    /// Node index for a tensor, recording untracked inputs as constants.
    fn ensure(&mut self, t: &Tensor) -> usize {
        match t.node {
            Some((tid, idx)) => {
                assert!(tid == self.id, "tensor was recorded on a different tape");
                idx
            }
            None => {
                let out = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false);
                out.node.unwrap().1
            }
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn tracked(ts: &[&Tensor]) -> bool {
        ts.iter().any(|t| t.node.is_some())
    }

    fn record1(
        &mut self,
        a: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
        make: impl FnOnce(usize) -> Op,
    ) -> Tensor {
        if !Self::tracked(&[a]) {
            return Tensor::raw(shape, data);
        }
        let ia = self.ensure(a);
        let rg = self.rg(ia);
        self.push(shape, data, make(ia), rg)
    }

    fn record2(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Tensor {
        if !Self::tracked(&[a, b]) {
            return Tensor::raw(shape, data);
        }
        let ia = self.ensure(a);
        let ib = self.ensure(b);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(shape, data, make(ia, ib), rg)
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.shape() == b.shape(), "add: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.record2(a, b, a.shape().to_vec(), data, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.shape() == b.shape(), "sub: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.record2(a, b, a.shape().to_vec(), data, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.shape() == b.shape(), "mul: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.record2(a, b, a.shape().to_vec(), data, Op::Mul)
    }

    /// Sum of any number of same-shape tensors.
    pub fn add_n(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "add_n: empty input");
        let shape = parts[0].shape().to_vec();
        for p in parts {
            assert!(
                p.shape() == shape.as_slice(),
                "add_n: shape mismatch {:?} vs {:?}",
                p.shape(),
                shape
            );
        }
        let mut data = vec![0.0; parts[0].numel()];
        for p in parts {
            for (d, v) in data.iter_mut().zip(p.data()) {
                *d += v;
            }
        }
        if !Self::tracked(parts) {
            return Tensor::raw(shape, data);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| self.ensure(p)).collect();
        let rg = idxs.iter().any(|&i| self.rg(i));
        self.push(shape, data, Op::AddN(idxs), rg)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x * c).collect();
        self.record1(a, a.shape().to_vec(), data, |ia| Op::Scale(ia, c))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x + c).collect();
        self.record1(a, a.shape().to_vec(), data, Op::AddScalar)
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.exp()).collect();
        self.record1(a, a.shape().to_vec(), data, Op::Exp)
    }

    pub fn gelu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| gelu_fwd(x)).collect();
        self.record1(a, a.shape().to_vec(), data, Op::Gelu)
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(
            a.shape().len() == 2 && b.shape().len() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        self.record2(a, b, vec![m, n], data, |ia, ib| Op::MatMul { a: ia, b: ib, m, k, n })
    }

    pub fn transpose(&mut self, a: &Tensor) -> Tensor {
        assert!(a.shape().len() == 2, "transpose: rank-2 required, got {:?}", a.shape());
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = a.data()[r * cols + c];
            }
        }
        self.record1(a, vec![cols, rows], data, |ia| Op::Transpose { a: ia, rows, cols })
    }

    /// Row `r` of a rank-2 tensor as a vector.
    pub fn row(&mut self, a: &Tensor, r: usize) -> Tensor {
        assert!(a.shape().len() == 2, "row: rank-2 required, got {:?}", a.shape());
        let cols = a.shape()[1];
        assert!(r < a.shape()[0], "row {} out of range for {:?}", r, a.shape());
        let data = a.data()[r * cols..(r + 1) * cols].to_vec();
        self.record1(a, vec![cols], data, |ia| Op::Row { a: ia, row: r, cols })
    }

    /// Rows `r0..r1` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: &Tensor, r0: usize, r1: usize) -> Tensor {
        assert!(a.shape().len() == 2, "slice_rows: rank-2 required, got {:?}", a.shape());
        let cols = a.shape()[1];
        assert!(r0 < r1 && r1 <= a.shape()[0], "slice_rows {}..{} out of range for {:?}", r0, r1, a.shape());
        let data = a.data()[r0 * cols..r1 * cols].to_vec();
        self.record1(a, vec![r1 - r0, cols], data, |ia| Op::SliceRows { a: ia, r0, cols })
    }

    /// Concatenation of rank-2 tensors along axis 0.
    pub fn concat0(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat0: empty input");
        let cols = parts[0].shape()[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert!(
                p.shape().len() == 2 && p.shape()[1] == cols,
                "concat0: column mismatch {:?} vs {} cols",
                p.shape(),
                cols
            );
            rows += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        if !Self::tracked(parts) {
            return Tensor::raw(vec![rows, cols], data);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| self.ensure(p)).collect();
        let rg = idxs.iter().any(|&i| self.rg(i));
        self.push(vec![rows, cols], data, Op::Concat0 { parts: idxs }, rg)
    }

    /// Concatenation of rank-1 tensors into a single vector.
    pub fn concat_vec(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_vec: empty input");
        let mut data = Vec::new();
        for p in parts {
            assert!(p.shape().len() == 1, "concat_vec: rank-1 required, got {:?}", p.shape());
            data.extend_from_slice(p.data());
        }
        let total = data.len();
        if !Self::tracked(parts) {
            return Tensor::raw(vec![total], data);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| self.ensure(p)).collect();
        let rg = idxs.iter().any(|&i| self.rg(i));
        // Same backward as concat0: the upstream gradient splits by parent
        // length regardless of rank.
        self.push(vec![total], data, Op::Concat0 { parts: idxs }, rg)
    }

    /// Embedding lookup: rows of `table[v×d]` selected by `ids`.
    pub fn embed(&mut self, table: &Tensor, ids: &[usize]) -> Tensor {
        assert!(table.shape().len() == 2, "embed: rank-2 table required, got {:?}", table.shape());
        let (v, d) = (table.shape()[0], table.shape()[1]);
        assert!(!ids.is_empty(), "embed: empty id list");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embed: id {} out of vocabulary size {}", id, v);
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        let ids = ids.to_vec();
        self.record1(table, vec![n, d], data, |ia| Op::Embed { table: ia, ids, dim: d })
    }

    // ── Softmax family ──────────────────────────────────────────────────

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Tensor {
        assert!(a.shape().len() == 2, "softmax_rows: rank-2 required, got {:?}", a.shape());
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = &a.data()[r * cols..(r + 1) * cols];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (src[c] - m).exp();
                data[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= z;
            }
        }
        self.record1(a, vec![rows, cols], data, |ia| Op::SoftmaxRows { a: ia })
    }

    /// `-log softmax(logits)[target]`, in log-sum-exp stabilized form.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, target: usize) -> Tensor {
        assert!(logits.shape().len() == 1, "softmax_cross_entropy: rank-1 logits required, got {:?}", logits.shape());
        let v = logits.numel();
        assert!(target < v, "softmax_cross_entropy: target {} out of range for {} classes", target, v);
        let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.data().iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let loss = lse - logits.data()[target];
        self.record1(logits, vec![1], vec![loss], |ia| Op::SoftmaxCrossEntropy { logits: ia, target })
    }

    /// Layer normalization over the last axis of `a[r×c]` with per-column
    /// affine parameters `gamma[c]`, `beta[c]`.
    pub fn layer_norm(&mut self, a: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        assert!(a.shape().len() == 2, "layer_norm: rank-2 required, got {:?}", a.shape());
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        assert!(
            gamma.shape() == [cols] && beta.shape() == [cols],
            "layer_norm: affine shapes {:?}/{:?} do not match {} columns",
            gamma.shape(),
            beta.shape(),
            cols
        );
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = &a.data()[r * cols..(r + 1) * cols];
            let (mean, std) = row_moments(src, eps);
            for c in 0..cols {
                data[r * cols + c] = (src[c] - mean) / std * gamma.data()[c] + beta.data()[c];
            }
        }
        if !Self::tracked(&[a, gamma, beta]) {
            return Tensor::raw(vec![rows, cols], data);
        }
        let ia = self.ensure(a);
        let ig = self.ensure(gamma);
        let ib = self.ensure(beta);
        let rg = self.rg(ia) || self.rg(ig) || self.rg(ib);
        self.push(vec![rows, cols], data, Op::LayerNorm { a: ia, gamma: ig, beta: ib, eps }, rg)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let s = a.data().iter().sum();
        self.record1(a, vec![1], vec![s], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Tensor {
        let s = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.record1(a, vec![1], vec![s], Op::MeanAll)
    }

    /// Column means of a rank-2 tensor: `[r×c] -> [c]`.
    pub fn mean_rows(&mut self, a: &Tensor) -> Tensor {
        assert!(a.shape().len() == 2, "mean_rows: rank-2 required, got {:?}", a.shape());
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += a.data()[r * cols + c];
            }
        }
        for d in data.iter_mut() {
            *d /= rows as f64;
        }
        self.record1(a, vec![cols], data, |ia| Op::MeanRows { a: ia })
    }

    /// Euclidean norm of the flattened tensor. The gradient at the zero
    /// tensor is defined as zero.
    pub fn l2_norm(&mut self, a: &Tensor) -> Tensor {
        let n = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.record1(a, vec![1], vec![n], Op::L2Norm)
    }

    /// Cosine similarity of two equal-length vectors with nonzero norm.
    pub fn cosine_similarity(&mut self, u: &Tensor, v: &Tensor) -> Tensor {
        assert!(
            u.shape() == v.shape() && u.shape().len() == 1,
            "cosine_similarity: rank-1 equal shapes required, got {:?} vs {:?}",
            u.shape(),
            v.shape()
        );
        let nu = u.l2();
        let nv = v.l2();
        assert!(nu > 0.0 && nv > 0.0, "cosine_similarity: zero-norm input");
        let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let c = dot / (nu * nv);
        self.record2(u, v, vec![1], vec![c], |iu, iv| Op::CosineSim { u: iu, v: iv })
    }

    // ── Image-shaped ops ────────────────────────────────────────────────

    /// Bilinear resize of a `[c×h×w]` tensor with half-pixel-center
    /// sampling. The output is not clamped.
    pub fn bilinear_resize(&mut self, a: &Tensor, oh: usize, ow: usize) -> Tensor {
        assert!(a.shape().len() == 3, "bilinear_resize: rank-3 required, got {:?}", a.shape());
        assert!(oh >= 1 && ow >= 1, "bilinear_resize: non-positive target size {}x{}", oh, ow);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let (y0, y1, wy) = lerp_axis(h, oh, y);
                for x in 0..ow {
                    let (x0, x1, wx) = lerp_axis(w, ow, x);
                    let base = ch * h * w;
                    let v = (1.0 - wy) * ((1.0 - wx) * a.data()[base + y0 * w + x0] + wx * a.data()[base + y0 * w + x1])
                        + wy * ((1.0 - wx) * a.data()[base + y1 * w + x0] + wx * a.data()[base + y1 * w + x1]);
                    data[(ch * oh + y) * ow + x] = v;
                }
            }
        }
        self.record1(a, vec![c, oh, ow], data, |ia| Op::Resize { a: ia, c, h, w, oh, ow })
    }

    /// Zero-pads a `[c×ih×iw]` tensor into the center of a `[c×oh×ow]`
    /// canvas at offset `(off, off)`.
    pub fn pad_center(&mut self, a: &Tensor, oh: usize, ow: usize) -> Tensor {
        assert!(a.shape().len() == 3, "pad_center: rank-3 required, got {:?}", a.shape());
        let (c, ih, iw) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert!(ih <= oh && iw <= ow, "pad_center: input {:?} larger than canvas {}x{}", a.shape(), oh, ow);
        assert!(
            (oh - ih) % 2 == 0 && (oh - ih) == (ow - iw),
            "pad_center: asymmetric padding for {:?} into {}x{}",
            a.shape(),
            oh,
            ow
        );
        let off = (oh - ih) / 2;
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..ih {
                for x in 0..iw {
                    data[(ch * oh + y + off) * ow + x + off] = a.data()[(ch * ih + y) * iw + x];
                }
            }
        }
        self.record1(a, vec![c, oh, ow], data, |ia| Op::PadCenter { a: ia, c, ih, iw, oh, ow, off })
    }

    /// Splits a `[c×h×w]` image into non-overlapping `ps×ps` patches,
    /// flattened per patch as `(channel, dy, dx)`: `[(h/ps)(w/ps) × c·ps²]`.
    pub fn patchify(&mut self, a: &Tensor, ps: usize) -> Tensor {
        assert!(a.shape().len() == 3, "patchify: rank-3 required, got {:?}", a.shape());
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert!(
            ps > 0 && h % ps == 0 && w % ps == 0,
            "patchify: dims {}x{} not divisible by patch size {}",
            h,
            w,
            ps
        );
        let (gh, gw) = (h / ps, w / ps);
        let np = gh * gw;
        let fd = c * ps * ps;
        let mut data = vec![0.0; np * fd];
        for py in 0..gh {
            for px in 0..gw {
                let pi = py * gw + px;
                for ch in 0..c {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            let fi = (ch * ps + dy) * ps + dx;
                            data[pi * fd + fi] = a.data()[(ch * h + py * ps + dy) * w + px * ps + dx];
                        }
                    }
                }
            }
        }
        self.record1(a, vec![np, fd], data, |ia| Op::Patchify { a: ia, c, h, w, ps })
    }

    /// `base + mask ⊙ delta` with a constant 0/1 mask. The gradient with
    /// respect to `delta` is exactly `mask ⊙ upstream`.
    pub fn masked_add(&mut self, base: &Tensor, delta: &Tensor, mask: &Tensor) -> Tensor {
        assert!(
            base.shape() == delta.shape() && base.shape() == mask.shape(),
            "masked_add: shape mismatch base {:?}, delta {:?}, mask {:?}",
            base.shape(),
            delta.shape(),
            mask.shape()
        );
        let data: Vec<f64> = base
            .data()
            .iter()
            .zip(delta.data())
            .zip(mask.data())
            .map(|((b, d), m)| b + m * d)
            .collect();
        let mask_data = mask.data().to_vec();
        self.record2(base, delta, base.shape().to_vec(), data, |ib, id| Op::MaskedAdd {
            base: ib,
            delta: id,
            mask: mask_data,
        })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar seed recorded on this tape.
    /// A node consumed by several downstream nodes receives the sum of
    /// their contributions; gradients are only materialized for nodes on a
    /// differentiable path.
    pub fn backward(&self, seed: &Tensor) -> Grads {
        let (tid, seed_idx) = seed.node.expect("backward: seed is not recorded on a tape");
        assert!(tid == self.id, "backward: seed belongs to a different tape");
        assert!(seed.is_scalar(), "backward: seed must be scalar, got shape {:?}", seed.shape());

        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[seed_idx] = Some(vec![1.0]);

        for i in (0..=seed_idx).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(go) = g[i].clone() else { continue };
            self.propagate(i, &go, &mut g);
        }

        let grads = g
            .into_iter()
            .enumerate()
            .map(|(i, gv)| gv.map(|v| Tensor::new(self.nodes[i].shape.clone(), v)))
            .collect();
        Grads { tape_id: self.id, grads }
    }

    fn propagate(&self, i: usize, go: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |g: &mut [Option<Vec<f64>>], idx: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[idx].requires_grad {
                return;
            }
            let slot = g[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, &mut |ga| add_into(ga, go, 1.0));
                acc(g, *b, &mut |gb| add_into(gb, go, 1.0));
            }
            Op::Sub(a, b) => {
                acc(g, *a, &mut |ga| add_into(ga, go, 1.0));
                acc(g, *b, &mut |gb| add_into(gb, go, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                acc(g, *a, &mut |ga| {
                    for k in 0..go.len() {
                        ga[k] += go[k] * bv[k];
                    }
                });
                acc(g, *b, &mut |gb| {
                    for k in 0..go.len() {
                        gb[k] += go[k] * av[k];
                    }
                });
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc(g, p, &mut |gp| add_into(gp, go, 1.0));
                }
            }
            Op::Scale(a, c) => acc(g, *a, &mut |ga| add_into(ga, go, *c)),
            Op::AddScalar(a) => acc(g, *a, &mut |ga| add_into(ga, go, 1.0)),
            Op::Exp(a) => {
                let out = &node.data;
                acc(g, *a, &mut |ga| {
                    for k in 0..go.len() {
                        ga[k] += go[k] * out[k];
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[*a].data;
                acc(g, *a, &mut |ga| {
                    for k in 0..go.len() {
                        ga[k] += go[k] * gelu_grad(av[k]);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, kk, n) = (*m, *k, *n);
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                acc(g, *a, &mut |ga| {
                    for i in 0..m {
                        for r in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += go[i * n + j] * bv[r * n + j];
                            }
                            ga[i * kk + r] += s;
                        }
                    }
                });
                acc(g, *b, &mut |gb| {
                    for i in 0..m {
                        for r in 0..kk {
                            let av_ir = av[i * kk + r];
                            if av_ir == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[r * n + j] += av_ir * go[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(g, *a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += go[c * rows + r];
                        }
                    }
                });
            }
            Op::Row { a, row, cols } => {
                let (row, cols) = (*row, *cols);
                acc(g, *a, &mut |ga| {
                    for c in 0..cols {
                        ga[row * cols + c] += go[c];
                    }
                });
            }
            Op::SliceRows { a, r0, cols } => {
                let (r0, cols) = (*r0, *cols);
                acc(g, *a, &mut |ga| {
                    for (k, v) in go.iter().enumerate() {
                        ga[r0 * cols + k] += v;
                    }
                });
            }
            Op::Concat0 { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    let piece = &go[offset..offset + len];
                    acc(g, p, &mut |gp| add_into(gp, piece, 1.0));
                    offset += len;
                }
            }
            Op::Embed { table, ids, dim } => {
                let dim = *dim;
                acc(g, *table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            gt[id * dim + c] += go[r * dim + c];
                        }
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let out = &node.data;
                let cols = node.shape[1];
                let rows = node.shape[0];
                acc(g, *a, &mut |ga| {
                    for r in 0..rows {
                        let s = &out[r * cols..(r + 1) * cols];
                        let gr = &go[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += s[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let z = &self.nodes[*logits].data;
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let zsum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let go0 = go[0];
                let target = *target;
                acc(g, *logits, &mut |ga| {
                    for (k, gk) in ga.iter_mut().enumerate() {
                        let p = (z[k] - m).exp() / zsum;
                        *gk += go0 * (p - if k == target { 1.0 } else { 0.0 });
                    }
                });
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let av = &self.nodes[*a].data;
                let gv = &self.nodes[*gamma].data;
                let cols = node.shape[1];
                let rows = node.shape[0];
                let eps = *eps;
                acc(g, *a, &mut |ga| {
                    for r in 0..rows {
                        let src = &av[r * cols..(r + 1) * cols];
                        let (mean, std) = row_moments(src, eps);
                        let gr = &go[r * cols..(r + 1) * cols];
                        let mut gsum = 0.0;
                        let mut gxsum = 0.0;
                        for c in 0..cols {
                            let xh = (src[c] - mean) / std;
                            let gg = gr[c] * gv[c];
                            gsum += gg;
                            gxsum += gg * xh;
                        }
                        let inv = 1.0 / cols as f64;
                        for c in 0..cols {
                            let xh = (src[c] - mean) / std;
                            let gg = gr[c] * gv[c];
                            ga[r * cols + c] += (gg - gsum * inv - xh * gxsum * inv) / std;
                        }
                    }
                });
                acc(g, *gamma, &mut |gg| {
                    for r in 0..rows {
                        let src = &av[r * cols..(r + 1) * cols];
                        let (mean, std) = row_moments(src, eps);
                        for c in 0..cols {
                            gg[c] += go[r * cols + c] * (src[c] - mean) / std;
                        }
                    }
                });
                acc(g, *beta, &mut |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += go[r * cols + c];
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(g, *a, &mut |ga| {
                for v in ga.iter_mut() {
                    *v += go[0];
                }
            }),
            Op::MeanAll(a) => {
                let n = self.nodes[*a].data.len() as f64;
                acc(g, *a, &mut |ga| {
                    for v in ga.iter_mut() {
                        *v += go[0] / n;
                    }
                });
            }
            Op::MeanRows { a } => {
                let rows = self.nodes[*a].shape[0];
                let cols = node.shape[0];
                acc(g, *a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += go[c] / rows as f64;
                        }
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = node.data[0];
                if norm > 0.0 {
                    let av = &self.nodes[*a].data;
                    acc(g, *a, &mut |ga| {
                        for k in 0..ga.len() {
                            ga[k] += go[0] * av[k] / norm;
                        }
                    });
                }
            }
            Op::CosineSim { u, v } => {
                let uv = &self.nodes[*u].data;
                let vv = &self.nodes[*v].data;
                let nu = l2_of(uv);
                let nv = l2_of(vv);
                let c = node.data[0];
                acc(g, *u, &mut |gu| {
                    for k in 0..gu.len() {
                        gu[k] += go[0] * (vv[k] / (nu * nv) - c * uv[k] / (nu * nu));
                    }
                });
                acc(g, *v, &mut |gv| {
                    for k in 0..gv.len() {
                        gv[k] += go[0] * (uv[k] / (nu * nv) - c * vv[k] / (nv * nv));
                    }
                });
            }
            Op::Resize { a, c, h, w, oh, ow } => {
                let (c, h, w, oh, ow) = (*c, *h, *w, *oh, *ow);
                acc(g, *a, &mut |ga| {
                    for ch in 0..c {
                        for y in 0..oh {
                            let (y0, y1, wy) = lerp_axis(h, oh, y);
                            for x in 0..ow {
                                let (x0, x1, wx) = lerp_axis(w, ow, x);
                                let v = go[(ch * oh + y) * ow + x];
                                let base = ch * h * w;
                                ga[base + y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                                ga[base + y0 * w + x1] += v * (1.0 - wy) * wx;
                                ga[base + y1 * w + x0] += v * wy * (1.0 - wx);
                                ga[base + y1 * w + x1] += v * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::PadCenter { a, c, ih, iw, oh: _, ow, off } => {
                let (c, ih, iw, ow, off) = (*c, *ih, *iw, *ow, *off);
                let oh = node.shape[1];
                acc(g, *a, &mut |ga| {
                    for ch in 0..c {
                        for y in 0..ih {
                            for x in 0..iw {
                                ga[(ch * ih + y) * iw + x] += go[(ch * oh + y + off) * ow + x + off];
                            }
                        }
                    }
                });
            }
            Op::Patchify { a, c, h, w, ps } => {
                let (c, h, w, ps) = (*c, *h, *w, *ps);
                let gw = w / ps;
                let fd = c * ps * ps;
                acc(g, *a, &mut |ga| {
                    for py in 0..(h / ps) {
                        for px in 0..gw {
                            let pi = py * gw + px;
                            for ch in 0..c {
                                for dy in 0..ps {
                                    for dx in 0..ps {
                                        let fi = (ch * ps + dy) * ps + dx;
                                        ga[(ch * h + py * ps + dy) * w + px * ps + dx] += go[pi * fd + fi];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskedAdd { base, delta, mask } => {
                acc(g, *base, &mut |gb| add_into(gb, go, 1.0));
                acc(g, *delta, &mut |gd| {
                    for k in 0..go.len() {
                        gd[k] += go[k] * mask[k];
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], addressable by the tensors
/// that were recorded on the tape.
pub struct Grads {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the seed with respect to `t`, if `t` is recorded on the
    /// originating tape and lies on a differentiable path.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        match t.node {
            Some((tid, idx)) if tid == self.tape_id => self.grads[idx].as_ref(),
            _ => None,
        }
    }

    /// Like [`Grads::get`] but yields a zero tensor off the path.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn l2_of(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn row_moments(src: &[f64], eps: f64) -> (f64, f64) {
    let n = src.len() as f64;
    let mean = src.iter().sum::<f64>() / n;
    let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_S2OP * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S2OP * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S2OP * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Half-pixel-center source coordinates for 1-D linear interpolation:
/// returns the two source indices and the weight of the second.
fn lerp_axis(inp: usize, out: usize, i: usize) -> (usize, usize, f64) {
    let scale = inp as f64 / out as f64;
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(inp - 1);
    (i0, i1, s - i0 as f64)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for r in 0..k {
            let av = a[i * k + r];
            if av == 0.0 {
                continue;
            }
            let brow = &b[r * n..(r + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
