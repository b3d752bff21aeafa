//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each op records its forward value and a backward closure. A fresh tape is
//! built per forward pass (per slice, per crop, per training example), which
//! keeps memory bounded and makes eval-mode forwards just "tape without
//! backward". All math is `f64`.

use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Boolean attention mask: `allowed[q * keys + k]` says query q may attend key k.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn all_true(queries: usize, keys: usize) -> Self {
        AttnMask {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Lower-triangular mask for autoregressive decoding.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        AttnMask {
            queries: len,
            keys: len,
            allowed,
        }
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut GradStore)>;

struct Node {
    back: Option<BackFn>,
}

/// Gradient accumulator indexed by node id.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn accumulate(&mut self, var: Var, delta: Tensor) {
        match &mut self.grads[var.id] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot => *slot = Some(delta),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.id].as_ref()
    }
}

/// Forward tape: values plus backward closures.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.id]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.id].shape()
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        self.nodes.push(Node { back });
        Var { id }
    }

    /// Insert a tensor as a leaf (inputs, parameters, constants).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Run the backward pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> GradStore {
        assert_eq!(self.vals[loss.id].len(), 1, "backward needs a scalar loss");
        let mut store = GradStore {
            grads: vec![None; self.vals.len()],
        };
        store.grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(back) = &self.nodes[id].back else {
                continue;
            };
            let Some(gout) = store.grads[id].clone() else {
                continue;
            };
            back(&self.vals, &gout, &mut store);
        }
        store
    }

    // ---- elementwise and arithmetic ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.vals[a.id].clone();
        out.add_scaled(&self.vals[b.id], 1.0);
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a, g.clone());
                store.accumulate(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut out = self.vals[a.id].clone();
        out.add_scaled(&self.vals[b.id], -1.0);
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a, g.clone());
                let mut gb = g.clone();
                gb.scale_in_place(-1.0);
                store.accumulate(b, gb);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.vals[a.id]
                .data()
                .iter()
                .zip(self.vals[b.id].data())
                .map(|(x, y)| x * y)
                .collect(),
        )
        .expect("mul shape");
        self.push(
            out,
            Some(Box::new(move |vals, g, store| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vals[b.id].data())
                        .map(|(gi, y)| gi * y)
                        .collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vals[a.id].data())
                        .map(|(gi, x)| gi * x)
                        .collect(),
                )
                .unwrap();
                store.accumulate(a, ga);
                store.accumulate(b, gb);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.vals[a.id].map(|v| v * c);
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = g.clone();
                ga.scale_in_place(c);
                store.accumulate(a, ga);
            })),
        )
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.vals[a.id]
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x * y)
                .collect(),
        )
        .expect("mul_const shape");
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(c.data())
                        .map(|(gi, y)| gi * y)
                        .collect(),
                )
                .unwrap();
                store.accumulate(a, ga);
            })),
        )
    }

    /// Broadcast-add a length-N vector to every row of an M×N matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let cols = self.vals[a.id].cols();
        assert_eq!(self.vals[bias.id].len(), cols, "bias length mismatch");
        let mut out = self.vals[a.id].clone();
        let rows = out.rows();
        for i in 0..rows {
            let b = &self.vals[bias.id];
            let row = out.row_mut(i);
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a, g.clone());
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for i in 0..g.rows() {
                    for (s, &v) in gb.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                store.accumulate(bias, Tensor::new(vec![cols], gb).unwrap());
            })),
        )
    }

    // ---- matrix products ----

    /// a (M×K) @ b (K×N) -> M×N
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.vals[a.id].matmul(&self.vals[b.id]);
        self.push(
            out,
            Some(Box::new(move |vals, g, store| {
                let ga = g.matmul(&vals[b.id].transpose());
                let gb = vals[a.id].transpose().matmul(g);
                store.accumulate(a, ga);
                store.accumulate(b, gb);
            })),
        )
    }

    /// a (M×K) @ b (N×K)^T -> M×N, avoids materializing transposes in attention.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.vals[a.id].matmul(&self.vals[b.id].transpose());
        self.push(
            out,
            Some(Box::new(move |vals, g, store| {
                let ga = g.matmul(&vals[b.id]);
                let gb = g.transpose().matmul(&vals[a.id]);
                store.accumulate(a, ga);
                store.accumulate(b, gb);
            })),
        )
    }

    // ---- structural ops ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.vals[parts[0].id].cols();
        let mut data = Vec::new();
        let mut splits = Vec::with_capacity(parts.len());
        for &p in parts {
            assert_eq!(self.vals[p.id].cols(), cols, "concat_rows column mismatch");
            splits.push(self.vals[p.id].rows());
            data.extend_from_slice(self.vals[p.id].data());
        }
        let rows: usize = splits.iter().sum();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::new(vec![rows, cols], data).unwrap(),
            Some(Box::new(move |_vals, g, store| {
                let mut start = 0;
                for (&p, &r) in parts.iter().zip(&splits) {
                    let chunk = g.data()[start * cols..(start + r) * cols].to_vec();
                    store.accumulate(p, Tensor::new(vec![r, cols], chunk).unwrap());
                    start += r;
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0].id].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.vals[p.id].cols()).collect();
        for &p in parts {
            assert_eq!(self.vals[p.id].rows(), rows, "concat_cols row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for i in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.vals[p.id].row(i));
                off += w;
            }
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gp = Tensor::zeros(&[rows, w]);
                    for i in 0..rows {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    store.accumulate(p, gp);
                    off += w;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let rows = self.vals[a.id].rows();
        let cols = self.vals[a.id].cols();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Tensor::zeros(&[rows, len]);
        for i in 0..rows {
            out.row_mut(i)
                .copy_from_slice(&self.vals[a.id].row(i)[start..start + len]);
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    ga.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                store.accumulate(a, ga);
            })),
        )
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src_rows = self.vals[a.id].rows();
        let cols = self.vals[a.id].cols();
        for &i in idx {
            assert!(i < src_rows, "select_rows index {} out of {}", i, src_rows);
        }
        let mut out = Tensor::zeros(&[idx.len(), cols]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.vals[a.id].row(i));
        }
        let idx = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = Tensor::zeros(&[src_rows, cols]);
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &src) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                store.accumulate(a, ga);
            })),
        )
    }

    /// Linear interpolation of an M×d matrix to `new_len` rows.
    ///
    /// For `new_len == M` this is the identity. Row t of the output samples
    /// position t*(M-1)/(new_len-1) in the input; used to stretch learned
    /// positional embeddings to longer sequences.
    pub fn interp_rows(&mut self, a: Var, new_len: usize) -> Var {
        let m = self.vals[a.id].rows();
        let cols = self.vals[a.id].cols();
        assert!(m >= 1 && new_len >= 1);
        // (target row, source row, weight) triples of the interpolation matrix
        let mut weights: Vec<(usize, usize, f64)> = Vec::new();
        for t in 0..new_len {
            if m == 1 || new_len == 1 {
                weights.push((t, 0, 1.0));
                continue;
            }
            let pos = t as f64 * (m - 1) as f64 / (new_len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 || lo == hi {
                weights.push((t, lo, 1.0));
            } else {
                weights.push((t, lo, 1.0 - frac));
                weights.push((t, hi, frac));
            }
        }
        let mut out = Tensor::zeros(&[new_len, cols]);
        for &(t, s, w) in &weights {
            let src: Vec<f64> = self.vals[a.id].row(s).to_vec();
            for (o, v) in out.row_mut(t).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = Tensor::zeros(&[m, cols]);
                for &(t, s, w) in &weights {
                    for (dst, &src) in ga.row_mut(s).iter_mut().zip(g.row(t)) {
                        *dst += w * src;
                    }
                }
                store.accumulate(a, ga);
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.vals[a.id].map(|v| v.max(0.0));
        self.push(
            out,
            Some(Box::new(move |vals, g, store| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vals[a.id].data())
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                store.accumulate(a, ga);
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.vals[a.id].map(gelu_tanh);
        self.push(
            out,
            Some(Box::new(move |vals, g, store| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vals[a.id].data())
                        .map(|(gi, &x)| gi * gelu_tanh_grad(x))
                        .collect(),
                )
                .unwrap();
                store.accumulate(a, ga);
            })),
        )
    }

    /// Row-wise softmax with an optional attention mask. Disallowed logits are
    /// treated as −∞ (zero weight); every row must keep at least one allowed key.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Rc<AttnMask>>) -> Var {
        let rows = self.vals[a.id].rows();
        let cols = self.vals[a.id].cols();
        if let Some(m) = &mask {
            assert_eq!((m.queries, m.keys), (rows, cols), "mask shape mismatch");
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for i in 0..rows {
            let src = self.vals[a.id].row(i);
            let dst = out.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                let ok = mask.as_ref().map_or(true, |m| m.is_allowed(i, j));
                if ok && src[j] > max {
                    max = src[j];
                }
            }
            assert!(
                max > f64::NEG_INFINITY,
                "softmax row {} has no allowed keys",
                i
            );
            let mut sum = 0.0;
            for j in 0..cols {
                let ok = mask.as_ref().map_or(true, |m| m.is_allowed(i, j));
                let e = if ok { (src[j] - max).exp() } else { 0.0 };
                dst[j] = e;
                sum += e;
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        let out_clone = out.clone();
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    let y = out_clone.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..cols {
                        ga.row_mut(i)[j] = y[j] * (gr[j] - dot);
                    }
                }
                store.accumulate(a, ga);
            })),
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let rows = self.vals[a.id].rows();
        let cols = self.vals[a.id].cols();
        let mut out = Tensor::zeros(&[rows, cols]);
        for i in 0..rows {
            let src = self.vals[a.id].row(i);
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.row_mut(i).iter_mut().zip(src) {
                *o = v - lse;
            }
        }
        let out_clone = out.clone();
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    let gsum: f64 = g.row(i).iter().sum();
                    for j in 0..cols {
                        ga.row_mut(i)[j] = g.row(i)[j] - out_clone.row(i)[j].exp() * gsum;
                    }
                }
                store.accumulate(a, ga);
            })),
        )
    }

    /// Per-row layer norm with scale and shift vectors.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let rows = self.vals[x.id].rows();
        let cols = self.vals[x.id].cols();
        assert_eq!(self.vals[gamma.id].len(), cols);
        assert_eq!(self.vals[beta.id].len(), cols);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let src = self.vals[x.id].row(i);
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..cols {
                let h = (src[j] - mean) * inv;
                xhat.row_mut(i)[j] = h;
                out.row_mut(i)[j] = h * self.vals[gamma.id].data()[j] + self.vals[beta.id].data()[j];
            }
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, store| {
                let n = cols as f64;
                let mut gx = Tensor::zeros(&[rows, cols]);
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for i in 0..rows {
                    let gr = g.row(i);
                    let hr = xhat.row(i);
                    // dL/dxhat_j = g_j * gamma_j
                    let gh: Vec<f64> = (0..cols)
                        .map(|j| gr[j] * vals[gamma.id].data()[j])
                        .collect();
                    let sum_gh: f64 = gh.iter().sum();
                    let sum_gh_h: f64 = gh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx.row_mut(i)[j] =
                            inv_std[i] * (gh[j] - sum_gh / n - hr[j] * sum_gh_h / n);
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                }
                store.accumulate(x, gx);
                store.accumulate(gamma, Tensor::new(vec![cols], ggamma).unwrap());
                store.accumulate(beta, Tensor::new(vec![cols], gbeta).unwrap());
            })),
        )
    }

    /// Row-wise L2 normalization: y_i = x_i / max(||x_i||, eps).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let rows = self.vals[a.id].rows();
        let cols = self.vals[a.id].cols();
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut norms = vec![0.0; rows];
        for i in 0..rows {
            let src = self.vals[a.id].row(i);
            let n = src.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[i] = n;
            for (o, &v) in out.row_mut(i).iter_mut().zip(src) {
                *o = v / n;
            }
        }
        let out_clone = out.clone();
        self.push(
            out,
            Some(Box::new(move |_vals, g, store| {
                let mut ga = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    let y = out_clone.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga.row_mut(i)[j] = (gr[j] - y[j] * dot) / norms[i];
                    }
                }
                store.accumulate(a, ga);
            })),
        )
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.vals[a.id].data().iter().sum();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a, Tensor::full(&shape, g.item()));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.id].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean |pred − target| restricted to the given rows, normalized by the
    /// number of selected rows (not by row width).
    pub fn l1_rows_vs_const(&mut self, pred: Var, target: Rc<Tensor>, rows_sel: &[usize]) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "l1 target shape mismatch");
        assert!(!rows_sel.is_empty(), "l1_rows_vs_const needs rows");
        let cols = self.vals[pred.id].cols();
        let all_rows = self.vals[pred.id].rows();
        let mut total = 0.0;
        for &i in rows_sel {
            assert!(i < all_rows);
            for j in 0..cols {
                total += (self.vals[pred.id].at(i, j) - target.at(i, j)).abs();
            }
        }
        let norm = rows_sel.len() as f64;
        let rows_sel = rows_sel.to_vec();
        self.push(
            Tensor::scalar(total / norm),
            Some(Box::new(move |vals, g, store| {
                let mut gp = Tensor::zeros(&[all_rows, cols]);
                let gs = g.item() / norm;
                for &i in &rows_sel {
                    for j in 0..cols {
                        let d = vals[pred.id].at(i, j) - target.at(i, j);
                        gp.set(i, j, gs * d.signum());
                    }
                }
                store.accumulate(pred, gp);
            })),
        )
    }

    /// Sum of −log P(target | logits row) over the given positions.
    pub fn cross_entropy_sum(&mut self, logits: Var, positions: &[usize], targets: &[usize]) -> Var {
        assert_eq!(positions.len(), targets.len());
        assert!(!positions.is_empty(), "cross_entropy_sum needs positions");
        let rows = self.vals[logits.id].rows();
        let vocab = self.vals[logits.id].cols();
        let mut loss = 0.0;
        for (&p, &t) in positions.iter().zip(targets) {
            assert!(p < rows && t < vocab);
            let row = self.vals[logits.id].row(p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let positions = positions.to_vec();
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |vals, g, store| {
                let gs = g.item();
                let mut gl = Tensor::zeros(&[rows, vocab]);
                for (&p, &t) in positions.iter().zip(&targets) {
                    let row = vals[logits.id].row(p);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..vocab {
                        let soft = (row[j] - max).exp() / sum;
                        let delta = if j == t { 1.0 } else { 0.0 };
                        gl.row_mut(p)[j] += gs * (soft - delta);
                    }
                }
                store.accumulate(logits, gl);
            })),
        )
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let c = tape.add(a, b);
        let s = tape.sum_all(c);
        assert_eq!(tape.value(s).item(), 10.0);
        let grads = tape.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 5.0, 5.0]]));
        let s = tape.softmax_rows(a, None);
        for i in 0..2 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let mask = AttnMask {
            queries: 1,
            keys: 3,
            allowed: vec![true, false, true],
        };
        let s = tape.softmax_rows(a, Some(Rc::new(mask)));
        let row = tape.value(s).row(0);
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_shape() {
        let m = AttnMask::causal(3);
        assert!(m.is_allowed(2, 0) && m.is_allowed(2, 2));
        assert!(!m.is_allowed(0, 1));
    }

    #[test]
    fn matmul_grad_hand_case() {
        // f = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b);
        let s = tape.sum_all(c);
        let grads = tape.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn interp_rows_identity_when_same_len() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.interp_rows(a, 2);
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn interp_rows_midpoint() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![0.0], vec![2.0]]));
        let out = tape.interp_rows(a, 3);
        assert_eq!(tape.value(out).data(), &[0.0, 1.0, 2.0]);
    }
}
