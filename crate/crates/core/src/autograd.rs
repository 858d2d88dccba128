//! A small reverse-mode autodiff tape over dense f64 matrices.
//!
//! Each forward op records a node with its value and a closure that routes
//! the output gradient to its parents. Building a fresh graph per step keeps
//! the machinery define-by-run and makes finite-difference checks trivial.

#![allow(clippy::needless_range_loop)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mask::VisMask;

/// Dense row-major matrix. Vectors are 1 x n rows, scalars 1 x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &mut [Option<Tensor>])>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
    is_param: bool,
    needs_grad: bool,
}

fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// The tape. Ops append nodes; `backward` walks them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>, is_param: bool, needs: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            back: if needs { back } else { None },
            is_param,
            needs_grad: needs || is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, None, false, false)
    }

    /// Leaf whose gradient is retained by `backward`.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, None, true, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g, grads| {
            acc(grads, a.0, g.clone());
            acc(grads, b.0, g.clone());
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = self.value(a);
        let out = Tensor::from_vec(va.rows, va.cols, va.data.iter().map(|v| v * k).collect());
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g, grads| {
            let mut gg = g.clone();
            for v in gg.data.iter_mut() {
                *v *= k;
            }
            acc(grads, a.0, gg);
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.matmul(&vb);
        let needs = self.needs(a) || self.needs(b);
        let na = self.needs(a);
        let nb = self.needs(b);
        let back: BackFn = Box::new(move |g, grads| {
            if na {
                acc(grads, a.0, g.matmul(&vb.transpose()));
            }
            if nb {
                acc(grads, b.0, va.transpose().matmul(g));
            }
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g, grads| {
            acc(grads, a.0, g.transpose());
        });
        self.push(out, Some(back), false, needs)
    }

    /// Add a 1 x c bias row to every row of a.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(bias);
        assert_eq!(vb.rows, 1);
        assert_eq!(va.cols, vb.cols, "bias width mismatch");
        let mut out = va.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += vb.data[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        let back: BackFn = Box::new(move |g, grads| {
            acc(grads, a.0, g.clone());
            let mut gb = Tensor::zeros(1, g.cols);
            for i in 0..g.rows {
                for j in 0..g.cols {
                    gb.data[j] += g.get(i, j);
                }
            }
            acc(grads, bias.0, gb);
        });
        self.push(out, Some(back), false, needs)
    }

    /// Gather rows of an id table: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let vt = self.value(table);
        let cols = vt.cols;
        let mut out = Tensor::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            let row = vt.row(id as usize);
            out.data[i * cols..(i + 1) * cols].copy_from_slice(row);
        }
        let needs = self.needs(table);
        let ids_cap: Vec<u32> = ids.to_vec();
        let table_rows = vt.rows;
        let back: BackFn = Box::new(move |g, grads| {
            let mut gt = Tensor::zeros(table_rows, cols);
            for (i, &id) in ids_cap.iter().enumerate() {
                let dst = &mut gt.data[id as usize * cols..(id as usize + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(g.row(i)) {
                    *d += s;
                }
            }
            acc(grads, table.0, gt);
        });
        self.push(out, Some(back), false, needs)
    }

    /// Gather rows by index: out[i] = a[idx[i]].
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let va = self.value(a);
        let cols = va.cols;
        let rows_in = va.rows;
        let mut out = Tensor::zeros(idx.len(), cols);
        for (i, &r) in idx.iter().enumerate() {
            out.data[i * cols..(i + 1) * cols].copy_from_slice(va.row(r));
        }
        let needs = self.needs(a);
        let idx_cap: Vec<usize> = idx.to_vec();
        let back: BackFn = Box::new(move |g, grads| {
            let mut ga = Tensor::zeros(rows_in, cols);
            for (i, &r) in idx_cap.iter().enumerate() {
                let dst = &mut ga.data[r * cols..(r + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(g.row(i)) {
                    *d += s;
                }
            }
            acc(grads, a.0, ga);
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        assert!(start + len <= cols);
        let mut out = Tensor::zeros(rows, len);
        for i in 0..rows {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&va.data[i * cols + start..i * cols + start + len]);
        }
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g, grads| {
            let mut ga = Tensor::zeros(rows, cols);
            for i in 0..rows {
                ga.data[i * cols + start..i * cols + start + len].copy_from_slice(g.row(i));
            }
            acc(grads, a.0, ga);
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows);
            for i in 0..rows {
                out.data[i * total + offset..i * total + offset + w].copy_from_slice(vp.row(i));
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let parts_cap: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: BackFn = Box::new(move |g, grads| {
            let mut offset = 0;
            for (&p, &w) in parts_cap.iter().zip(&widths) {
                let mut gp = Tensor::zeros(rows, w);
                for i in 0..rows {
                    gp.data[i * w..(i + 1) * w]
                        .copy_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                }
                acc(grads, p, gp);
                offset += w;
            }
        });
        self.push(out, Some(back), false, needs)
    }

    /// Per-row layer norm with learned gain/bias (both 1 x c).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let vg = self.value(gamma).clone();
        let vb = self.value(beta);
        assert_eq!(vg.shape(), (1, cols));
        assert_eq!(vb.shape(), (1, cols));

        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..cols {
                let xh = (row[j] - mean) * istd;
                xhat.set(i, j, xh);
                out.set(i, j, vg.data[j] * xh + vb.data[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let back: BackFn = Box::new(move |g, grads| {
            let mut ggamma = Tensor::zeros(1, cols);
            let mut gbeta = Tensor::zeros(1, cols);
            let mut gx = Tensor::zeros(rows, cols);
            for i in 0..rows {
                let grow = g.row(i);
                let xrow = xhat.row(i);
                let mut d = vec![0.0; cols];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..cols {
                    ggamma.data[j] += grow[j] * xrow[j];
                    gbeta.data[j] += grow[j];
                    d[j] = vg.data[j] * grow[j];
                    mean_d += d[j];
                    mean_dx += d[j] * xrow[j];
                }
                mean_d /= cols as f64;
                mean_dx /= cols as f64;
                for j in 0..cols {
                    gx.set(i, j, inv_std[i] * (d[j] - mean_d - xrow[j] * mean_dx));
                }
            }
            acc(grads, gamma.0, ggamma);
            acc(grads, beta.0, gbeta);
            acc(grads, x.0, gx);
        });
        self.push(out, Some(back), false, needs)
    }

    /// Row-wise softmax restricted to visible columns. Invisible columns get
    /// probability 0; a row with no visible column comes out all-zero.
    pub fn masked_softmax(&mut self, x: NodeId, vis: &VisMask) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        assert_eq!((vis.rows(), vis.cols()), (rows, cols), "mask shape mismatch");
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut m = f64::NEG_INFINITY;
            for j in 0..cols {
                if vis.visible(i, j) {
                    m = m.max(vx.get(i, j));
                }
            }
            if m == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if vis.visible(i, j) {
                    let e = (vx.get(i, j) - m).exp();
                    out.set(i, j, e);
                    sum += e;
                }
            }
            for j in 0..cols {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
        let needs = self.needs(x);
        let y = out.clone();
        let back: BackFn = Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(rows, cols);
            for i in 0..rows {
                let dot: f64 = (0..cols).map(|j| g.get(i, j) * y.get(i, j)).sum();
                for j in 0..cols {
                    gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                }
            }
            acc(grads, x.0, gx);
        });
        self.push(out, Some(back), false, needs)
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044_715;
        let vx = self.value(x).clone();
        let (rows, cols) = vx.shape();
        let mut out = Tensor::zeros(rows, cols);
        for (o, &v) in out.data.iter_mut().zip(&vx.data) {
            let u = K * (v + C * v * v * v);
            *o = 0.5 * v * (1.0 + u.tanh());
        }
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(rows, cols);
            for ((d, &v), &go) in gx.data.iter_mut().zip(&vx.data).zip(&g.data) {
                let u = K * (v + C * v * v * v);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * C * v * v);
                *d = go * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
            acc(grads, x.0, gx);
        });
        self.push(out, Some(back), false, needs)
    }

    /// Inverted dropout; scales surviving activations by 1/(1-rate).
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return x;
        }
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = Tensor::zeros(rows, cols);
        for ((o, &v), &m) in out.data.iter_mut().zip(&vx.data).zip(&mask) {
            *o = v * m;
        }
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(rows, cols);
            for ((d, &go), &m) in gx.data.iter_mut().zip(&g.data).zip(&mask) {
                *d = go * m;
            }
            acc(grads, x.0, gx);
        });
        self.push(out, Some(back), false, needs)
    }

    /// Per-row cross entropy: out[i] = logsumexp(row_i) - row_i[target_i].
    pub fn ce_rows(&mut self, logits: NodeId, targets: &[u32]) -> NodeId {
        let vl = self.value(logits);
        let (rows, cols) = vl.shape();
        assert_eq!(rows, targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, 1);
        for i in 0..rows {
            let row = vl.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - m).exp();
                probs.set(i, j, e);
                sum += e;
            }
            for j in 0..cols {
                probs.set(i, j, probs.get(i, j) / sum);
            }
            let lse = m + sum.ln();
            out.set(i, 0, lse - row[targets[i] as usize]);
        }
        let needs = self.needs(logits);
        let targets_cap: Vec<u32> = targets.to_vec();
        let back: BackFn = Box::new(move |g, grads| {
            let mut gl = Tensor::zeros(rows, cols);
            for i in 0..rows {
                let gi = g.get(i, 0);
                for j in 0..cols {
                    let indicator = if j == targets_cap[i] as usize { 1.0 } else { 0.0 };
                    gl.set(i, j, gi * (probs.get(i, j) - indicator));
                }
            }
            acc(grads, logits.0, gl);
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let out = Tensor::scalar(vx.data.iter().sum());
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g, grads| {
            let gi = g.item();
            acc(grads, x.0, Tensor::from_vec(rows, cols, vec![gi; rows * cols]));
        });
        self.push(out, Some(back), false, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Gradients of a scalar loss for every param node; intermediate
    /// gradients are freed as soon as they have been routed.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                back(&g, &mut grads);
            }
            if self.nodes[id].is_param {
                grads[id] = Some(g);
            }
        }
        grads
    }
}
