//! Append-only computation graph with eager forward evaluation.
//!
//! Nodes are evaluated as they are inserted, so insertion order is a valid
//! topological order and `backward` is a single reverse sweep. A graph is
//! confined to one thread; parameters enter by value (see [`Graph::param`])
//! and gradients are routed back into a [`ParamSet`] through recorded
//! bindings.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Floor applied to probabilities before powers and logs; keeps the
/// temperature machinery defined when a class probability underflows to zero.
pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Which scalar the positive-sample-alignment op returns.
///
/// `OneMinusCos` is the trainable default (zero at perfect alignment); the
/// other two keep the raw mean-cosine forms available for study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsaForm {
    #[default]
    OneMinusCos,
    NegCos,
    RawCos,
}

enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Mfm {
        x: NodeId,
    },
    MaxPool2d {
        x: NodeId,
        /// Flat input index chosen for each output element (first maximum wins).
        argmax: Vec<usize>,
    },
    GlobalMeanPool {
        x: NodeId,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    Lwf {
        y_new: NodeId,
        y_old: Tensor,
        temperature: f64,
    },
    Psa {
        emb_new: NodeId,
        emb_old: Tensor,
        rows: Vec<usize>,
        form: PsaForm,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode graph. See module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(NodeId, usize)>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Insert a constant or input tensor. No gradient is tracked past it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Insert a parameter leaf, recording which slot of `params` should
    /// receive its gradient on [`Graph::backward_params`].
    pub fn param(&mut self, params: &ParamSet, slot: usize) -> NodeId {
        let id = self.push(params.get(slot).value.clone(), Op::Leaf);
        self.bindings.push((id, slot));
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call at `id`, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    // ----- ops ------------------------------------------------------------

    /// `y = x·W + b` for `x: [n,d]`, `W: [d,m]`, `b: [m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, d) = as_2d(self.value(x), "linear input")?;
        let (wd, m) = as_2d(self.value(w), "linear weight")?;
        if wd != d {
            return Err(shape_err("linear", &format!("W rows == {d}"), &format!("{wd}")));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [m] {
                return Err(shape_err("linear", &format!("bias [{m}]"), &format!("{bs:?}")));
            }
        }
        let mut out = vec![0.0; n * m];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let xrow = &xv[i * d..(i + 1) * d];
                let orow = &mut out[i * m..(i + 1) * m];
                for (k, &xk) in xrow.iter().enumerate() {
                    let wrow = &wv[k * m..(k + 1) * m];
                    for j in 0..m {
                        orow[j] += xk * wrow[j];
                    }
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] += bv[j];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Cross-correlation of `x: [n,c_in,h,w]` with kernels `k:
    /// [c_out,c_in,kh,kw]`, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let (n, cin, h, w) = as_4d(self.value(x), "conv2d input")?;
        let (cout, kcin, kh, kw) = as_4d(self.value(k), "conv2d kernel")?;
        if kcin != cin {
            return Err(shape_err("conv2d", &format!("kernel c_in {cin}"), &format!("{kcin}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
        }
        let (ph, pw) = padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(shape_err(
                "conv2d",
                &format!("kernel {kh}x{kw} to fit padded input"),
                &format!("{}x{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(shape_err("conv2d", &format!("bias [{cout}]"), &format!("{bs:?}")));
            }
        }
        let ho = (h + 2 * ph - kh) / stride.0 + 1;
        let wo = (w + 2 * pw - kw) / stride.1 + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        {
            let xv = self.value(x).data();
            let kv = self.value(k).data();
            for bi in 0..n {
                for oc in 0..cout {
                    let oplane = &mut out[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
                    if let Some(b) = b {
                        let bias = self.nodes[b.0].value.data()[oc];
                        oplane.iter_mut().for_each(|v| *v = bias);
                    }
                    for ic in 0..cin {
                        let xplane = &xv[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                        for u in 0..kh {
                            for v in 0..kw {
                                let kval = kv[((oc * cin + ic) * kh + u) * kw + v];
                                accumulate_taps(
                                    oplane, xplane, kval, h, w, ho, wo, stride, (ph, pw), (u, v),
                                );
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, b, stride, padding }))
    }

    /// Max-feature-map activation: elementwise max over paired channel
    /// halves, `[n,2c,h,w] -> [n,c,h,w]`.
    pub fn max_feature_map(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c2, h, w) = as_4d(self.value(x), "max_feature_map input")?;
        if c2 % 2 != 0 {
            return Err(shape_err("max_feature_map", "even channel count", &format!("{c2}")));
        }
        let c = c2 / 2;
        let plane = h * w;
        let mut out = vec![0.0; n * c * plane];
        {
            let xv = self.value(x).data();
            for bi in 0..n {
                for ci in 0..c {
                    let a = &xv[(bi * c2 + ci) * plane..(bi * c2 + ci + 1) * plane];
                    let b = &xv[(bi * c2 + c + ci) * plane..(bi * c2 + c + ci + 1) * plane];
                    let o = &mut out[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    for i in 0..plane {
                        // ties go to the first half, matching the backward route
                        o[i] = if a[i] >= b[i] { a[i] } else { b[i] };
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::Mfm { x }))
    }

    /// Window-wise maxima over `[n,c,h,w]`, no padding. The gradient routes
    /// to the first maximal element of each window.
    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let (n, c, h, w) = as_4d(self.value(x), "max_pool2d input")?;
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidConfig("max_pool2d kernel/stride must be positive".into()));
        }
        if h < kh || w < kw {
            return Err(shape_err(
                "max_pool2d",
                &format!("input at least {kh}x{kw}"),
                &format!("{h}x{w}"),
            ));
        }
        let ho = (h - kh) / stride.0 + 1;
        let wo = (w - kw) / stride.1 + 1;
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let xv = self.value(x).data();
            for bc in 0..n * c {
                let base = bc * h * w;
                let obase = bc * ho * wo;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for u in 0..kh {
                            let row = base + (i * stride.0 + u) * w + j * stride.1;
                            for v in 0..kw {
                                let val = xv[row + v];
                                if val > best {
                                    best = val;
                                    best_idx = row + v;
                                }
                            }
                        }
                        out[obase + i * wo + j] = best;
                        argmax[obase + i * wo + j] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// Mean over the spatial extent: `[n,c,h,w] -> [n,c]`.
    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = as_4d(self.value(x), "global_mean_pool input")?;
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        {
            let xv = self.value(x).data();
            for (bc, slot) in out.iter_mut().enumerate() {
                let seg = &xv[bc * plane..(bc + 1) * plane];
                *slot = seg.iter().sum::<f64>() / plane as f64;
            }
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalMeanPool { x }))
    }

    /// Max over the spatial extent: `[n,c,h,w] -> [n,c]`, first maximum wins.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = as_4d(self.value(x), "global_max_pool input")?;
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        {
            let xv = self.value(x).data();
            for bc in 0..n * c {
                let seg = &xv[bc * plane..(bc + 1) * plane];
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for (i, &v) in seg.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[bc] = best;
                argmax[bc] = bc * plane + best_i;
            }
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = as_2d(self.value(x), "softmax input")?;
        let mut out = vec![0.0; n * k];
        {
            let xv = self.value(x).data();
            for i in 0..n {
                let row = &xv[i * k..(i + 1) * k];
                softmax_row(row, &mut out[i * k..(i + 1) * k]);
            }
        }
        let value = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, computed in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = as_2d(self.value(logits), "cross_entropy logits")?;
        if n == 0 || labels.is_empty() {
            return Err(Error::EmptyInput("cross_entropy batch"));
        }
        if labels.len() != n {
            return Err(shape_err("cross_entropy", &format!("{n} labels"), &format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("cross_entropy", &format!("labels < {k}"), &format!("{bad}")));
        }
        let mut total = 0.0;
        {
            let zv = self.value(logits).data();
            for (i, &label) in labels.iter().enumerate() {
                let row = &zv[i * k..(i + 1) * k];
                total += log_sum_exp(row) - row[label];
            }
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    /// Knowledge-distillation loss between fixed teacher probabilities
    /// `y_old` and student probabilities at `y_new`, both temperature-scaled,
    /// averaged over the batch. Gradients flow only through `y_new`.
    pub fn lwf_loss(&mut self, y_new: NodeId, y_old: &Tensor, temperature: f64) -> Result<NodeId> {
        let (n, k) = as_2d(self.value(y_new), "lwf_loss student probs")?;
        if y_old.shape() != [n, k] {
            return Err(shape_err("lwf_loss", &format!("teacher probs [{n},{k}]"), &format!("{:?}", y_old.shape())));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig("distillation temperature must be > 0".into()));
        }
        let mut total = 0.0;
        {
            let qv = self.value(y_new).data();
            let mut a = vec![0.0; k];
            let mut q = vec![0.0; k];
            for i in 0..n {
                power_scale_row(&y_old.data()[i * k..(i + 1) * k], temperature, &mut a);
                power_scale_row(&qv[i * k..(i + 1) * k], temperature, &mut q);
                for j in 0..k {
                    total -= a[j] * q[j].max(PROB_FLOOR).ln();
                }
            }
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::Lwf { y_new, y_old: y_old.clone(), temperature },
        ))
    }

    /// Alignment loss between fixed teacher embeddings `emb_old` (one row per
    /// entry of `rows`) and the matching rows of the student embedding node.
    /// Gradients flow only through `emb_new`.
    pub fn psa_loss(
        &mut self,
        emb_new: NodeId,
        emb_old: &Tensor,
        rows: &[usize],
        form: PsaForm,
    ) -> Result<NodeId> {
        let (n, d) = as_2d(self.value(emb_new), "psa_loss student embeddings")?;
        if rows.is_empty() {
            return Err(Error::EmptyInput("psa_loss genuine rows"));
        }
        if emb_old.shape() != [rows.len(), d] {
            return Err(shape_err(
                "psa_loss",
                &format!("teacher embeddings [{},{d}]", rows.len()),
                &format!("{:?}", emb_old.shape()),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("psa_loss", &format!("rows < {n}"), &format!("{bad}")));
        }
        let mean_cos = {
            let ev = self.value(emb_new).data();
            let mut acc = 0.0;
            for (kk, &r) in rows.iter().enumerate() {
                let u = &emb_old.data()[kk * d..(kk + 1) * d];
                let v = &ev[r * d..(r + 1) * d];
                acc += cosine(u, v)?;
            }
            acc / rows.len() as f64
        };
        let value = Tensor::scalar(match form {
            PsaForm::OneMinusCos => 1.0 - mean_cos,
            PsaForm::NegCos => -mean_cos,
            PsaForm::RawCos => mean_cos,
        });
        Ok(self.push(
            value,
            Op::Psa { emb_new, emb_old: emb_old.clone(), rows: rows.to_vec(), form },
        ))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(shape_err(
                "add",
                &format!("{:?}", self.value(a).shape()),
                &format!("{:?}", self.value(b).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec().as_slice(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::Numeric(format!("non-finite scale factor {factor}")));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec().as_slice(), data)?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    /// Scalar `sum(x ⊙ weights)`; handy for reducing any node to a loss.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        if !self.value(x).same_shape(weights) {
            return Err(shape_err(
                "weighted_sum",
                &format!("{:?}", self.value(x).shape()),
                &format!("{:?}", weights.shape()),
            ));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights: weights.clone() }))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients for every reachable node
    /// are stored on the graph and readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(shape_err(
                "backward",
                "scalar loss",
                &format!("{:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// `backward` followed by accumulation of parameter-leaf gradients into
    /// their bound slots. Calling twice without zeroing doubles the grads.
    pub fn backward_params(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        self.backward(loss)?;
        for &(node, slot) in &self.bindings {
            if let Some(g) = self.grads[node.0].as_ref() {
                let target = params.get_mut(slot);
                for (dst, src) in target.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, d) = dims2(self.value(*x));
                let m = self.value(*w).shape()[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gv = g.data();

                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; d * m];
                for i in 0..n {
                    let grow = &gv[i * m..(i + 1) * m];
                    let xrow = &xv[i * d..(i + 1) * d];
                    for kk in 0..d {
                        let wrow = &wv[kk * m..(kk + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += grow[j] * wrow[j];
                            dw[kk * m + j] += xrow[kk] * grow[j];
                        }
                        dx[i * d + kk] += acc;
                    }
                }
                add_grad(grads, *x, Tensor::from_vec(&[n, d], dx).unwrap());
                add_grad(grads, *w, Tensor::from_vec(&[d, m], dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += gv[i * m + j];
                        }
                    }
                    add_grad(grads, *b, Tensor::from_vec(&[m], db).unwrap());
                }
            }
            Op::Conv2d { x, k, b, stride, padding } => {
                let (n, cin, h, w) = dims4(self.value(*x));
                let (cout, _, kh, kw) = dims4(self.value(*k));
                let gshape = g.shape();
                let (ho, wo) = (gshape[2], gshape[3]);
                let xv = self.value(*x).data();
                let kv = self.value(*k).data();
                let gv = g.data();

                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for bi in 0..n {
                    for oc in 0..cout {
                        let gplane = &gv[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
                        for ic in 0..cin {
                            let xplane = &xv[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                            let dxplane_base = (bi * cin + ic) * h * w;
                            for u in 0..kh {
                                for v in 0..kw {
                                    let kidx = ((oc * cin + ic) * kh + u) * kw + v;
                                    let kval = kv[kidx];
                                    let mut kacc = 0.0;
                                    let (jlo, jhi) = tap_range(w, wo, stride.1, padding.1, v);
                                    for i in 0..ho {
                                        let xi = (i * stride.0 + u) as isize - padding.0 as isize;
                                        if xi < 0 || xi as usize >= h {
                                            continue;
                                        }
                                        let xrow = xi as usize * w;
                                        let grow = i * wo;
                                        for j in jlo..jhi {
                                            let xj = j * stride.1 + v - padding.1;
                                            let gval = gplane[grow + j];
                                            kacc += gval * xplane[xrow + xj];
                                            dx[dxplane_base + xrow + xj] += gval * kval;
                                        }
                                    }
                                    dk[kidx] += kacc;
                                }
                            }
                        }
                    }
                }
                add_grad(grads, *x, Tensor::from_vec(&[n, cin, h, w], dx).unwrap());
                add_grad(grads, *k, Tensor::from_vec(self.value(*k).shape().to_vec().as_slice(), dk).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for bi in 0..n {
                        for oc in 0..cout {
                            db[oc] += gv
                                [(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    add_grad(grads, *b, Tensor::from_vec(&[cout], db).unwrap());
                }
            }
            Op::Mfm { x } => {
                let (n, c2, h, w) = dims4(self.value(*x));
                let c = c2 / 2;
                let plane = h * w;
                let xv = self.value(*x).data();
                let gv = g.data();
                let mut dx = vec![0.0; xv.len()];
                for bi in 0..n {
                    for ci in 0..c {
                        let ia = (bi * c2 + ci) * plane;
                        let ib = (bi * c2 + c + ci) * plane;
                        let ig = (bi * c + ci) * plane;
                        for i in 0..plane {
                            if xv[ia + i] >= xv[ib + i] {
                                dx[ia + i] += gv[ig + i];
                            } else {
                                dx[ib + i] += gv[ig + i];
                            }
                        }
                    }
                }
                add_grad(grads, *x, Tensor::from_vec(&[n, c2, h, w], dx).unwrap());
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g.data()[o];
                }
                add_grad(
                    grads,
                    *x,
                    Tensor::from_vec(self.value(*x).shape().to_vec().as_slice(), dx).unwrap(),
                );
            }
            Op::GlobalMeanPool { x } => {
                let (n, c, h, w) = dims4(self.value(*x));
                let plane = h * w;
                let scale = 1.0 / plane as f64;
                let mut dx = vec![0.0; n * c * plane];
                for bc in 0..n * c {
                    let gval = g.data()[bc] * scale;
                    dx[bc * plane..(bc + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = gval);
                }
                add_grad(grads, *x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g.data()[o];
                }
                add_grad(
                    grads,
                    *x,
                    Tensor::from_vec(self.value(*x).shape().to_vec().as_slice(), dx).unwrap(),
                );
            }
            Op::Softmax { x } => {
                let (n, k) = dims2(self.value(*x));
                let yv = self.nodes[idx].value.data();
                let gv = g.data();
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let y = &yv[i * k..(i + 1) * k];
                    let gr = &gv[i * k..(i + 1) * k];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[i * k + j] = y[j] * (gr[j] - dot);
                    }
                }
                add_grad(grads, *x, Tensor::from_vec(&[n, k], dx).unwrap());
            }
            Op::CrossEntropy { logits, labels } => {
                let (n, k) = dims2(self.value(*logits));
                let zv = self.value(*logits).data();
                let gscale = g.item() / n as f64;
                let mut dz = vec![0.0; n * k];
                let mut probs = vec![0.0; k];
                for (i, &label) in labels.iter().enumerate() {
                    softmax_row(&zv[i * k..(i + 1) * k], &mut probs);
                    for j in 0..k {
                        let ind = if j == label { 1.0 } else { 0.0 };
                        dz[i * k + j] = (probs[j] - ind) * gscale;
                    }
                }
                add_grad(grads, *logits, Tensor::from_vec(&[n, k], dz).unwrap());
            }
            Op::Lwf { y_new, y_old, temperature } => {
                let (n, k) = dims2(self.value(*y_new));
                let qv = self.value(*y_new).data();
                let gscale = g.item() / n as f64;
                let mut dq = vec![0.0; n * k];
                let mut a = vec![0.0; k];
                let mut q = vec![0.0; k];
                for i in 0..n {
                    power_scale_row(&y_old.data()[i * k..(i + 1) * k], *temperature, &mut a);
                    power_scale_row(&qv[i * k..(i + 1) * k], *temperature, &mut q);
                    for j in 0..k {
                        let p = qv[i * k + j];
                        if p > PROB_FLOOR {
                            dq[i * k + j] = (q[j] - a[j]) / (*temperature * p) * gscale;
                        }
                    }
                }
                add_grad(grads, *y_new, Tensor::from_vec(&[n, k], dq).unwrap());
            }
            Op::Psa { emb_new, emb_old, rows, form } => {
                let (n, d) = dims2(self.value(*emb_new));
                let ev = self.value(*emb_new).data();
                let sign = match form {
                    PsaForm::OneMinusCos | PsaForm::NegCos => -1.0,
                    PsaForm::RawCos => 1.0,
                };
                let gscale = g.item() * sign / rows.len() as f64;
                let mut de = vec![0.0; n * d];
                for (kk, &r) in rows.iter().enumerate() {
                    let u = &emb_old.data()[kk * d..(kk + 1) * d];
                    let v = &ev[r * d..(r + 1) * d];
                    let nu = norm(u);
                    let nv = norm(v);
                    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                    let cosv = dot / (nu * nv);
                    for j in 0..d {
                        de[r * d + j] += gscale * (u[j] / (nu * nv) - cosv * v[j] / (nv * nv));
                    }
                }
                add_grad(grads, *emb_new, Tensor::from_vec(&[n, d], de).unwrap());
            }
            Op::Add { a, b } => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Scale { x, factor } => {
                let data: Vec<f64> = g.data().iter().map(|v| v * factor).collect();
                add_grad(
                    grads,
                    *x,
                    Tensor::from_vec(g.shape().to_vec().as_slice(), data).unwrap(),
                );
            }
            Op::WeightedSum { x, weights } => {
                let gval = g.item();
                let data: Vec<f64> = weights.data().iter().map(|w| w * gval).collect();
                add_grad(
                    grads,
                    *x,
                    Tensor::from_vec(weights.shape().to_vec().as_slice(), data).unwrap(),
                );
            }
        }
    }
}

// ----- shared numeric helpers ----------------------------------------------

/// Stable row softmax into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Temperature scaling of a probability row: `p_i^{1/T}` renormalized, with
/// the probability floor applied before the power.
pub(crate) fn power_scale_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let inv_t = 1.0 / temperature;
    let mut sum = 0.0;
    for (o, &p) in out.iter_mut().zip(row) {
        *o = p.max(PROB_FLOOR).powf(inv_t);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("zero-norm embedding in psa_loss".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Valid output-column range for a conv tap at kernel column `v`.
fn tap_range(w: usize, wo: usize, stride: usize, padding: usize, v: usize) -> (usize, usize) {
    let lo = if v >= padding {
        0
    } else {
        (padding - v).div_ceil(stride)
    };
    let hi_excl = if w + padding > v {
        (((w + padding - v - 1) / stride) + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_taps(
    oplane: &mut [f64],
    xplane: &[f64],
    kval: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    tap: (usize, usize),
) {
    let (u, v) = tap;
    let (jlo, jhi) = tap_range(w, wo, stride.1, padding.1, v);
    for i in 0..ho {
        let xi = (i * stride.0 + u) as isize - padding.0 as isize;
        if xi < 0 || xi as usize >= h {
            continue;
        }
        let xrow = xi as usize * w;
        let orow = i * wo;
        if stride.1 == 1 && v >= padding.1 {
            // contiguous fast path
            let off = xrow + v - padding.1;
            let n = jhi - jlo;
            let xs = &xplane[off + jlo..off + jlo + n];
            let os = &mut oplane[orow + jlo..orow + jlo + n];
            for (o, &xv) in os.iter_mut().zip(xs) {
                *o += kval * xv;
            }
        } else {
            for j in jlo..jhi {
                let xj = j * stride.1 + v - padding.1;
                oplane[orow + j] += kval * xplane[xrow + xj];
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], node: NodeId, contribution: Tensor) {
    match &mut grads[node.0] {
        Some(existing) => {
            for (dst, src) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn as_2d(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(shape_err(context, "2-d tensor", &format!("{other:?}"))),
    }
}

fn as_4d(t: &Tensor, context: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(shape_err(context, "4-d tensor", &format!("{other:?}"))),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

fn shape_err(context: &'static str, expected: &str, got: &str) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
