//! Dynamic tape: forward operations record themselves, backward replays the
//! records in reverse. A graph lives for one forward/backward pair and is
//! rebuilt from scratch on the next forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::{ensure_finite, Tensor};

/// Handle to a value recorded on one [`Graph`]. Only meaningful for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub usize);

#[derive(Debug, Clone)]
enum Record {
    Leaf,
    Conv2d { x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize },
    Linear { x: ValueId, w: ValueId, b: ValueId },
    Relu { x: ValueId },
    Mul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Scale { x: ValueId, factor: f64 },
    Concat { parts: Vec<ValueId>, axis: usize },
    SumAll { x: ValueId },
    SumSpatial { x: ValueId },
    MaxN { parts: Vec<ValueId> },
    SoftmaxVec { x: ValueId },
    SpatialSoftmax { x: ValueId },
    CrossEntropy { probs: ValueId, label: usize },
    Reshape { x: ValueId },
}

/// Reverse-mode tape over dense f64 buffers.
#[derive(Debug, Default)]
pub struct Graph {
    shapes: Vec<Vec<usize>>,
    datas: Vec<Vec<f64>>,
    records: Vec<Record>,
    grads: Vec<Vec<f64>>,
    param_bindings: Vec<(ParamId, ValueId)>,
    param_lookup: BTreeMap<usize, ValueId>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, record: Record) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ValueId(self.datas.len());
        self.shapes.push(shape);
        self.datas.push(data);
        self.records.push(record);
        id
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.datas[id.0]
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.datas[id.0][0]
    }

    pub fn numel(&self, id: ValueId) -> usize {
        self.datas[id.0].len()
    }

    /// Copies a value out of the tape as a standalone tensor.
    pub fn tensor(&self, id: ValueId) -> Tensor {
        Tensor {
            shape: self.shapes[id.0].clone(),
            data: self.datas[id.0].clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Gradient of the last `backward` call with respect to `id`.
    pub fn grad(&self, id: ValueId) -> Result<&[f64]> {
        if !self.consumed {
            return Err(Error::invalid_state(
                "gradients are not available before backward",
            ));
        }
        Ok(&self.grads[id.0])
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid_argument(format!(
                "leaf shape {shape:?} does not match buffer of {}",
                data.len()
            )));
        }
        ensure_finite(&data, "leaf")?;
        Ok(self.push(shape, data, Record::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Result<ValueId> {
        self.leaf(t.shape.clone(), t.data.clone())
    }

    /// Binds a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<ValueId> {
        if let Some(&vid) = self.param_lookup.get(&id.0) {
            return Ok(vid);
        }
        let t = store.get(id);
        let vid = self.leaf(t.shape.clone(), t.data.clone())?;
        self.param_bindings.push((id, vid));
        self.param_lookup.insert(id.0, vid);
        Ok(vid)
    }

    /// Adds the gradients of every bound parameter into the store's gradient
    /// buffers. Call after `backward`; accumulates across calls.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.consumed {
            return Err(Error::invalid_state(
                "cannot accumulate parameter gradients before backward",
            ));
        }
        for &(pid, vid) in &self.param_bindings {
            store.get_mut(pid).add_to_grad(&self.grads[vid.0]);
        }
        Ok(())
    }

    // ── forward operations ──────────────────────────────────────────────

    /// 2-D convolution over NCHW input with OIHW weights and per-channel bias.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        if stride == 0 {
            return Err(Error::invalid_argument("conv2d: stride must be positive"));
        }
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 4 {
            return Err(Error::invalid_argument(format!(
                "conv2d: input must be 4-d NCHW, got shape {xs:?}"
            )));
        }
        if ws.len() != 4 {
            return Err(Error::invalid_argument(format!(
                "conv2d: weight must be 4-d OIHW, got shape {ws:?}"
            )));
        }
        let (n, ic, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, wic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wic != ic {
            return Err(Error::invalid_argument(format!(
                "conv2d: weight input channels {wic} do not match input channels {ic}"
            )));
        }
        if bs != [oc] {
            return Err(Error::invalid_argument(format!(
                "conv2d: bias shape {bs:?} does not match output channels {oc}"
            )));
        }
        if ih + 2 * pad < kh || iw + 2 * pad < kw {
            return Err(Error::invalid_argument(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {}x{}",
                ih + 2 * pad,
                iw + 2 * pad
            )));
        }
        let oh = (ih + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;

        let xd = &self.datas[x.0];
        let wd = &self.datas[w.0];
        let bd = &self.datas[b.0];
        let mut out = vec![0.0; n * oc * oh * ow];
        for ni in 0..n {
            for oci in 0..oc {
                let obase = ((ni * oc) + oci) * oh * ow;
                out[obase..obase + oh * ow].fill(bd[oci]);
                for ici in 0..ic {
                    let xbase = ((ni * ic) + ici) * ih * iw;
                    let wbase = ((oci * ic) + ici) * kh * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_range(ky, pad, stride, ih, oh);
                        for kx in 0..kw {
                            let wv = wd[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = valid_range(kx, pad, stride, iw, ow);
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let xrow = xbase + iy * iw;
                                let orow = obase + oy * ow;
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    out[orow + ox] += wv * xd[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        ensure_finite(&out, "conv2d forward")?;
        Ok(self.push(
            vec![n, oc, oh, ow],
            out,
            Record::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Affine map: input N×D, weight K×D, bias K → output N×K.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::invalid_argument(format!(
                "linear: expected 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        let (k, wd_) = (ws[0], ws[1]);
        if wd_ != d {
            return Err(Error::invalid_argument(format!(
                "linear: weight inner dimension {wd_} does not match input features {d}"
            )));
        }
        if bs != [k] {
            return Err(Error::invalid_argument(format!(
                "linear: bias shape {bs:?} does not match output features {k}"
            )));
        }
        let xd = &self.datas[x.0];
        let wd = &self.datas[w.0];
        let bd = &self.datas[b.0];
        let mut out = vec![0.0; n * k];
        for ni in 0..n {
            for ki in 0..k {
                let mut acc = bd[ki];
                let xrow = ni * d;
                let wrow = ki * d;
                for di in 0..d {
                    acc += xd[xrow + di] * wd[wrow + di];
                }
                out[ni * k + ki] = acc;
            }
        }
        ensure_finite(&out, "linear forward")?;
        Ok(self.push(vec![n, k], out, Record::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<f64> = self.datas[x.0].iter().map(|&v| v.max(0.0)).collect();
        ensure_finite(&out, "relu forward")?;
        Ok(self.push(self.shapes[x.0].clone(), out, Record::Relu { x }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("elementwise mul", a, b)?;
        let out: Vec<f64> = self.datas[a.0]
            .iter()
            .zip(&self.datas[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        ensure_finite(&out, "mul forward")?;
        Ok(self.push(self.shapes[a.0].clone(), out, Record::Mul { a, b }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("elementwise add", a, b)?;
        let out: Vec<f64> = self.datas[a.0]
            .iter()
            .zip(&self.datas[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        ensure_finite(&out, "add forward")?;
        Ok(self.push(self.shapes[a.0].clone(), out, Record::Add { a, b }))
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let out: Vec<f64> = self.datas[x.0].iter().map(|&v| v * factor).collect();
        ensure_finite(&out, "scale forward")?;
        Ok(self.push(self.shapes[x.0].clone(), out, Record::Scale { x, factor }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::invalid_argument("concat: empty operand list"));
        }
        let first = self.shapes[parts[0].0].clone();
        if axis >= first.len() {
            return Err(Error::invalid_argument(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.shapes[p.0];
            if s.len() != first.len() {
                return Err(Error::invalid_argument(format!(
                    "concat: rank mismatch {s:?} vs {first:?}"
                )));
            }
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::invalid_argument(format!(
                        "concat: dimension {d} disagrees ({a} vs {b})"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let pa = self.shapes[p.0][axis];
            let pd = &self.datas[p.0];
            for o in 0..outer {
                let src = o * pa * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + pa * inner].copy_from_slice(&pd[src..src + pa * inner]);
            }
            offset += pa;
        }
        Ok(self.push(shape, out, Record::Concat { parts: parts.to_vec(), axis }))
    }

    /// Sum of every element, as a scalar (shape `[1]`).
    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.datas[x.0].iter().sum();
        ensure_finite(std::slice::from_ref(&s), "sum_all forward")?;
        Ok(self.push(vec![1], vec![s], Record::SumAll { x }))
    }

    /// Per-channel sum over the spatial extent of a C×H×W tensor.
    pub fn sum_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::invalid_argument(format!(
                "sum_spatial: expected C×H×W input, got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xd = &self.datas[x.0];
        let out: Vec<f64> = (0..c).map(|ci| xd[ci * hw..(ci + 1) * hw].iter().sum()).collect();
        ensure_finite(&out, "sum_spatial forward")?;
        Ok(self.push(vec![c], out, Record::SumSpatial { x }))
    }

    /// Element-wise maximum over one or more same-shape tensors. Gradient
    /// routes to the arg-max operand; ties go to the earliest operand.
    pub fn max_elementwise(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::invalid_argument(
                "max_elementwise: empty operand list",
            ));
        }
        for &p in &parts[1..] {
            self.check_same_shape("max_elementwise", parts[0], p)?;
        }
        let len = self.datas[parts[0].0].len();
        let mut out = self.datas[parts[0].0].clone();
        for &p in &parts[1..] {
            let pd = &self.datas[p.0];
            for i in 0..len {
                if pd[i] > out[i] {
                    out[i] = pd[i];
                }
            }
        }
        Ok(self.push(
            self.shapes[parts[0].0].clone(),
            out,
            Record::MaxN { parts: parts.to_vec() },
        ))
    }

    /// Numerically stable softmax over a 1-d logit vector.
    pub fn softmax_vector(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 1 {
            return Err(Error::invalid_argument(format!(
                "softmax_vector: expected 1-d logits, got {xs:?}"
            )));
        }
        let out = stable_softmax(&self.datas[x.0]);
        ensure_finite(&out, "softmax_vector forward")?;
        Ok(self.push(xs.to_vec(), out, Record::SoftmaxVec { x }))
    }

    /// Softmax over the spatial positions of each class slice of an L×H×W
    /// stack; every slice of the result sums to 1.
    pub fn spatial_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::invalid_argument(format!(
                "spatial_softmax: expected L×H×W input, got {xs:?}"
            )));
        }
        let (l, hw) = (xs[0], xs[1] * xs[2]);
        let xd = &self.datas[x.0];
        let mut out = vec![0.0; l * hw];
        for li in 0..l {
            let slice = &xd[li * hw..(li + 1) * hw];
            out[li * hw..(li + 1) * hw].copy_from_slice(&stable_softmax(slice));
        }
        ensure_finite(&out, "spatial_softmax forward")?;
        Ok(self.push(xs.to_vec(), out, Record::SpatialSoftmax { x }))
    }

    /// Negative log-likelihood of `label` under a probability vector.
    pub fn cross_entropy(&mut self, probs: ValueId, label: usize) -> Result<ValueId> {
        let ps = self.shape(probs);
        if ps.len() != 1 {
            return Err(Error::invalid_argument(format!(
                "cross_entropy: expected 1-d probabilities, got {ps:?}"
            )));
        }
        if label >= ps[0] {
            return Err(Error::invalid_argument(format!(
                "cross_entropy: label {label} out of range for {} classes",
                ps[0]
            )));
        }
        let loss = -self.datas[probs.0][label].ln();
        ensure_finite(std::slice::from_ref(&loss), "cross_entropy forward")?;
        Ok(self.push(vec![1], vec![loss], Record::CrossEntropy { probs, label }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.datas[x.0].len() {
            return Err(Error::invalid_argument(format!(
                "reshape: target {shape:?} does not match {} elements",
                self.datas[x.0].len()
            )));
        }
        let data = self.datas[x.0].clone();
        Ok(self.push(shape, data, Record::Reshape { x }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every value
    /// the loss depends on. A graph supports exactly one backward call.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(Error::invalid_state(
                "backward already ran on this graph; rebuild the tape with a new forward pass",
            ));
        }
        if self.numel(loss) != 1 {
            return Err(Error::invalid_argument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if matches!(self.records[loss.0], Record::Leaf) {
            return Err(Error::invalid_state(
                "backward: value has no recorded graph",
            ));
        }
        self.consumed = true;
        self.grads = self.datas.iter().map(|d| vec![0.0; d.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let go = std::mem::take(&mut self.grads[i]);
            let record = self.records[i].clone();
            self.apply_backward(&record, i, &go);
            self.grads[i] = go;
        }

        for (i, g) in self.grads.iter().enumerate() {
            ensure_finite(g, &format!("backward gradient of value {i}"))?;
        }
        Ok(())
    }

    fn apply_backward(&mut self, record: &Record, out_id: usize, go: &[f64]) {
        match record {
            Record::Leaf => {}
            Record::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, out_id, go);
            }
            Record::Linear { x, w, b } => {
                let (n, d) = {
                    let s = &self.shapes[x.0];
                    (s[0], s[1])
                };
                let k = self.shapes[w.0][0];
                // dx = go @ w ; dw = goᵀ @ x ; db = column sums of go
                for ni in 0..n {
                    for ki in 0..k {
                        let g = go[ni * k + ki];
                        if g == 0.0 {
                            continue;
                        }
                        self.grads[b.0][ki] += g;
                        for di in 0..d {
                            let xv = self.datas[x.0][ni * d + di];
                            let wv = self.datas[w.0][ki * d + di];
                            self.grads[x.0][ni * d + di] += g * wv;
                            self.grads[w.0][ki * d + di] += g * xv;
                        }
                    }
                }
            }
            Record::Relu { x } => {
                for (i, &g) in go.iter().enumerate() {
                    if self.datas[x.0][i] > 0.0 {
                        self.grads[x.0][i] += g;
                    }
                }
            }
            Record::Mul { a, b } => {
                for (i, &g) in go.iter().enumerate() {
                    let av = self.datas[a.0][i];
                    let bv = self.datas[b.0][i];
                    self.grads[a.0][i] += g * bv;
                    self.grads[b.0][i] += g * av;
                }
            }
            Record::Add { a, b } => {
                for (i, &g) in go.iter().enumerate() {
                    self.grads[a.0][i] += g;
                    self.grads[b.0][i] += g;
                }
            }
            Record::Scale { x, factor } => {
                for (i, &g) in go.iter().enumerate() {
                    self.grads[x.0][i] += g * factor;
                }
            }
            Record::Concat { parts, axis } => {
                let shape = &self.shapes[out_id];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let axis_total = shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let pa = self.shapes[p.0][*axis];
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * pa * inner;
                        for j in 0..pa * inner {
                            self.grads[p.0][dst + j] += go[src + j];
                        }
                    }
                    offset += pa;
                }
            }
            Record::SumAll { x } => {
                let g = go[0];
                for v in self.grads[x.0].iter_mut() {
                    *v += g;
                }
            }
            Record::SumSpatial { x } => {
                let s = &self.shapes[x.0];
                let hw = s[1] * s[2];
                for (ci, &g) in go.iter().enumerate() {
                    for v in self.grads[x.0][ci * hw..(ci + 1) * hw].iter_mut() {
                        *v += g;
                    }
                }
            }
            Record::MaxN { parts } => {
                // Route each element's gradient to the first operand that
                // attains the recorded maximum.
                let out = &self.datas[out_id];
                for (i, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for &p in parts {
                        if self.datas[p.0][i] == out[i] {
                            self.grads[p.0][i] += g;
                            break;
                        }
                    }
                }
            }
            Record::SoftmaxVec { x } => {
                let y = &self.datas[out_id];
                let dot: f64 = go.iter().zip(y).map(|(&g, &p)| g * p).sum();
                for (i, &g) in go.iter().enumerate() {
                    self.grads[x.0][i] += y[i] * (g - dot);
                }
            }
            Record::SpatialSoftmax { x } => {
                let s = &self.shapes[out_id];
                let hw = s[1] * s[2];
                for li in 0..s[0] {
                    let y = &self.datas[out_id][li * hw..(li + 1) * hw];
                    let gs = &go[li * hw..(li + 1) * hw];
                    let dot: f64 = gs.iter().zip(y).map(|(&g, &p)| g * p).sum();
                    for j in 0..hw {
                        self.grads[x.0][li * hw + j] += y[j] * (gs[j] - dot);
                    }
                }
            }
            Record::CrossEntropy { probs, label } => {
                let p = self.datas[probs.0][*label];
                self.grads[probs.0][*label] += go[0] * (-1.0 / p);
            }
            Record::Reshape { x } => {
                for (i, &g) in go.iter().enumerate() {
                    self.grads[x.0][i] += g;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
        out_id: usize,
        go: &[f64],
    ) {
        let (n, ic, ih, iw) = {
            let s = &self.shapes[x.0];
            (s[0], s[1], s[2], s[3])
        };
        let (oc, _, kh, kw) = {
            let s = &self.shapes[w.0];
            (s[0], s[1], s[2], s[3])
        };
        let (oh, ow) = {
            let s = &self.shapes[out_id];
            (s[2], s[3])
        };
        for ni in 0..n {
            for oci in 0..oc {
                let obase = ((ni * oc) + oci) * oh * ow;
                let mut db = 0.0;
                for &g in &go[obase..obase + oh * ow] {
                    db += g;
                }
                self.grads[b.0][oci] += db;
                for ici in 0..ic {
                    let xbase = ((ni * ic) + ici) * ih * iw;
                    let wbase = ((oci * ic) + ici) * kh * kw;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_range(ky, pad, stride, ih, oh);
                        for kx in 0..kw {
                            let wv = self.datas[w.0][wbase + ky * kw + kx];
                            let (ox_lo, ox_hi) = valid_range(kx, pad, stride, iw, ow);
                            let mut dw = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let xrow = xbase + iy * iw;
                                let orow = obase + oy * ow;
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    let g = go[orow + ox];
                                    dw += g * self.datas[x.0][xrow + ix];
                                    self.grads[x.0][xrow + ix] += g * wv;
                                }
                            }
                            self.grads[w.0][wbase + ky * kw + kx] += dw;
                        }
                    }
                }
            }
        }
    }

    fn check_same_shape(&self, op: &str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::invalid_argument(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(())
    }
}

/// Range of output coordinates whose source index lands inside the input for
/// a given kernel offset. Returns `(lo, hi_exclusive)`; empty when `hi <= lo`.
fn valid_range(k: usize, pad: usize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad <= in_extent - 1
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi_inc = (in_extent - 1 + pad).checked_sub(k).map(|v| v / stride);
    match hi_inc {
        Some(h) => (lo.min(out_extent), (h + 1).min(out_extent)),
        None => (0, 0),
    }
}


fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> ValueId {
        g.leaf(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scaling_identity() {
        // 1×1×3×3 ones through a 1×1 kernel holding [2] doubles every pixel.
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 3, 3], &[1.0; 9]);
        let w = leaf(&mut g, &[1, 1, 1, 1], &[2.0]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_one_by_one_kernel_sums_channels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..32).map(|i| (i as f64) * 0.17 - 2.0).collect();
        let x = leaf(&mut g, &[1, 2, 4, 4], &data);
        let w = leaf(&mut g, &[1, 2, 1, 1], &[1.0, 1.0]);
        let b = leaf(&mut g, &[1], &[0.0]);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        for i in 0..16 {
            let expect = data[i] + data[16 + i];
            assert!((g.value(y)[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_linearity_without_bias() {
        let mut rng = 0x12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        };
        let xv: Vec<f64> = (0..25).map(|_| next()).collect();
        let wv: Vec<f64> = (0..9).map(|_| next()).collect();
        let a = 3.7;
        let run = |input: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(vec![1, 1, 5, 5], input.to_vec()).unwrap();
            let w = g.leaf(vec![1, 1, 3, 3], wv.clone()).unwrap();
            let b = g.leaf(vec![1], vec![0.0]).unwrap();
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            g.value(y).to_vec()
        };
        let base = run(&xv);
        let scaled_in: Vec<f64> = xv.iter().map(|&v| v * a).collect();
        let scaled = run(&scaled_in);
        for (s, bse) in scaled.iter().zip(&base) {
            assert!((s - a * bse).abs() <= 1e-12 * (1.0 + bse.abs()));
        }
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 3, 4, 4], &[0.0; 48]);
        let w = leaf(&mut g, &[2, 2, 3, 3], &[0.0; 36]);
        let b = leaf(&mut g, &[2], &[0.0; 2]);
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "got: {msg}");
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = leaf(&mut g, &[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero_b = leaf(&mut g, &[3], &[0.0; 3]);
        let y = g.linear(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let zero_w = leaf(&mut g, &[4, 3], &[0.0; 12]);
        let bias = leaf(&mut g, &[4], &[0.5, -1.0, 2.0, 7.0]);
        let y = g.linear(x, zero_w, bias).unwrap();
        assert_eq!(&g.value(y)[..4], &[0.5, -1.0, 2.0, 7.0]);
        assert_eq!(&g.value(y)[4..], &[0.5, -1.0, 2.0, 7.0]);
    }

    #[test]
    fn linear_matches_hand_matrix_multiply() {
        // Oracle: naive triple loop written straight from the definition.
        let xv = [0.3, -1.2, 2.2, 0.7, 0.1, -0.4];
        let wv = [
            0.5, -0.25, 1.0, 2.0, 0.125, -1.5, 0.75, 0.0, -0.5, 1.25, -2.0, 0.375,
        ];
        let bv = [0.1, -0.2, 0.3, -0.4];
        let mut oracle = [0.0f64; 8];
        for n in 0..2 {
            for k in 0..4 {
                let mut acc = bv[k];
                for d in 0..3 {
                    acc += xv[n * 3 + d] * wv[k * 3 + d];
                }
                oracle[n * 4 + k] = acc;
            }
        }
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &xv);
        let w = leaf(&mut g, &[4, 3], &wv);
        let b = leaf(&mut g, &[4], &bv);
        let y = g.linear(x, w, b).unwrap();
        for (got, want) in g.value(y).iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_and_max_elementwise() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[-1.0, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);

        let a = leaf(&mut g, &[2], &[1.0, 5.0]);
        let b = leaf(&mut g, &[2], &[3.0, 2.0]);
        let m = g.max_elementwise(&[a, b]).unwrap();
        assert_eq!(g.value(m), &[3.0, 5.0]);

        assert!(g.max_elementwise(&[]).is_err());
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[5], &[0.7; 5]);
        let y = g.softmax_vector(x).unwrap();
        for &p in g.value(y) {
            assert!((p - 0.2).abs() < 1e-12);
        }
        let sum: f64 = g.value(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        let x = leaf(&mut g, &[3], &[1000.0, 0.0, -5.0]);
        let y = g.softmax_vector(x).unwrap();
        assert!(g.value(y)[0] > 0.999);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_label_bounds() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[5], &[0.2; 5]);
        assert!(g.cross_entropy(p, 5).is_err());
        let l = g.cross_entropy(p, 2).unwrap();
        assert!((g.scalar_value(l) - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spatial_softmax_uniform_and_concentrated() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 14, 14], &[0.0; 2 * 196]);
        let y = g.spatial_softmax(x).unwrap();
        for &p in g.value(y) {
            assert!((p - 1.0 / 196.0).abs() < 1e-15);
        }

        let mut logits = vec![0.0; 196];
        logits[37] = 50.0;
        let mut both = logits.clone();
        both.extend_from_slice(&logits);
        let x = leaf(&mut g, &[2, 14, 14], &both);
        let y = g.spatial_softmax(x).unwrap();
        assert!(g.value(y)[37] > 0.999);
        let slice_sum: f64 = g.value(y)[..196].iter().sum();
        assert!((slice_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_is_one() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[1], &[4.2]);
        let loss = g.sum_all(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_twice_is_invalid_state() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[2], &[1.0, 2.0]);
        let loss = g.sum_all(p).unwrap();
        g.backward(loss).unwrap();
        let err = g.backward(loss).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn backward_on_leaf_is_invalid_state() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[1], &[1.0]);
        let err = g.backward(p).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn backward_on_non_scalar_is_invalid_argument() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[2], &[1.0, 2.0]);
        let y = g.relu(p).unwrap();
        assert!(matches!(g.backward(y), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn max_tie_breaks_to_earliest_operand() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[1.0, 7.0]);
        let b = leaf(&mut g, &[2], &[1.0, 3.0]);
        let m = g.max_elementwise(&[a, b]).unwrap();
        let loss = g.sum_all(m).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[1.0, 2.0]);
        let b = leaf(&mut g, &[3], &[3.0, 4.0, 5.0]);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = g.scale(c, 2.0).unwrap();
        let loss = g.sum_all(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_rejects_mismatched_dims() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 2], &[0.0; 4]);
        let b = leaf(&mut g, &[3, 3], &[0.0; 9]);
        let err = g.concat(&[a, b], 0).unwrap_err();
        assert!(err.to_string().contains("dimension 1"));
    }

    #[test]
    fn shared_parameter_binds_once_and_accumulates() {
        let mut store = ParamStore::new();
        let pid = store
            .add("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, pid).unwrap();
        let w2 = g.param(&store, pid).unwrap();
        assert_eq!(w1, w2);
        let y = g.add(w1, w2).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store).unwrap();
        // d(w + w)/dw = 2 per element
        assert_eq!(store.get(pid).grad.as_ref().unwrap(), &vec![2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .leaf(vec![1, 1, 6, 6], (0..36).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let w = g
                .leaf(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64).cos()).collect())
                .unwrap();
            let b = g.leaf(vec![2], vec![0.1, -0.1]).unwrap();
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let r = g.relu(y).unwrap();
            let l = g.sum_all(r).unwrap();
            g.scalar_value(l).to_bits()
        };
        assert_eq!(run(), run());
    }
}
