use super::kernels::{self, ConvGeom, DiceSums, Padding};
use super::Tensor;
use crate::error::{config_err, contract_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, padding: Padding },
    MaxPool { input: Var, argmax: Vec<usize> },
    Bilinear { input: Var },
    RmsNorm { input: Var, gain: Var, inv_rms: Vec<f64> },
    Softmax { input: Var, axis: usize },
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    ChannelDot { input: Var, query: Var },
    RmsQuery { input: Var, gain: Var, query: Var, inv_rms: Vec<f64>, dot: Vec<f64> },
    WeightedSum { values: Var, weights: Var, entries: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftDice { logits: Var, labels: Vec<usize>, probs: Vec<f64>, sums: DiceSums, smooth: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of one forward pass.
///
/// Values are immutable once recorded. [`Tape::backward`] may run exactly
/// once; afterwards the tape only answers gradient queries.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// A copy of `v` that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.value(v).clone();
        t.requires_grad = false;
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        self.value(v).dims4()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backpropagated loss with respect to `v`, if `v`
    /// participates in the graph and requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = self.any_grad(parents);
        let value = Tensor::new(shape, data).expect("kernel produced a buffer matching its shape");
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        Ok(self.derived(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        Ok(self.derived(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        self.derived(self.shape(a).to_vec(), data, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.derived(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape(a)));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.derived(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// 2-D convolution of a `[B, C_in, H, W]` map with `[C_out, C_in, k, k]`
    /// weights, `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let in_dims = self.dims4(input)?;
        let [oc, ic, kh, kw] = match self.shape(weight) {
            &[a, b, c, d] => [a, b, c, d],
            other => return Err(shape_err!("conv weights must be 4-D, got {other:?}")),
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(config_err!("unsupported conv kernel {kh}x{kw}; expected 1x1 or 3x3"));
        }
        if ic != in_dims[1] {
            return Err(shape_err!("conv expects {ic} input channels, feature map has {}", in_dims[1]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [oc] {
                return Err(shape_err!("conv bias shape {:?}, expected [{oc}]", self.shape(b)));
            }
        }
        if padding == Padding::None && (in_dims[2] < kh || in_dims[3] < kw) {
            return Err(shape_err!("input {:?} smaller than unpadded kernel {kh}x{kw}", in_dims));
        }
        let g = ConvGeom::new(in_dims, oc, kh, padding);
        let data = kernels::conv2d_forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.derived(vec![in_dims[0], oc, g.oh, g.ow], data, Op::Conv2d { input, weight, bias, padding }, &parents))
    }

    /// Adaptive max pooling to `(th, tw)`; the target may not exceed the input.
    pub fn adaptive_max_pool(&mut self, input: Var, th: usize, tw: usize) -> Result<Var> {
        let dims = self.dims4(input)?;
        if th == 0 || tw == 0 || th > dims[2] || tw > dims[3] {
            return Err(contract_err!(
                "adaptive max pool target {th}x{tw} must lie within input {}x{}; use bilinear_resize to upsample",
                dims[2],
                dims[3]
            ));
        }
        let (data, argmax) = kernels::adaptive_max_pool_forward(dims, self.value(input).data(), th, tw);
        Ok(self.derived(vec![dims[0], dims[1], th, tw], data, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Half-pixel-center bilinear resampling with edge clamping.
    pub fn bilinear_resize(&mut self, input: Var, th: usize, tw: usize) -> Result<Var> {
        let dims = self.dims4(input)?;
        if th == 0 || tw == 0 {
            return Err(shape_err!("bilinear target {th}x{tw} must be positive"));
        }
        let data = kernels::bilinear_forward(dims, self.value(input).data(), th, tw);
        Ok(self.derived(vec![dims[0], dims[1], th, tw], data, Op::Bilinear { input }, &[input]))
    }

    /// `x / sqrt(mean_c x² + eps) · gain`, independently at each position.
    pub fn rmsnorm_channels(&mut self, input: Var, gain: Var, eps: f64) -> Result<Var> {
        let dims = self.dims4(input)?;
        if self.shape(gain) != [dims[1]] {
            return Err(shape_err!("rmsnorm gain {:?} for {} channels", self.shape(gain), dims[1]));
        }
        let (data, inv_rms) = kernels::rmsnorm_forward(dims, self.value(input).data(), self.value(gain).data(), eps);
        Ok(self.derived(dims.to_vec(), data, Op::RmsNorm { input, gain, inv_rms }, &[input, gain]))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let data = kernels::softmax_forward(&shape, axis, self.value(input).data());
        Ok(self.derived(shape, data, Op::Softmax { input, axis }, &[input]))
    }

    /// Channel concatenation with `a` in the leading channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.dims4(a)?;
        let [bb, cb, hb, wb] = self.dims4(b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err!("concat of [{ba},{ca},{ha},{wa}] with [{bb},{cb},{hb},{wb}]"));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * plane..][..ca * plane]);
            data.extend_from_slice(&db[bi * cb * plane..][..cb * plane]);
        }
        Ok(self.derived(vec![ba, ca + cb, ha, wa], data, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Stacks equal-shape `[B, C, H, W]` maps along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract_err!("concat_batch of nothing"))?;
        let [b, c, h, w] = self.dims4(first)?;
        let mut data = Vec::with_capacity(parts.len() * b * c * h * w);
        for &p in parts {
            if self.shape(p) != [b, c, h, w] {
                return Err(shape_err!("concat_batch part {:?}, expected {:?}", self.shape(p), [b, c, h, w]));
            }
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.derived(vec![parts.len() * b, c, h, w], data, Op::ConcatBatch(parts.to_vec()), parts))
    }

    /// Per-position dot product of the channel vector with `query`: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_dot(&mut self, input: Var, query: Var) -> Result<Var> {
        let dims = self.dims4(input)?;
        if self.shape(query) != [dims[1]] {
            return Err(shape_err!("query {:?} for {} channels", self.shape(query), dims[1]));
        }
        let data = kernels::channel_dot_forward(dims, self.value(input).data(), self.value(query).data());
        Ok(self.derived(vec![dims[0], 1, dims[2], dims[3]], data, Op::ChannelDot { input, query }, &[input, query]))
    }

    /// `channel_dot(rmsnorm_channels(input, gain, eps), query)` as one
    /// node: `[N, C, H, W]` to `[N, 1, H, W]`.
    pub fn rms_query_logits(&mut self, input: Var, gain: Var, query: Var, eps: f64) -> Result<Var> {
        let dims = self.dims4(input)?;
        if self.shape(gain) != [dims[1]] || self.shape(query) != [dims[1]] {
            return Err(shape_err!(
                "gain {:?} and query {:?} for {} channels",
                self.shape(gain),
                self.shape(query),
                dims[1]
            ));
        }
        let (data, inv_rms, dot) =
            kernels::rms_query_forward(dims, self.value(input).data(), self.value(gain).data(), self.value(query).data(), eps);
        let op = Op::RmsQuery { input, gain, query, inv_rms, dot };
        Ok(self.derived(vec![dims[0], 1, dims[2], dims[3]], data, op, &[input, gain, query]))
    }

    /// Weighted sum over a batch-stacked value tensor `[E·B, C, H, W]` with
    /// per-position weights `[E, B, H, W]`, giving `[B, C, H, W]`.
    pub fn weighted_sum(&mut self, values: Var, weights: Var, entries: usize) -> Result<Var> {
        let [eb, c, h, w] = self.dims4(values)?;
        if entries == 0 || eb % entries != 0 {
            return Err(shape_err!("{eb} stacked maps cannot split into {entries} entries"));
        }
        let b = eb / entries;
        if self.shape(weights) != [entries, b, h, w] {
            return Err(shape_err!("weights {:?}, expected {:?}", self.shape(weights), [entries, b, h, w]));
        }
        let data = kernels::weighted_sum_forward(entries, [b, c, h, w], self.value(values).data(), self.value(weights).data());
        Ok(self.derived(vec![b, c, h, w], data, Op::WeightedSum { values, weights, entries }, &[values, weights]))
    }

    fn check_labels(&self, logits: Var, labels: &[usize]) -> Result<[usize; 4]> {
        let dims = self.dims4(logits)?;
        let [b, k, h, w] = dims;
        if labels.len() != b * h * w {
            return Err(shape_err!("{} labels for logits {:?}", labels.len(), dims));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(crate::error::Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        Ok(dims)
    }

    /// Mean per-pixel cross-entropy of `[B, K, H, W]` logits against labels `[B·H·W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let dims = self.check_labels(logits, labels)?;
        let (loss, probs) = kernels::cross_entropy_forward(dims, self.value(logits).data(), labels);
        Ok(self.derived(vec![1], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Soft multi-class Dice loss with smoothing `smooth`, averaged over all classes.
    pub fn soft_dice_loss(&mut self, logits: Var, labels: &[usize], smooth: f64) -> Result<Var> {
        let dims = self.check_labels(logits, labels)?;
        let (loss, probs, sums) = kernels::soft_dice_forward(dims, self.value(logits).data(), labels, smooth);
        let op = Op::SoftDice { logits, labels: labels.to_vec(), probs, sums, smooth };
        Ok(self.derived(vec![1], vec![loss], op, &[logits]))
    }

    /// Backpropagates from the scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(contract_err!("backward already ran on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|g| g * f).collect()),
            Op::Relu(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; nodes[a.0].value.numel()]),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Conv2d { input, weight, bias, padding } => {
                let in_dims = nodes[input.0].value.dims4().expect("recorded as 4-D");
                let wshape = nodes[weight.0].value.shape();
                let geom = ConvGeom::new(in_dims, wshape[0], wshape[2], *padding);
                let (gi, mut gw, gb) = kernels::conv2d_backward(&geom, val(*input), val(*weight), g);
                let fault = super::fault::conv_weight_grad_scale();
                if fault != 1.0 {
                    gw.iter_mut().for_each(|v| *v *= fault);
                }
                acc(*input, gi);
                acc(*weight, gw);
                if let Some(b) = bias {
                    acc(*b, gb);
                }
            }
            Op::MaxPool { input, argmax } => {
                acc(*input, kernels::adaptive_max_pool_backward(nodes[input.0].value.numel(), argmax, g));
            }
            Op::Bilinear { input } => {
                let dims = nodes[input.0].value.dims4().expect("recorded as 4-D");
                let out = nodes[id].value.shape();
                acc(*input, kernels::bilinear_backward(dims, out[2], out[3], g));
            }
            Op::RmsNorm { input, gain, inv_rms } => {
                let dims = nodes[input.0].value.dims4().expect("recorded as 4-D");
                let (gi, gg) = kernels::rmsnorm_backward(dims, val(*input), val(*gain), inv_rms, g);
                acc(*input, gi);
                acc(*gain, gg);
            }
            Op::Softmax { input, axis } => {
                let shape = nodes[id].value.shape();
                acc(*input, kernels::softmax_backward(shape, *axis, nodes[id].value.data(), g));
            }
            Op::ConcatChannels(a, b) => {
                let [bs, ca, h, w] = nodes[a.0].value.dims4().expect("recorded as 4-D");
                let cb = nodes[b.0].value.shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(bs * ca * plane);
                let mut gb = Vec::with_capacity(bs * cb * plane);
                for bi in 0..bs {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ConcatBatch(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ChannelDot { input, query } => {
                let dims = nodes[input.0].value.dims4().expect("recorded as 4-D");
                let (gi, gq) = kernels::channel_dot_backward(dims, val(*input), val(*query), g);
                acc(*input, gi);
                acc(*query, gq);
            }
            Op::RmsQuery { input, gain, query, inv_rms, dot } => {
                let dims = nodes[input.0].value.dims4().expect("recorded as 4-D");
                let (gi, gg, gq) = kernels::rms_query_backward(dims, val(*input), val(*gain), val(*query), inv_rms, dot, g);
                acc(*input, gi);
                acc(*gain, gg);
                acc(*query, gq);
            }
            Op::WeightedSum { values, weights, entries } => {
                let out = nodes[id].value.dims4().expect("recorded as 4-D");
                let (gv, gw) = kernels::weighted_sum_backward(*entries, out, val(*values), val(*weights), g);
                acc(*values, gv);
                acc(*weights, gw);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let dims = nodes[logits.0].value.dims4().expect("recorded as 4-D");
                acc(*logits, kernels::cross_entropy_backward(dims, probs, labels, g[0]));
            }
            Op::SoftDice { logits, labels, probs, sums, smooth } => {
                let dims = nodes[logits.0].value.dims4().expect("recorded as 4-D");
                acc(*logits, kernels::soft_dice_backward(dims, probs, labels, sums, *smooth, g[0]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3 * 3).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = t.leaf(fm([2, 3, 3, 3], data.clone()));
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = t.leaf(fm([3, 3, 1, 1], w));
        let y = t.conv2d(x, w, None, Padding::Same).unwrap();
        assert_eq!(t.value(y).data(), &data[..]);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full([1, 1, 3, 3], 1.0));
        let w = t.leaf(Tensor::full([1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, Padding::Same).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let v = t.conv2d(x, w, None, Padding::None).unwrap();
        assert_eq!(t.shape(v), &[1, 1, 1, 1]);
        assert_eq!(t.value(v).data(), &[9.0]);
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([1, 2, 4, 5]));
        let w = t.leaf(fm([3, 2, 3, 3], (0..54).map(|i| (i as f64).sin()).collect()));
        let y = t.conv2d(x, w, None, Padding::Same).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([1, 2, 4, 4]));
        let w3 = t.leaf(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(t.conv2d(x, w3, None, Padding::Same), Err(crate::Error::Shape(_))));
        let w5 = t.leaf(Tensor::zeros([1, 2, 5, 5]));
        assert!(matches!(t.conv2d(x, w5, None, Padding::Same), Err(crate::Error::Config(_))));
    }

    #[test]
    fn max_pool_matches_hand_windows() {
        let mut t = Tape::new();
        let x = t.leaf(fm([1, 1, 4, 4], (1..=16).map(f64::from).collect()));
        let y = t.adaptive_max_pool(x, 2, 2).unwrap();
        assert_eq!(t.value(y).data(), &[6.0, 8.0, 14.0, 16.0]);
        let same = t.adaptive_max_pool(x, 4, 4).unwrap();
        assert_eq!(t.value(same).data(), t.value(x).data());
        assert!(matches!(t.adaptive_max_pool(x, 5, 4), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn max_pool_gradient_goes_to_first_maximum() {
        let mut t = Tape::new();
        let x = t.leaf(fm([1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).with_grad());
        let y = t.adaptive_max_pool(x, 1, 1).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_hand_values() {
        let mut t = Tape::new();
        let x = t.leaf(fm([1, 1, 1, 2], vec![0.0, 2.0]));
        let y = t.bilinear_resize(x, 1, 4).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.5, 1.5, 2.0]);
        let one = t.leaf(fm([1, 1, 1, 1], vec![7.5]));
        let up = t.bilinear_resize(one, 2, 2).unwrap();
        assert_eq!(t.value(up).data(), &[7.5; 4]);
        let c = t.leaf(Tensor::full([1, 2, 3, 5], -1.25));
        let r = t.bilinear_resize(c, 7, 2).unwrap();
        assert!(t.value(r).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn rmsnorm_hand_values() {
        let mut t = Tape::new();
        let x = t.leaf(fm([1, 2, 1, 1], vec![3.0, 4.0]));
        let g = t.leaf(Tensor::full([2], 1.0));
        let y = t.rmsnorm_channels(x, g, 0.0).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.848528).abs() < 1e-6 && (d[1] - 1.131371).abs() < 1e-6);
        let z = t.leaf(Tensor::zeros([1, 2, 1, 1]));
        let yz = t.rmsnorm_channels(z, g, 0.0).unwrap();
        assert_eq!(t.value(yz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_hand_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let x = t.leaf(Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn concat_channels_layout_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full([1, 2, 4, 4], 1.0).with_grad());
        let b = t.leaf(Tensor::full([1, 3, 4, 4], 2.0).with_grad());
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 5, 4, 4]);
        assert_eq!(t.value(c).data()[31], 1.0);
        assert_eq!(t.value(c).data()[32], 2.0);
        let l = t.sum(c);
        t.backward(l).unwrap();
        assert!(t.grad(a).unwrap().iter().all(|&g| g == 1.0));
        let bad = t.leaf(Tensor::zeros([1, 1, 3, 4]));
        assert!(t.concat_channels(a, bad).is_err());
    }

    #[test]
    fn backward_hand_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_is_single_use_and_scalar_only() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let d = t.detach(x);
        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
        let y = t.add(x, d).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(t.grad(d).is_none());
        assert!(matches!(t.backward(l), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn loss_label_range_is_checked() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::zeros([1, 2, 1, 2]));
        assert!(matches!(t.cross_entropy(z, &[0, 2]), Err(crate::Error::Data(_))));
        let ce = t.cross_entropy(z, &[0, 1]).unwrap();
        assert!((t.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
    }
}
