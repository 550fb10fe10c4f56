//! Reverse pass. Every vector-Jacobian product is written with the same
//! primitives as the forward pass, so the returned gradient nodes can be
//! differentiated again.

use super::graph::{Graph, Op, Var};
use super::kernels::LOG_FLOOR;
use super::tensor::Tensor;
use super::AutodiffError;

impl Graph {
    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The result nodes live in this graph; a scalar built from them can be
    /// passed to `grad` again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { shape });
        }
        let end = output.0 + 1;

        // Only walk nodes that depend on something in `wrt`.
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] && self.nodes[i].inputs.iter().any(|v| relevant[v.0]) {
                relevant[i] = true;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        grads[output.0] = Some(self.scalar_constant(1.0));

        for i in (0..end).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let op = node.op.clone();
            let inputs = node.inputs.clone();
            let contributions = self.vjp(&op, &inputs, Var(i), g, &relevant);
            for (input, contrib) in inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    grads[input.0] = Some(match grads[input.0] {
                        Some(prev) => self.add(prev, c),
                        None => c,
                    });
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// Flattened gradient of `output` over `wrt`, in order.
    pub fn grad_vector(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<f64>, AutodiffError> {
        let grads = self.grad(output, wrt)?;
        Ok(grads
            .iter()
            .flat_map(|g| self.value(*g).data().to_vec())
            .collect())
    }

    fn vjp(&mut self, op: &Op, inputs: &[Var], out: Var, g: Var, relevant: &[bool]) -> Vec<Option<Var>> {
        let needs = |k: usize| relevant[inputs[k].0];
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = needs(0).then(|| match (ta, tb) {
                    (false, false) => self.matmul_t(g, b, false, true),
                    (true, false) => self.matmul_t(b, g, false, true),
                    (false, true) => self.matmul_t(g, b, false, false),
                    (true, true) => self.matmul_t(b, g, true, true),
                });
                let gb = needs(1).then(|| match (ta, tb) {
                    (false, false) => self.matmul_t(a, g, true, false),
                    (true, false) => self.matmul_t(a, g, false, false),
                    (false, true) => self.matmul_t(g, a, true, false),
                    (true, true) => self.matmul_t(g, a, true, true),
                });
                vec![ga, gb]
            }
            Op::Add => {
                let ga = needs(0).then(|| {
                    let s = self.shape(inputs[0]);
                    self.reduce_to(g, s)
                });
                let gb = needs(1).then(|| {
                    let s = self.shape(inputs[1]);
                    self.reduce_to(g, s)
                });
                vec![ga, gb]
            }
            Op::Sub => {
                let ga = needs(0).then(|| {
                    let s = self.shape(inputs[0]);
                    self.reduce_to(g, s)
                });
                let gb = needs(1).then(|| {
                    let s = self.shape(inputs[1]);
                    let neg = self.scale(g, -1.0);
                    self.reduce_to(neg, s)
                });
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = needs(0).then(|| {
                    let s = self.shape(a);
                    let p = self.mul(g, b);
                    self.reduce_to(p, s)
                });
                let gb = needs(1).then(|| {
                    let s = self.shape(b);
                    let p = self.mul(g, a);
                    self.reduce_to(p, s)
                });
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(self.scale(g, *c))],
            Op::Tanh => {
                // 1 - y^2
                let one = self.scalar_constant(1.0);
                let y2 = self.square(out);
                let d = self.sub(one, y2);
                vec![Some(self.mul(g, d))]
            }
            Op::Exp => vec![Some(self.mul(g, out))],
            Op::Log => {
                let x = inputs[0];
                let floored = self.value(x).data().iter().any(|&v| v <= LOG_FLOOR);
                // 1/x == exp(-ln x) above the floor
                let neg = self.scale(out, -1.0);
                let mut recip = self.exp(neg);
                if floored {
                    let mask = self.value(x).map(|v| if v > LOG_FLOOR { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    recip = self.mul(recip, m);
                }
                vec![Some(self.mul(g, recip))]
            }
            Op::Square => {
                let two_x = self.scale(inputs[0], 2.0);
                vec![Some(self.mul(g, two_x))]
            }
            Op::Clip { lo, hi } => {
                // zero at and beyond the bounds
                let mask = self
                    .value(inputs[0])
                    .map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                vec![Some(self.mul(g, m))]
            }
            Op::Sum(_) => {
                let (r, c) = self.shape(inputs[0]);
                vec![Some(self.expand(g, r, c))]
            }
            Op::Concat => {
                let mut offset = 0;
                let mut out_grads = Vec::with_capacity(inputs.len());
                for (k, input) in inputs.iter().enumerate() {
                    let width = self.shape(*input).1;
                    out_grads.push(needs(k).then(|| self.slice_cols(g, offset, width)));
                    offset += width;
                }
                out_grads
            }
            Op::Slice { start, len } => {
                let (rows, cols) = self.shape(inputs[0]);
                let mut parts = Vec::with_capacity(3);
                if *start > 0 {
                    parts.push(self.constant(Tensor::zeros(rows, *start)));
                }
                parts.push(g);
                let tail = cols - start - len;
                if tail > 0 {
                    parts.push(self.constant(Tensor::zeros(rows, tail)));
                }
                let full = if parts.len() == 1 { g } else { self.concat(&parts) };
                vec![Some(full)]
            }
            Op::Transpose => vec![Some(self.transpose(g))],
            Op::LogSumExp => {
                let centered = self.sub(inputs[0], out);
                let soft = self.exp(centered);
                vec![Some(self.mul(g, soft))]
            }
            Op::Dropout => vec![Some(self.dropout(g, inputs[1])), None],
            Op::GatherRows(idx) => {
                let rows = self.shape(inputs[0]).0;
                vec![Some(self.scatter_rows(g, &idx.clone(), rows))]
            }
            Op::ScatterRows { indices, .. } => vec![Some(self.gather_rows(g, &indices.clone()))],
            Op::NormalCdf => {
                // standard normal density: exp(-x^2/2) / sqrt(2 pi)
                let x2 = self.square(inputs[0]);
                let h = self.scale(x2, -0.5);
                let e = self.exp(h);
                let pdf = self.scale(e, 1.0 / (2.0 * std::f64::consts::PI).sqrt());
                vec![Some(self.mul(g, pdf))]
            }
        }
    }
}
