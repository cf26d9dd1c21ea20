//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] walks it in
//! reverse and returns gradients for every leaf. The engine is deliberately
//! small: dynamic-rank `f64` arrays, one node per op, and closures that read
//! parent values back off the tape. Training loops build one tape per sample
//! and sum per-sample gradients in index order, which keeps results identical
//! between the sequential and data-parallel execution paths.
//!
//! Every node value is kept in standard (C-contiguous) layout so kernels can
//! take flat-slice fast paths.

pub mod kernels;

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis, Ix1, Ix2, IxDyn, Slice};

pub use kernels::Arr;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Values, &Arr, &mut GradSink)>;

struct Node {
    value: Arc<Arr>,
    back: Option<BackFn>,
}

/// Read-only access to node values during the backward sweep.
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl<'a> Values<'a> {
    fn get(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }
}

/// Accumulates gradient contributions into per-node slots.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Arr>],
}

impl<'a> GradSink<'a> {
    fn add(&mut self, v: Var, contribution: Arr) {
        match &mut self.grads[v.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients keyed by the `Var`s of one tape.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, or zeros of the given shape if it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Arr {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128), grad_enabled: true }
    }

    /// A tape that records values only; `backward` must not be called on it.
    pub fn eval_only() -> Self {
        Tape { nodes: Vec::with_capacity(128), grad_enabled: false }
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Id the next pushed node will get; lets closures reference their own output.
    fn next_var(&self) -> Var {
        Var(self.nodes.len())
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value: Arc::new(value), back: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf sharing an existing allocation (used for model parameters).
    pub fn leaf_shared(&mut self, value: Arc<Arr>) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, back: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Arr, back: impl Fn(&Values, &Arr, &mut GradSink) + 'static) -> Var {
        debug_assert!(value.is_standard_layout());
        let back = if self.grad_enabled { Some(Box::new(back) as BackFn) } else { None };
        self.nodes.push(Node { value: Arc::new(value), back });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Leaf gradients stay retrievable.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an eval-only tape");
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::from_elem(self.value(root).raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if self.nodes[id].back.is_none() {
                continue; // leaf: keep any accumulated gradient
            }
            let Some(g) = grads[id].take() else { continue };
            let back = self.nodes[id].back.as_ref().unwrap();
            let values = Values { nodes: &self.nodes };
            let mut sink = GradSink { grads: &mut grads };
            back(&values, &g, &mut sink);
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(out, move |_, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        self.push(out, move |_, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.mapv(|v| -v));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = &*self.nodes[a.0].value * &*self.nodes[b.0].value;
        self.push(out, move |vals, g, sink| {
            sink.add(a, g * vals.get(b));
            sink.add(b, g * vals.get(a));
        })
    }

    /// Elementwise quotient; used on scalar nodes for ratio losses.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let out = &*self.nodes[a.0].value / &*self.nodes[b.0].value;
        self.push(out, move |vals, g, sink| {
            let vb = vals.get(b);
            sink.add(a, g / vb);
            let va = vals.get(a);
            sink.add(b, -(g * va) / (vb * vb));
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(out, move |_, g, sink| sink.add(a, g.mapv(|v| v * c)))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v + c);
        self.push(out, move |_, g, sink| sink.add(a, g.clone()))
    }

    /// Elementwise product with a constant array (dropout masks, class masks).
    pub fn mul_const(&mut self, a: Var, c: Arr) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let out = &*self.nodes[a.0].value * &c;
        self.push(out, move |_, g, sink| sink.add(a, g * &c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x * sigmoid_scalar(x));
        self.push(out, move |vals, g, sink| {
            let x = vals.get(a);
            let mut gx = x.mapv(|x| {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            });
            gx *= g;
            sink.add(a, gx);
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(out, move |vals, g, sink| {
            let mut gx = vals.get(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            gx *= g;
            sink.add(a, gx);
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out_var = self.next_var();
        let out = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(out, move |vals, g, sink| {
            let s = vals.get(out_var);
            sink.add(a, g * &s.mapv(|s| s * (1.0 - s)));
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape: Vec<usize> = self.shape(a).to_vec();
        let out = self.nodes[a.0].value.as_ref().clone().into_shape_with_order(IxDyn(shape)).expect("reshape size mismatch");
        self.push(out, move |_, g, sink| {
            sink.add(a, g.clone().into_shape_with_order(IxDyn(&in_shape)).unwrap());
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_owned = axes.to_vec();
        let out = self.nodes[a.0].value.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        self.push(out, move |_, g, sink| {
            let mut inverse = vec![0usize; axes_owned.len()];
            for (i, &ax) in axes_owned.iter().enumerate() {
                inverse[ax] = i;
            }
            sink.add(a, g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned());
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let parts: Vec<Var> = parts.to_vec();
        let extents: Vec<usize> = parts.iter().map(|v| self.shape(*v)[axis]).collect();
        self.push(out.as_standard_layout().to_owned(), move |_, g, sink| {
            let mut offset = 0;
            for (v, &len) in parts.iter().zip(&extents) {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                    .as_standard_layout()
                    .to_owned();
                sink.add(*v, piece);
                offset += len;
            }
        })
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let in_shape: Vec<usize> = self.shape(a).to_vec();
        let out = self.nodes[a.0].value.slice_axis(Axis(axis), Slice::from(start..start + len)).as_standard_layout().to_owned();
        self.push(out, move |_, g, sink| {
            let mut gx = Arr::zeros(IxDyn(&in_shape));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            sink.add(a, gx);
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Arr::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push(out, move |_, g, sink| {
            let gv = g[IxDyn(&[])];
            sink.add(a, Arr::from_elem(IxDyn(&shape), gv));
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over all axes except the first: (C, ...) -> (C,).
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let c = shape[0];
        let spatial: usize = shape[1..].iter().product();
        let flat = self.nodes[a.0].value.view().into_shape_with_order((c, spatial)).unwrap();
        let out = flat.mean_axis(Axis(1)).unwrap().into_dyn();
        self.push(out, move |_, g, sink| {
            let mut gx = Arr::zeros(IxDyn(&shape));
            {
                let mut flat = gx.view_mut().into_shape_with_order((c, spatial)).unwrap();
                for ch in 0..c {
                    let gv = g[IxDyn(&[ch])] / spatial as f64;
                    flat.row_mut(ch).fill(gv);
                }
            }
            sink.add(a, gx);
        })
    }

    /// Mean over rows: (N, C) -> (C,).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let m = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap().mean_axis(Axis(0)).unwrap();
        self.push(m.into_dyn(), move |_, g, sink| {
            let gr = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut gx = Array2::<f64>::zeros((n, c));
            for mut row in gx.rows_mut() {
                row.assign(&gr.mapv(|v| v / n as f64));
            }
            sink.add(a, gx.into_dyn());
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
        assert_eq!(va.dim().1, vb.dim().0, "matmul inner dim mismatch");
        let out = va.dot(&vb).into_dyn();
        self.push(out, move |vals, g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let va = vals.get(a).view().into_dimensionality::<Ix2>().unwrap();
            let vb = vals.get(b).view().into_dimensionality::<Ix2>().unwrap();
            sink.add(a, g2.dot(&vb.t()).into_dyn());
            sink.add(b, va.t().dot(&g2).into_dyn());
        })
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    /// x (N, C) + b (C) broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("add_row_bias lhs must be 2-d");
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
        assert_eq!(vx.dim().1, vb.dim(), "bias length mismatch");
        let out = (&vx + &vb.insert_axis(Axis(0))).into_dyn();
        self.push(out, move |_, g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            sink.add(x, g.clone());
            sink.add(b, g2.sum_axis(Axis(0)).into_dyn());
        })
    }

    /// x (C, spatial...) + b (C) broadcast over spatial positions.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let shape: Vec<usize> = self.shape(x).to_vec();
        let c = shape[0];
        assert_eq!(self.shape(b), &[c], "channel bias length mismatch");
        let spatial: usize = shape[1..].iter().product();
        let flat = self.nodes[x.0].value.view().into_shape_with_order((c, spatial)).unwrap();
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let out = (&flat + &vb.insert_axis(Axis(1))).into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(out, move |_, g, sink| {
            let gflat = g.view().into_shape_with_order((c, spatial)).unwrap();
            sink.add(x, g.clone());
            sink.add(b, gflat.sum_axis(Axis(1)).into_dyn());
        })
    }

    /// Row lookup into an embedding table: (V, E) gathered at `idx` -> (B, E).
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.nodes[table.0].value.view().into_dimensionality::<Ix2>().expect("gather table must be 2-d");
        let (v, e) = t.dim();
        let mut out = Array2::<f64>::zeros((idx.len(), e));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < v, "gather index out of range");
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(out.into_dyn(), move |_, g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gt = Array2::<f64>::zeros((v, e));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = gt.row_mut(i);
                row += &g2.row(r);
            }
            sink.add(table, gt.into_dyn());
        })
    }

    // ---- softmax and fused losses ----

    /// Row-wise softmax of a (N, C) matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out_var = self.next_var();
        let v = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("softmax input must be 2-d");
        let out = softmax_rows_arr(&v.to_owned()).into_dyn();
        self.push(out, move |vals, g, sink| {
            let s = vals.get(out_var).view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(s.dim());
            for r in 0..s.dim().0 {
                let srow = s.row(r);
                let grow = g2.row(r);
                let dot = srow.dot(&grow);
                for c in 0..s.dim().1 {
                    gx[[r, c]] = srow[c] * (grow[c] - dot);
                }
            }
            sink.add(a, gx.into_dyn());
        })
    }

    /// Mean binary cross-entropy with logits. `targets` is a constant (B, K)
    /// 0/1 matrix; `row_weights`, when given, re-weights each row and the loss
    /// divides by the weight total instead of B.
    pub fn bce_with_logits(&mut self, z: Var, targets: Arr, row_weights: Option<Vec<f64>>) -> Var {
        let vz = self.nodes[z.0].value.view().into_dimensionality::<Ix2>().expect("bce logits must be 2-d");
        let (b, k) = vz.dim();
        assert_eq!(targets.shape(), &[b, k], "bce target shape mismatch");
        let w: Vec<f64> = row_weights.unwrap_or_else(|| vec![1.0; b]);
        assert_eq!(w.len(), b, "bce weight length mismatch");
        let wsum: f64 = w.iter().sum();
        assert!(wsum > 0.0, "bce weights must not sum to zero");
        let t2 = targets.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut loss = 0.0;
        for r in 0..b {
            let mut row_loss = 0.0;
            for c in 0..k {
                let zv = vz[[r, c]];
                let y = t2[[r, c]];
                row_loss += zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p();
            }
            loss += w[r] * row_loss / k as f64;
        }
        loss /= wsum;
        self.push(Arr::from_elem(IxDyn(&[]), loss), move |vals, g, sink| {
            let gv = g[IxDyn(&[])];
            let vz = vals.get(z).view().into_dimensionality::<Ix2>().unwrap();
            let mut gz = Array2::<f64>::zeros((b, k));
            for r in 0..b {
                let scale = gv * w[r] / (k as f64 * wsum);
                for c in 0..k {
                    gz[[r, c]] = scale * (sigmoid_scalar(vz[[r, c]]) - t2[[r, c]]);
                }
            }
            sink.add(z, gz.into_dyn());
        })
    }

    /// Mean softmax cross-entropy over rows of (N, C) logits against class ids.
    pub fn softmax_ce_rows(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let v = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().expect("ce logits must be 2-d");
        let (n, _c) = v.dim();
        assert_eq!(targets.len(), n, "ce target length mismatch");
        let mut loss = 0.0;
        for r in 0..n {
            let row = v.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        loss /= n as f64;
        self.push(Arr::from_elem(IxDyn(&[]), loss), move |vals, g, sink| {
            let gv = g[IxDyn(&[])];
            let v = vals.get(logits).view().into_dimensionality::<Ix2>().unwrap();
            let mut gz = softmax_rows_arr(&v.to_owned());
            for r in 0..n {
                gz[[r, targets[r]]] -= 1.0;
            }
            gz.mapv_inplace(|x| x * gv / n as f64);
            sink.add(logits, gz.into_dyn());
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse_against(&mut self, a: Var, target: Arr) -> Var {
        assert_eq!(self.shape(a), target.shape(), "mse shape mismatch");
        let n = target.len() as f64;
        let diff = &*self.nodes[a.0].value - &target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        self.push(Arr::from_elem(IxDyn(&[]), loss), move |vals, g, sink| {
            let gv = g[IxDyn(&[])];
            let d = vals.get(a) - &target;
            sink.add(a, d.mapv(|v| 2.0 * v * gv / n));
        })
    }

    // ---- structured ops backed by kernels ----

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = kernels::conv3d_forward(
            &self.nodes[x.0].value.view(),
            &self.nodes[w.0].value.view(),
            &self.nodes[b.0].value.view(),
            stride,
            pad,
        );
        self.push(out, move |vals, g, sink| {
            let (gx, gw, gb) =
                kernels::conv3d_backward(&vals.get(x).view(), &vals.get(w).view(), &g.view(), stride, pad);
            sink.add(x, gx);
            sink.add(w, gw);
            sink.add(b, gb);
        })
    }

    pub fn nearest_up2(&mut self, x: Var) -> Var {
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        let out = kernels::nearest_up2_forward(&self.nodes[x.0].value.view());
        self.push(out, move |_, g, sink| {
            sink.add(x, kernels::nearest_up2_backward(&g.view(), &in_shape));
        })
    }

    pub fn trilinear_to(&mut self, x: Var, out_dhw: [usize; 3]) -> Var {
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        let out = kernels::trilinear_forward(&self.nodes[x.0].value.view(), out_dhw);
        self.push(out, move |_, g, sink| {
            sink.add(x, kernels::trilinear_backward(&g.view(), &in_shape));
        })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let out = kernels::group_norm_forward(
            &self.nodes[x.0].value.view(),
            &self.nodes[gamma.0].value.view(),
            &self.nodes[beta.0].value.view(),
            groups,
            eps,
        );
        self.push(out, move |vals, g, sink| {
            let (gx, ggamma, gbeta) = kernels::group_norm_backward(
                &vals.get(x).view(),
                &vals.get(gamma).view(),
                &g.view(),
                groups,
                eps,
            );
            sink.add(x, gx);
            sink.add(gamma, ggamma);
            sink.add(beta, gbeta);
        })
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let out = kernels::layer_norm_rows_forward(
            &self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("layer_norm input must be 2-d"),
            &self.nodes[gamma.0].value.view(),
            &self.nodes[beta.0].value.view(),
            eps,
        );
        self.push(out.into_dyn(), move |vals, g, sink| {
            let (gx, ggamma, gbeta) = kernels::layer_norm_rows_backward(
                &vals.get(x).view().into_dimensionality::<Ix2>().unwrap(),
                &vals.get(gamma).view(),
                &g.view().into_dimensionality::<Ix2>().unwrap(),
                eps,
            );
            sink.add(x, gx.into_dyn());
            sink.add(gamma, ggamma);
            sink.add(beta, gbeta);
        })
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_arr(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Multi-head scaled dot-product attention over token matrices.
///
/// `q_tokens` is (Nq, C), `kv_tokens` is (Nk, C); the projections are square
/// (C, C). Heads split the channel axis evenly. Self-attention passes the same
/// var for both token arguments.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_tokens: Var,
    kv_tokens: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
) -> Var {
    let c = tape.shape(q_tokens)[1];
    assert_eq!(c % heads, 0, "channel dim must divide head count");
    let d = c / heads;
    let q = tape.matmul(q_tokens, w_q);
    let k = tape.matmul(kv_tokens, w_k);
    let v = tape.matmul(kv_tokens, w_v);
    let mut head_outs = Vec::with_capacity(heads);
    for j in 0..heads {
        let qj = tape.slice_axis(q, 1, j * d, d);
        let kj = tape.slice_axis(k, 1, j * d, d);
        let vj = tape.slice_axis(v, 1, j * d, d);
        let kt = tape.transpose2(kj);
        let scores = tape.matmul(qj, kt);
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(attn, vj));
    }
    let merged = tape.concat(&head_outs, 1);
    tape.matmul(merged, w_o)
}
