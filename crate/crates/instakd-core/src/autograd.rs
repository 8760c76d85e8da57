//! Minimal reverse-mode autodiff tape.
//!
//! Forward runs eagerly: every op computes its value immediately and records
//! what it needs for the backward pass. `backward` walks the tape in reverse
//! and accumulates gradients for every variable that requires them. One tape
//! per training step; values are owned by the tape and read back by index.

use crate::kernels::{conv2d_bwd_input, conv2d_bwd_weight, conv2d_fwd, conv_shape};
use crate::mask::{build_soft_mask, build_soft_mask_grad, Rescale, SoftMask};
use crate::roi::{extract_roi_batch, extract_roi_batch_grad, FeatureMap, InstanceSet};
use crate::selector::{AttentionScores, ScoreSource};
use crate::tensor::{softmax_into, Tensor};

/// Handle to a tape entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Constant,
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MulMask { f: Var, m: Var },
    MatmulNT { a: Var, b: Var },
    SoftmaxGroups { x: Var, groups: Vec<Vec<usize>> },
    MeanAxis1 { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    RoiBatch { f: Var, instances: InstanceSet, pool_h: usize, pool_w: usize, samples: usize },
    BuildMask { scores: Var, instances: InstanceSet, rescale: Rescale, group_size: Vec<usize> },
    Detach,
    SumSq { x: Var },
    /// Scalar whose gradients w.r.t. its inputs were computed at forward time.
    ScalarWithGrads { grads: Vec<(Var, Tensor)> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by `Var`.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.g[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients are collected for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Non-trainable input: backward never reaches it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Constant)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dims(), self.value(b).dims(), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dims(), self.value(b).dims(), "sub shape mismatch");
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            ta.zip(tb, |x, y| x - y).expect("shapes asserted above")
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Sub { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Scale { x, c })
    }

    /// Broadcast multiply of features [N, C, H, W] by a mask [N, 1, H, W].
    pub fn mul_mask(&mut self, f: Var, m: Var) -> Var {
        let fd = self.value(f).dims().to_vec();
        let md = self.value(m).dims().to_vec();
        assert!(
            md.len() == 4 && md[1] == 1 && fd[0] == md[0] && fd[2] == md[2] && fd[3] == md[3],
            "mul_mask shapes: {fd:?} vs {md:?}"
        );
        let (n, c, h, w) = (fd[0], fd[1], fd[2], fd[3]);
        let mut value = self.value(f).clone();
        {
            let mv = self.nodes[m.0].value.data();
            let out = value.data_mut();
            for img in 0..n {
                for ch in 0..c {
                    let fo = ((img * c) + ch) * h * w;
                    let mo = img * h * w;
                    for p in 0..h * w {
                        out[fo + p] *= mv[mo + p];
                    }
                }
            }
        }
        let rg = self.requires_grad(f) || self.requires_grad(m);
        self.push(value, rg, Op::MulMask { f, m })
    }

    /// a [I, D] times b [K, D] transposed -> [I, K].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let ad = self.value(a).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        assert!(ad.len() == 2 && bd.len() == 2 && ad[1] == bd[1], "matmul_nt shapes: {ad:?} vs {bd:?}");
        let (i, d, k) = (ad[0], ad[1], bd[0]);
        let mut value = Tensor::zeros(&[i, k]);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let out = value.data_mut();
            for row in 0..i {
                for col in 0..k {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += av[row * d + j] * bv[col * d + j];
                    }
                    out[row * k + col] = acc;
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::MatmulNT { a, b })
    }

    /// Column-wise softmax of logits [I, K] within each instance group.
    pub fn softmax_groups(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 2, "softmax_groups expects [I, K]");
        let (i, k) = (xd[0], xd[1]);
        let mut value = Tensor::zeros(&[i, k]);
        {
            let xv = self.nodes[x.0].value.data();
            let mut col = vec![0.0; i];
            let mut col_out = vec![0.0; i];
            for sel in 0..k {
                for row in 0..i {
                    col[row] = xv[row * k + sel];
                }
                for g in groups {
                    softmax_into(&col, g, &mut col_out);
                    for &row in g {
                        *value.at2_mut(row, sel) = col_out[row];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::SoftmaxGroups { x, groups: groups.to_vec() })
    }

    /// Mean over the second axis: [I, K] -> [I].
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 2, "mean_axis1 expects [I, K]");
        let (i, k) = (xd[0], xd[1]);
        let mut value = Tensor::zeros(&[i]);
        {
            let xv = self.nodes[x.0].value.data();
            let out = value.data_mut();
            for row in 0..i {
                let mut acc = 0.0;
                for col in 0..k {
                    acc += xv[row * k + col];
                }
                out[row] = acc / k as f64;
            }
        }
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::MeanAxis1 { x })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|bv| &self.nodes[bv.0].value),
            stride,
            pad,
        );
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || b.is_some_and(|bv| self.requires_grad(bv));
        self.push(value, rg, Op::Conv2d { x, w, b, stride, pad })
    }

    /// RoIAlign every instance out of the feature map; rows [I, C*h*w].
    pub fn roi_batch(
        &mut self,
        f: Var,
        stride: usize,
        instances: &InstanceSet,
        pool_h: usize,
        pool_w: usize,
        samples: usize,
    ) -> Var {
        let fm = FeatureMap::new(self.value(f).clone(), stride).expect("roi_batch input must be a valid feature map");
        let batch = extract_roi_batch(&fm, instances, pool_h, pool_w, samples);
        let rg = self.requires_grad(f);
        self.push(
            batch.values,
            rg,
            Op::RoiBatch { f, instances: instances.clone(), pool_h, pool_w, samples },
        )
    }

    /// Multiplicative soft mask [N, 1, H, W] from averaged scores [I].
    pub fn build_mask(
        &mut self,
        scores: Var,
        instances: &InstanceSet,
        shape: (usize, usize, usize),
        rescale: Rescale,
        group_size: &[usize],
    ) -> Var {
        let att = AttentionScores {
            values: self.value(scores).data().to_vec(),
            source: ScoreSource::Teacher,
            per_selector: None,
            group_size: group_size.to_vec(),
        };
        let m = build_soft_mask(instances, &att, shape, rescale);
        let rg = self.requires_grad(scores);
        self.push(
            m.values,
            rg,
            Op::BuildMask {
                scores,
                instances: instances.clone(),
                rescale,
                group_size: group_size.to_vec(),
            },
        )
    }

    /// Identity forward, gradient barrier backward.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::Detach)
    }

    /// Sum of squares of all entries, as a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_sq());
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::SumSq { x })
    }

    /// Scalar node whose input gradients were computed analytically at
    /// forward time (used for losses with hand-derived gradients).
    pub fn scalar_with_grads(&mut self, value: f64, grads: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &grads {
            assert_eq!(
                self.value(*v).dims(),
                g.dims(),
                "gradient shape must match its input"
            );
        }
        let rg = grads.iter().any(|(v, _)| self.requires_grad(*v));
        self.push(Tensor::scalar(value), rg, Op::ScalarWithGrads { grads })
    }

    /// Reverse pass from a scalar root. Returns the gradient of the root
    /// with respect to every grad-requiring variable on the tape.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = g[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut g);
            g[idx] = Some(dy);
        }
        Grads { g }
    }

    fn accum(&self, g: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut g[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor, g: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::Relu { x } => {
                let d = self.nodes[idx]
                    .value
                    .zip(dy, |y, gy| if y > 0.0 { gy } else { 0.0 })
                    .expect("relu grad shape");
                self.accum(g, *x, d);
            }
            Op::Add { a, b } => {
                self.accum(g, *a, dy.clone());
                self.accum(g, *b, dy.clone());
            }
            Op::Sub { a, b } => {
                self.accum(g, *a, dy.clone());
                self.accum(g, *b, dy.map(|v| -v));
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(g, *x, dy.map(|v| v * c));
            }
            Op::MulMask { f, m } => {
                let fd = self.value(*f).dims().to_vec();
                let (n, c, h, w) = (fd[0], fd[1], fd[2], fd[3]);
                let fv = self.value(*f).data();
                let mv = self.value(*m).data();
                if self.nodes[f.0].requires_grad {
                    let mut df = Tensor::zeros(&fd);
                    let out = df.data_mut();
                    for img in 0..n {
                        for ch in 0..c {
                            let fo = ((img * c) + ch) * h * w;
                            let mo = img * h * w;
                            for p in 0..h * w {
                                out[fo + p] = dy.data()[fo + p] * mv[mo + p];
                            }
                        }
                    }
                    self.accum(g, *f, df);
                }
                if self.nodes[m.0].requires_grad {
                    let mut dm = Tensor::zeros(&[n, 1, h, w]);
                    let out = dm.data_mut();
                    for img in 0..n {
                        let mo = img * h * w;
                        for ch in 0..c {
                            let fo = ((img * c) + ch) * h * w;
                            for p in 0..h * w {
                                out[mo + p] += dy.data()[fo + p] * fv[fo + p];
                            }
                        }
                    }
                    self.accum(g, *m, dm);
                }
            }
            Op::MatmulNT { a, b } => {
                let (i, d) = (self.value(*a).dims()[0], self.value(*a).dims()[1]);
                let k = self.value(*b).dims()[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    let mut da = Tensor::zeros(&[i, d]);
                    let out = da.data_mut();
                    for row in 0..i {
                        for col in 0..k {
                            let gy = dy.data()[row * k + col];
                            for j in 0..d {
                                out[row * d + j] += gy * bv[col * d + j];
                            }
                        }
                    }
                    self.accum(g, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Tensor::zeros(&[k, d]);
                    let out = db.data_mut();
                    for row in 0..i {
                        for col in 0..k {
                            let gy = dy.data()[row * k + col];
                            for j in 0..d {
                                out[col * d + j] += gy * av[row * d + j];
                            }
                        }
                    }
                    self.accum(g, *b, db);
                }
            }
            Op::SoftmaxGroups { x, groups } => {
                let (i, k) = (self.nodes[idx].value.dims()[0], self.nodes[idx].value.dims()[1]);
                let p = self.nodes[idx].value.data();
                let mut dx = Tensor::zeros(&[i, k]);
                {
                    let out = dx.data_mut();
                    for sel in 0..k {
                        for grp in groups {
                            let mut dot = 0.0;
                            for &row in grp {
                                dot += p[row * k + sel] * dy.data()[row * k + sel];
                            }
                            for &row in grp {
                                out[row * k + sel] =
                                    p[row * k + sel] * (dy.data()[row * k + sel] - dot);
                            }
                        }
                    }
                }
                self.accum(g, *x, dx);
            }
            Op::MeanAxis1 { x } => {
                let (i, k) = (self.value(*x).dims()[0], self.value(*x).dims()[1]);
                let mut dx = Tensor::zeros(&[i, k]);
                {
                    let out = dx.data_mut();
                    for row in 0..i {
                        let gy = dy.data()[row] / k as f64;
                        for col in 0..k {
                            out[row * k + col] = gy;
                        }
                    }
                }
                self.accum(g, *x, dx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let shape = conv_shape(self.value(*x), self.value(*w), *stride, *pad);
                if self.nodes[x.0].requires_grad {
                    let dx = conv2d_bwd_input(dy, self.value(*w), self.value(*x).dims(), *stride, *pad);
                    self.accum(g, *x, dx);
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_b = b.is_some_and(|bv| self.nodes[bv.0].requires_grad);
                if need_w || need_b {
                    let (dw, db) = conv2d_bwd_weight(
                        dy,
                        self.value(*x),
                        &[shape.c_out, shape.c_in, shape.k, shape.k],
                        need_b,
                        *stride,
                        *pad,
                    );
                    if need_w {
                        self.accum(g, *w, dw);
                    }
                    if let (true, Some(bv), Some(db)) = (need_b, *b, db) {
                        self.accum(g, bv, db);
                    }
                }
            }
            Op::RoiBatch { f, instances, pool_h, pool_w, samples } => {
                let df = extract_roi_batch_grad(
                    dy,
                    self.value(*f).dims(),
                    instances,
                    *pool_h,
                    *pool_w,
                    *samples,
                );
                self.accum(g, *f, df);
            }
            Op::BuildMask { scores, instances, rescale, group_size } => {
                let att = AttentionScores {
                    values: self.value(*scores).data().to_vec(),
                    source: ScoreSource::Teacher,
                    per_selector: None,
                    group_size: group_size.clone(),
                };
                let mask = SoftMask { values: self.nodes[idx].value.clone() };
                let d_eff = build_soft_mask_grad(dy, &mask, instances, &att, *rescale);
                let mut ds = Tensor::zeros(&[att.values.len()]);
                for (i, de) in d_eff.iter().enumerate() {
                    // Chain through the rescale: effective = min(gs*A, 1)
                    // has slope gs below the clamp and 0 above it.
                    let slope = match rescale {
                        Rescale::None => 1.0,
                        Rescale::MeanOne => {
                            let gs = group_size[i] as f64;
                            if att.values[i] * gs < 1.0 {
                                gs
                            } else {
                                0.0
                            }
                        }
                    };
                    ds.data_mut()[i] = de * slope;
                }
                self.accum(g, *scores, ds);
            }
            Op::SumSq { x } => {
                let gy = dy.item();
                let d = self.value(*x).map(|v| 2.0 * gy * v);
                self.accum(g, *x, d);
            }
            Op::ScalarWithGrads { grads } => {
                let gy = dy.item();
                for (v, grad) in grads {
                    self.accum(g, *v, grad.map(|x| x * gy));
                }
            }
        }
    }
}
