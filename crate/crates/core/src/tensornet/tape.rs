//! Reverse-mode autodiff over a recorded sequence of coarse operations.
//!
//! A [`Tape`] borrows a [`ParamStore`]; parameter nodes read their values
//! from the store, so two branches that bind the same [`ParamId`] use the
//! same numbers and their gradients are summed in [`Gradients`].

use super::tensor::{axpy, dot, Tensor};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Indexed by `ParamId`; `None` if the parameter was not used.
    pub params: Vec<Option<Tensor>>,
    inputs: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients { params: store.tensors.iter().map(|t| Some(Tensor::zeros(&t.shape))).collect(), inputs: Vec::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to an input created with `requires_grad`.
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(i, _)| *i == v.0).map(|(_, t)| t)
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.params.iter_mut().flatten() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize, cols: Vec<f64> },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Flatten { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { a: Var, b: Var },
    ScaleColumns { x: Var, scale: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, expected: impl Into<String>, actual: &[usize]) -> TensorError {
    TensorError::Shape { op, expected: expected.into(), actual: actual.to_vec() }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), consumed: false }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Input, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation. `x: [N, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (&self.value(x).shape, &self.value(w).shape, &self.value(b).shape);
        if xs.len() != 4 {
            return Err(shape_err("conv2d", "input [N, C, H, W]", xs));
        }
        if ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("weight [O, {}, K, K]", xs[1]), ws));
        }
        if bs.as_slice() != [ws[0]] {
            return Err(shape_err("conv2d", format!("bias [{}]", ws[0]), bs));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride >= 1", &[stride]));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(shape_err("conv2d", format!("spatial extent >= kernel {k}"), xs));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (wd + 2 * padding - k) / stride + 1;
        let (p, kk) = (oh * ow, c * k * k);
        let xv = &self.value(x).data;
        let mut cols = vec![0.0; n * p * kk];
        for ni in 0..n {
            let img = &xv[ni * c * h * wd..(ni + 1) * c * h * wd];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cols[((ni * p) + oy * ow + ox) * kk..][..kk];
                    let mut idx = 0;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    row[idx] = img[(ci * h + iy as usize) * wd + ix as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        let (wv, bv) = (&self.value(w).data, &self.value(b).data);
        let mut out = vec![0.0; n * o * p];
        for ni in 0..n {
            for oi in 0..o {
                let wrow = &wv[oi * kk..(oi + 1) * kk];
                let dst = &mut out[(ni * o + oi) * p..][..p];
                for (pi, d) in dst.iter_mut().enumerate() {
                    *d = dot(wrow, &cols[(ni * p + pi) * kk..][..kk]) + bv[oi];
                }
            }
        }
        let rg = self.grad_flag(&[x, w, b]);
        let value = Tensor { shape: vec![n, o, oh, ow], data: out };
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, padding, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|e| *e = e.max(0.0));
        let rg = self.grad_flag(&[x]);
        self.push(v, Op::Relu { x }, rg)
    }

    /// Non-overlapping window max; output extent is `floor(extent / window)`.
    pub fn maxpool(&mut self, x: Var, window: usize) -> Result<Var, TensorError> {
        let xs = &self.value(x).shape;
        if xs.len() != 4 || window == 0 || xs[2] < window || xs[3] < window {
            return Err(shape_err("maxpool", format!("[N, C, H, W] with H, W >= {window}"), xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / window, w / window);
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = base + (oy * window + ky) * w + ox * window + kx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.grad_flag(&[x]);
        Ok(self.push(Tensor { shape: vec![n, c, oh, ow], data: out }, Op::MaxPool { x, argmax }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`, row-major.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor { shape: vec![t.batch(), t.item_len()], data: t.data.clone() };
        let rg = self.grad_flag(&[x]);
        self.push(v, Op::Flatten { x }, rg)
    }

    /// Affine map. `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (&self.value(x).shape, &self.value(w).shape, &self.value(b).shape);
        if xs.len() != 2 {
            return Err(shape_err("linear", "input [N, In]", xs));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear", format!("weight [Out, {}]", xs[1]), ws));
        }
        if bs.as_slice() != [ws[0]] {
            return Err(shape_err("linear", format!("bias [{}]", ws[0]), bs));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = vec![0.0; n * fout];
        for ni in 0..n {
            let xrow = &xv[ni * fin..(ni + 1) * fin];
            for o in 0..fout {
                out[ni * fout + o] = dot(&wv[o * fin..(o + 1) * fin], xrow) + bv[o];
            }
        }
        let rg = self.grad_flag(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![n, fout], data: out }, Op::Linear { x, w, b }, rg))
    }

    /// Joins `[N, Fa]` and `[N, Fb]` along the feature axis, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[0] != tb.shape[0] {
            return Err(shape_err("concat", format!("two [N, F] tensors; first is {:?}", ta.shape), &tb.shape));
        }
        let (n, fa, fb) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = Vec::with_capacity(n * (fa + fb));
        for ni in 0..n {
            data.extend_from_slice(ta.item(ni));
            data.extend_from_slice(tb.item(ni));
        }
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Tensor { shape: vec![n, fa + fb], data }, Op::Concat { a, b }, rg))
    }

    /// Multiplies column `j` of `x: [N, F]` by the constant `scale[j]`.
    pub fn scale_columns(&mut self, x: Var, scale: &[f64]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape.len() != 2 || t.shape[1] != scale.len() {
            return Err(shape_err("scale_columns", format!("[N, {}]", scale.len()), &t.shape));
        }
        let mut v = t.clone();
        v.data.chunks_exact_mut(scale.len()).for_each(|row| row.iter_mut().zip(scale).for_each(|(a, s)| *a *= s));
        let rg = self.grad_flag(&[x]);
        Ok(self.push(v, Op::ScaleColumns { x, scale: scale.to_vec() }, rg))
    }

    /// Propagates `seed` (gradient of the objective with respect to `out`)
    /// back through the tape. A tape can be differentiated once.
    pub fn backward(&mut self, out: Var, seed: Tensor) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        if seed.shape != self.value(out).shape {
            return Err(shape_err("backward", format!("seed shaped like output {:?}", self.value(out).shape), &seed.shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result = Gradients { params: vec![None; self.params.len()], inputs: Vec::new() };

        fn add(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &self.nodes[idx].op {
                Op::Input => result.inputs.push((idx, g)),
                Op::Param(id) => match &mut result.params[id.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Relu { x } => {
                    let xv = &self.value(*x).data;
                    let mut gx = g;
                    gx.data.iter_mut().zip(xv).for_each(|(gi, &xi)| {
                        if xi <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    add(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(&self.value(*x).shape);
                    for (&i, &gi) in argmax.iter().zip(&g.data) {
                        gx.data[i] += gi;
                    }
                    add(&mut grads, *x, gx);
                }
                Op::Flatten { x } => {
                    let shape = self.value(*x).shape.clone();
                    add(&mut grads, *x, Tensor { shape, data: g.data });
                }
                Op::Concat { a, b } => {
                    let (fa, fb) = (self.value(*a).shape[1], self.value(*b).shape[1]);
                    let n = g.shape[0];
                    let (mut ga, mut gb) = (Vec::with_capacity(n * fa), Vec::with_capacity(n * fb));
                    for row in g.data.chunks_exact(fa + fb) {
                        ga.extend_from_slice(&row[..fa]);
                        gb.extend_from_slice(&row[fa..]);
                    }
                    add(&mut grads, *a, Tensor { shape: vec![n, fa], data: ga });
                    add(&mut grads, *b, Tensor { shape: vec![n, fb], data: gb });
                }
                Op::ScaleColumns { x, scale } => {
                    let mut gx = g;
                    gx.data.chunks_exact_mut(scale.len()).for_each(|row| row.iter_mut().zip(scale).for_each(|(a, s)| *a *= s));
                    add(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, fin, fout) = (xt.shape[0], xt.shape[1], wt.shape[0]);
                    if need(w) || need(b) {
                        let mut gw = vec![0.0; fout * fin];
                        let mut gb = vec![0.0; fout];
                        for ni in 0..n {
                            let xrow = &xt.data[ni * fin..(ni + 1) * fin];
                            for o in 0..fout {
                                let go = g.data[ni * fout + o];
                                if go != 0.0 {
                                    axpy(go, xrow, &mut gw[o * fin..(o + 1) * fin]);
                                }
                                gb[o] += go;
                            }
                        }
                        add(&mut grads, *w, Tensor { shape: wt.shape.clone(), data: gw });
                        add(&mut grads, *b, Tensor { shape: vec![fout], data: gb });
                    }
                    if need(x) {
                        let mut gx = vec![0.0; n * fin];
                        for ni in 0..n {
                            let dst = &mut gx[ni * fin..(ni + 1) * fin];
                            for o in 0..fout {
                                let go = g.data[ni * fout + o];
                                if go != 0.0 {
                                    axpy(go, &wt.data[o * fin..(o + 1) * fin], dst);
                                }
                            }
                        }
                        add(&mut grads, *x, Tensor { shape: xt.shape.clone(), data: gx });
                    }
                }
                Op::Conv2d { x, w, b, stride, padding, cols } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, c, h, wd) = (xt.shape[0], xt.shape[1], xt.shape[2], xt.shape[3]);
                    let (o, k) = (wt.shape[0], wt.shape[2]);
                    let (oh, ow) = (g.shape[2], g.shape[3]);
                    let (p, kk) = (oh * ow, c * k * k);
                    if need(w) || need(b) {
                        let mut gw = vec![0.0; o * kk];
                        let mut gb = vec![0.0; o];
                        for ni in 0..n {
                            for oi in 0..o {
                                let grow = &g.data[(ni * o + oi) * p..][..p];
                                let dst = &mut gw[oi * kk..(oi + 1) * kk];
                                for (pi, &go) in grow.iter().enumerate() {
                                    if go != 0.0 {
                                        axpy(go, &cols[(ni * p + pi) * kk..][..kk], dst);
                                    }
                                }
                                gb[oi] += grow.iter().sum::<f64>();
                            }
                        }
                        add(&mut grads, *w, Tensor { shape: wt.shape.clone(), data: gw });
                        add(&mut grads, *b, Tensor { shape: vec![o], data: gb });
                    }
                    if need(x) {
                        let mut gx = vec![0.0; n * c * h * wd];
                        let mut gcol = vec![0.0; kk];
                        for ni in 0..n {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let pi = oy * ow + ox;
                                    gcol.iter_mut().for_each(|v| *v = 0.0);
                                    for oi in 0..o {
                                        let go = g.data[(ni * o + oi) * p + pi];
                                        if go != 0.0 {
                                            axpy(go, &wt.data[oi * kk..(oi + 1) * kk], &mut gcol);
                                        }
                                    }
                                    let img = &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd];
                                    let mut idx = 0;
                                    for ci in 0..c {
                                        for ky in 0..k {
                                            let iy = (oy * stride + ky) as isize - *padding as isize;
                                            for kx in 0..k {
                                                let ix = (ox * stride + kx) as isize - *padding as isize;
                                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                                    img[(ci * h + iy as usize) * wd + ix as usize] += gcol[idx];
                                                }
                                                idx += 1;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        add(&mut grads, *x, Tensor { shape: xt.shape.clone(), data: gx });
                    }
                }
            }
        }
        Ok(result)
    }
}
