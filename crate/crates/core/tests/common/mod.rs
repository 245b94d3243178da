#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamese_servo::geometry::{relative_label, Pose};
use siamese_servo::sampler::{base_placements, placement_scene, sample_offset, SamplingRanges, Station};
use siamese_servo::scene::{CameraIntrinsics, ConnectorSpec, Image};
use siamese_servo::tensornet::{batch_loss, ParamId, ParamStore, SiameseModel, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// A single-op graph: inputs (all differentiated), parameters and a builder.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub params: ParamStore,
    pub build: fn(&mut Tape, &[Var], &[Var]) -> Var,
}

impl OpCase {
    fn objective(&self, inputs: &[Tensor], params: &ParamStore, weights: &[f64]) -> f64 {
        let mut tape = Tape::new(params);
        let iv: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
        let pv: Vec<Var> = params.ids().map(|id| tape.param(id)).collect();
        let out = (self.build)(&mut tape, &iv, &pv);
        tape.value(out).data.iter().zip(weights).map(|(a, b)| a * b).sum()
    }

    /// Largest relative error over every input and parameter coordinate.
    pub fn max_error(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mut tape = Tape::new(&self.params);
        let iv: Vec<Var> = self.inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
        let pv: Vec<Var> = self.params.ids().map(|id| tape.param(id)).collect();
        let out = (self.build)(&mut tape, &iv, &pv);
        let shape = tape.value(out).shape.clone();
        let weights = random_tensor(rng, &shape);
        let grads = tape.backward(out, weights.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for (k, t) in self.inputs.iter().enumerate() {
            let g = grads.input(iv[k]).expect("input gradient");
            for i in 0..t.len() {
                let h = step(t.data[i]);
                let (mut p, mut m) = (self.inputs.clone(), self.inputs.clone());
                p[k].data[i] += h;
                m[k].data[i] -= h;
                let fd = (self.objective(&p, &self.params, &weights.data) - self.objective(&m, &self.params, &weights.data)) / (2.0 * h);
                worst = worst.max(rel_err(g.data[i], fd));
            }
        }
        for id in self.params.ids() {
            let g = grads.param(id).expect("param gradient");
            for i in 0..self.params.get(id).len() {
                let h = step(self.params.get(id).data[i]);
                let (mut p, mut m) = (self.params.clone(), self.params.clone());
                p.get_mut(id).data[i] += h;
                m.get_mut(id).data[i] -= h;
                let fd = (self.objective(&self.inputs, &p, &weights.data) - self.objective(&self.inputs, &m, &weights.data)) / (2.0 * h);
                worst = worst.max(rel_err(g.data[i], fd));
            }
        }
        worst
    }
}

/// Loss of the full Siamese model on one batch of image pairs.
pub fn model_loss(model: &SiameseModel, params: &ParamStore, a: &[&Image], b: &[&Image], labels: &[Pose]) -> f64 {
    let mut tape = Tape::new(params);
    let bound = model.bind(&mut tape);
    let xa = tape.input(model.image_batch(a).unwrap(), false);
    let xb = tape.input(model.image_batch(b).unwrap(), false);
    let fa = model.extract(&mut tape, &bound, xa).unwrap();
    let fb = model.extract(&mut tape, &bound, xb).unwrap();
    let out = model.head(&mut tape, &bound, fa, fb).unwrap();
    batch_loss(tape.value(out), labels, 0.99).unwrap().0
}

/// Analytic-vs-numeric check of the full model on `per_tensor` sampled
/// coordinates of every parameter tensor. A coordinate whose central
/// differences at `h` and `h/2` disagree has a kink inside the interval and is
/// redrawn. Returns the worst relative error and the number of redraws.
pub fn model_gradient_error(model: &SiameseModel, a: &[&Image], b: &[&Image], labels: &[Pose], per_tensor: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let mut tape = Tape::new(&model.params);
    let bound = model.bind(&mut tape);
    let xa = tape.input(model.image_batch(a).unwrap(), false);
    let xb = tape.input(model.image_batch(b).unwrap(), false);
    let fa = model.extract(&mut tape, &bound, xa).unwrap();
    let fb = model.extract(&mut tape, &bound, xb).unwrap();
    let out = model.head(&mut tape, &bound, fa, fb).unwrap();
    let (_, seed) = batch_loss(tape.value(out), labels, 0.99).unwrap();
    let grads = tape.backward(out, seed).unwrap();
    let fd = |id: ParamId, i: usize, h: f64| {
        let (mut p, mut m) = (model.params.clone(), model.params.clone());
        p.get_mut(id).data[i] += h;
        m.get_mut(id).data[i] -= h;
        (model_loss(model, &p, a, b, labels) - model_loss(model, &m, a, b, labels)) / (2.0 * h)
    };
    let (mut worst, mut redrawn) = (0.0f64, 0);
    for id in model.params.ids() {
        let g = grads.param(id).unwrap();
        let n = model.params.get(id).len();
        let mut checked = 0;
        while checked < per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let h = step(model.params.get(id).data[i]);
            let (d1, d2) = (fd(id, i, h), fd(id, i, h / 2.0));
            if rel_err(d1, d2) > 1e-4 {
                redrawn += 1;
                continue;
            }
            checked += 1;
            worst = worst.max(rel_err(g.data[i], d1));
        }
    }
    (worst, redrawn)
}

pub fn store(tensors: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::default();
    for (i, t) in tensors.into_iter().enumerate() {
        s.push(format!("p{i}"), t);
    }
    s
}

pub fn pid(i: usize) -> ParamId {
    ParamId(i)
}

/// One random configuration per layer kind, keyed by name.
pub fn layer_case(kind: &str, rng: &mut ChaCha8Rng) -> OpCase {
    match kind {
        "conv2d" => {
            let (n, c, o, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(k..=6), rng.gen_range(k..=6));
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let x = random_tensor(rng, &[n, c, h, w]);
            let p = store(vec![random_tensor(rng, &[o, c, k, k]), random_tensor(rng, &[o])]);
            let build: fn(&mut Tape, &[Var], &[Var]) -> Var = match (stride, pad) {
                (1, 0) => |t, i, p| t.conv2d(i[0], p[0], p[1], 1, 0).unwrap(),
                (1, _) => |t, i, p| t.conv2d(i[0], p[0], p[1], 1, 1).unwrap(),
                (_, 0) => |t, i, p| t.conv2d(i[0], p[0], p[1], 2, 0).unwrap(),
                _ => |t, i, p| t.conv2d(i[0], p[0], p[1], 2, 1).unwrap(),
            };
            OpCase { inputs: vec![x], params: p, build }
        }
        "relu" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=6)];
            let mut x = random_tensor(rng, &shape);
            // keep clear of the kink so the numeric derivative is defined
            x.data.iter_mut().for_each(|v| *v += 0.01f64.copysign(*v));
            OpCase { inputs: vec![x], params: store(vec![]), build: |t, i, _| t.relu(i[0]) }
        }
        "maxpool" => {
            let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(2..=7), rng.gen_range(2..=7));
            let x = random_tensor(rng, &[n, c, h, w]);
            let build: fn(&mut Tape, &[Var], &[Var]) -> Var =
                if h.min(w) >= 3 && rng.gen_bool(0.5) { |t, i, _| t.maxpool(i[0], 3).unwrap() } else { |t, i, _| t.maxpool(i[0], 2).unwrap() };
            OpCase { inputs: vec![x], params: store(vec![]), build }
        }
        "flatten" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            let x = random_tensor(rng, &shape);
            OpCase { inputs: vec![x], params: store(vec![]), build: |t, i, _| t.flatten(i[0]) }
        }
        "linear" => {
            let (n, fin, fout) = (rng.gen_range(1..=4), rng.gen_range(1..=9), rng.gen_range(1..=7));
            let x = random_tensor(rng, &[n, fin]);
            let p = store(vec![random_tensor(rng, &[fout, fin]), random_tensor(rng, &[fout])]);
            OpCase { inputs: vec![x], params: p, build: |t, i, p| t.linear(i[0], p[0], p[1]).unwrap() }
        }
        "concat" => {
            let n = rng.gen_range(1..=3);
            let (ka, kb) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let a = random_tensor(rng, &[n, ka]);
            let b = random_tensor(rng, &[n, kb]);
            OpCase { inputs: vec![a, b], params: store(vec![]), build: |t, i, _| t.concat(i[0], i[1]).unwrap() }
        }
        "scale_columns" => {
            let n = rng.gen_range(1..=4);
            let x = random_tensor(rng, &[n, 7]);
            OpCase { inputs: vec![x], params: store(vec![]), build: |t, i, _| t.scale_columns(i[0], &[0.1, 0.1, 0.1, 1.0, 2.0, -0.5, 1.0]).unwrap() }
        }
        other => panic!("unknown layer kind {other}"),
    }
}

pub const LAYER_KINDS: [&str; 7] = ["conv2d", "relu", "maxpool", "flatten", "linear", "concat", "scale_columns"];

/// `n` random in-range view pairs of one desk station with their labels.
pub fn desk_pairs(seed: u64, n: usize) -> (Vec<Image>, Vec<Image>, Vec<Pose>) {
    let spec = ConnectorSpec::builtin("B2").unwrap();
    let st = Station::new(placement_scene(&spec, &base_placements()[3]), CameraIntrinsics::default());
    let mut r = rng(seed);
    let (mut a, mut b, mut l) = (vec![], vec![], vec![]);
    for _ in 0..n {
        let (pa, pb) = (sample_offset(&mut r, &SamplingRanges::default()), sample_offset(&mut r, &SamplingRanges::default()));
        a.push(st.render(pa));
        b.push(st.render(pb));
        l.push(relative_label(pa, pb));
    }
    (a, b, l)
}
