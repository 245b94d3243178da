mod common;

use common::*;
use rand::Rng;
use siamese_servo::geometry::Pose;
use siamese_servo::sampler::{sample_offset, SamplingRanges};
use siamese_servo::scene::Image;
use siamese_servo::tensornet::*;

#[test]
fn relu_values_and_derivative() {
    let store = ParamStore::default();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0]), true);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);
    let g = tape.backward(y, Tensor::from_vec(vec![1.0; 3])).unwrap();
    assert_eq!(g.input(x).unwrap().data, vec![0.0, 0.0, 1.0]);
}

#[test]
fn backward_twice_is_rejected() {
    let store = ParamStore::default();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_vec(vec![1.0]), true);
    let y = tape.relu(x);
    tape.backward(y, Tensor::from_vec(vec![1.0])).unwrap();
    assert!(matches!(tape.backward(y, Tensor::from_vec(vec![1.0])), Err(TensorError::BackwardTwice)));
}

#[test]
fn one_by_one_identity_conv_selects_channels() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[2, 3, 4, 5]);
    // output channel o copies input channel sel[o]
    let sel = [2usize, 0];
    let mut w = vec![0.0; 2 * 3];
    for (o, &c) in sel.iter().enumerate() {
        w[o * 3 + c] = 1.0;
    }
    let p = store(vec![Tensor::new(vec![2, 3, 1, 1], w).unwrap(), Tensor::zeros(&[2])]);
    let mut tape = Tape::new(&p);
    let xi = tape.input(x.clone(), false);
    let (wv, bv) = (tape.param(pid(0)), tape.param(pid(1)));
    let y = tape.conv2d(xi, wv, bv, 1, 0).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape, vec![2, 2, 4, 5]);
    for n in 0..2 {
        for (o, &c) in sel.iter().enumerate() {
            assert_eq!(&out.data[(n * 2 + o) * 20..][..20], &x.data[(n * 3 + c) * 20..][..20]);
        }
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let k = [1.0, 0.0, -1.0, 2.0, 0.5, -2.0, 1.0, 3.0, -1.0];
    let mut oracle = vec![0.0; 9];
    for oy in 0..3 {
        for ox in 0..3 {
            let mut s = 0.25;
            for ky in 0..3 {
                for kx in 0..3 {
                    s += x[(oy + ky) * 5 + ox + kx] * k[ky * 3 + kx];
                }
            }
            oracle[oy * 3 + ox] = s;
        }
    }
    let p = store(vec![Tensor::new(vec![1, 1, 3, 3], k.to_vec()).unwrap(), Tensor::from_vec(vec![0.25])]);
    let mut tape = Tape::new(&p);
    let xi = tape.input(Tensor::new(vec![1, 1, 5, 5], x).unwrap(), false);
    let (w, b) = (tape.param(pid(0)), tape.param(pid(1)));
    let y = tape.conv2d(xi, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data, oracle);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let p = store(vec![Tensor::zeros(&[4, 3]), Tensor::zeros(&[4])]);
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor::zeros(&[2, 5]), false);
    let (w, b) = (tape.param(pid(0)), tape.param(pid(1)));
    let msg = tape.linear(x, w, b).unwrap_err().to_string();
    assert!(msg.contains("[Out, 5]") && msg.contains("[4, 3]"), "{msg}");
}

#[test]
fn every_layer_kind_passes_finite_differences() {
    let mut r = rng(2024);
    for kind in LAYER_KINDS {
        for cfg in 0..10 {
            let case = layer_case(kind, &mut r);
            let err = case.max_error(&mut r);
            assert!(err <= 1e-4, "{kind} config {cfg}: relative error {err:e}");
        }
    }
}

#[test]
fn full_model_passes_finite_differences() {
    for cfg in 0..10u64 {
        let mut model = SiameseModel::new(NetworkSpec::desk(), 100 + cfg).unwrap();
        // zero biases put dead units exactly on the relu kink; move off it
        let mut r = rng(500 + cfg);
        for i in 0..model.params.len() {
            if model.params.names[i].ends_with("bias") {
                model.params.get_mut(pid(i)).data.iter_mut().for_each(|v| *v = r.gen_range(-0.05..0.05));
            }
        }
        let (a, b, l) = desk_pairs(cfg, 2);
        let (ra, rb): (Vec<&Image>, Vec<&Image>) = (a.iter().collect(), b.iter().collect());
        let (err, redrawn) = model_gradient_error(&model, &ra, &rb, &l, 2, &mut rng(cfg));
        assert!(err <= 1e-4, "config {cfg}: relative error {err:e}");
        assert!(redrawn <= 4, "config {cfg}: {redrawn} coordinates near a kink");
    }
}

#[test]
fn identical_inputs_give_identical_branch_features() {
    let model = SiameseModel::new(NetworkSpec::desk(), 3).unwrap();
    let (a, _, _) = desk_pairs(1, 1);
    let mut tape = Tape::new(&model.params);
    let bound = model.bind(&mut tape);
    let xa = tape.input(model.image_batch(&[&a[0]]).unwrap(), false);
    let xb = tape.input(model.image_batch(&[&a[0]]).unwrap(), false);
    let fa = model.extract(&mut tape, &bound, xa).unwrap();
    let fb = model.extract(&mut tape, &bound, xb).unwrap();
    assert_eq!(tape.value(fa).data, tape.value(fb).data);
    assert!(tape.value(fa).data.iter().any(|&v| v != 0.0));
}

#[test]
fn swapping_inputs_swaps_concatenated_halves() {
    let model = SiameseModel::new(NetworkSpec::desk(), 3).unwrap();
    let (a, b, _) = desk_pairs(2, 1);
    let head_input = |x: &Image, y: &Image| {
        let mut tape = Tape::new(&model.params);
        let bound = model.bind(&mut tape);
        let xa = tape.input(model.image_batch(&[x]).unwrap(), false);
        let xb = tape.input(model.image_batch(&[y]).unwrap(), false);
        let fa = model.extract(&mut tape, &bound, xa).unwrap();
        let fb = model.extract(&mut tape, &bound, xb).unwrap();
        let (ga, gb) = (tape.flatten(fa), tape.flatten(fb));
        let c = tape.concat(ga, gb).unwrap();
        tape.value(c).data.clone()
    };
    let ab = head_input(&a[0], &b[0]);
    let ba = head_input(&b[0], &a[0]);
    let h = ab.len() / 2;
    assert_eq!(h, 192);
    assert_eq!(&ab[..h], &ba[h..]);
    assert_eq!(&ab[h..], &ba[..h]);
}

#[test]
fn shared_gradient_is_sum_of_branch_gradients() {
    let model = SiameseModel::new(NetworkSpec::desk(), 8).unwrap();
    let (a, b, l) = desk_pairs(5, 2);
    let (ra, rb): (Vec<&Image>, Vec<&Image>) = (a.iter().collect(), b.iter().collect());
    let feats = |imgs: &[&Image]| {
        let mut tape = Tape::new(&model.params);
        let bound = model.bind(&mut tape);
        let x = tape.input(model.image_batch(imgs).unwrap(), false);
        let f = model.extract(&mut tape, &bound, x).unwrap();
        tape.value(f).clone()
    };
    // both branches live
    let joint = {
        let mut tape = Tape::new(&model.params);
        let bound = model.bind(&mut tape);
        let xa = tape.input(model.image_batch(&ra).unwrap(), false);
        let xb = tape.input(model.image_batch(&rb).unwrap(), false);
        let fa = model.extract(&mut tape, &bound, xa).unwrap();
        let fb = model.extract(&mut tape, &bound, xb).unwrap();
        let out = model.head(&mut tape, &bound, fa, fb).unwrap();
        let (_, seed) = batch_loss(tape.value(out), &l, 0.99).unwrap();
        tape.backward(out, seed).unwrap()
    };
    // one branch live, the other fed in as a constant
    let single = |live_a: bool| {
        let mut tape = Tape::new(&model.params);
        let bound = model.bind(&mut tape);
        let (fa, fb) = if live_a {
            let xa = tape.input(model.image_batch(&ra).unwrap(), false);
            let fa = model.extract(&mut tape, &bound, xa).unwrap();
            (fa, tape.input(feats(&rb), false))
        } else {
            let xb = tape.input(model.image_batch(&rb).unwrap(), false);
            let fb = model.extract(&mut tape, &bound, xb).unwrap();
            (tape.input(feats(&ra), false), fb)
        };
        let out = model.head(&mut tape, &bound, fa, fb).unwrap();
        let (_, seed) = batch_loss(tape.value(out), &l, 0.99).unwrap();
        tape.backward(out, seed).unwrap()
    };
    let (ga, gb) = (single(true), single(false));
    let extractor_tensors = model.params.names.iter().filter(|n| !n.starts_with("classifier")).count();
    assert_eq!(extractor_tensors, 8);
    for i in 0..extractor_tensors {
        let id = ParamId(i);
        let j = joint.param(id).unwrap();
        let mut sum = ga.param(id).unwrap().clone();
        sum.add_assign(gb.param(id).unwrap());
        for (x, y) in j.data.iter().zip(&sum.data) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6), "{}: {x} vs {y}", model.params.names[i]);
        }
    }
}

#[test]
fn init_mean_is_centered() {
    let spec = NetworkSpec::desk();
    let p = init_uniform(&spec, 77).unwrap();
    // every weight scaled by its layer bound is one draw from U(-1, 1)
    let mut draws = Vec::new();
    for (name, t) in p.names.iter().zip(&p.tensors) {
        if name.ends_with("weight") {
            let fan_in = t.len() / t.shape[0];
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(t.data.iter().all(|w| w.abs() <= bound), "{name}");
            draws.extend(t.data.iter().map(|w| w / bound));
        }
    }
    let n = draws.len() as f64;
    assert!(n >= 1e5);
    let mean = draws.iter().sum::<f64>() / n;
    let sigma = 1.0 / 3f64.sqrt();
    assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "{mean}");
}

#[test]
fn short_training_run_records_metrics() {
    let (a, b, _) = desk_pairs(9, 5);
    let poses: Vec<Pose> = {
        let mut r = rng(9);
        (0..10).map(|_| sample_offset(&mut r, &SamplingRanges::default())).collect()
    };
    let samples: Vec<siamese_servo::sampler::Sample> = a
        .into_iter()
        .chain(b)
        .zip(poses)
        .map(|(image, t_d2e)| siamese_servo::sampler::Sample { image, t_d2e })
        .collect();
    let (train_s, val_s) = samples.split_at(8);
    let cfg = TrainConfig { epochs: 1, pairs_per_epoch: 64, batch_size: 16, seed: 1, ..TrainConfig::default() };
    let model = SiameseModel::new(NetworkSpec::desk(), 1).unwrap();
    let data = TrainData { train: vec![train_s], val: vec![val_s] };
    let (best, history) = train(model.clone(), &data, &cfg).unwrap();
    assert_eq!(history.len(), 1);
    assert!(history[0].train_loss.is_finite() && history[0].val.loss.is_finite());
    assert_eq!(history[0].val.pairs, 4);
    assert_ne!(best.params, model.params);
    // same seed, same trajectory
    let (again, _) = train(model, &data, &cfg).unwrap();
    assert_eq!(again.params, best.params);
}

#[test]
fn output_scale_multiplies_head_columns() {
    let mut spec = NetworkSpec::desk();
    let plain = SiameseModel::new(spec.clone(), 4).unwrap();
    spec.output_scale = Some(vec![0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 2.0]);
    let scaled = SiameseModel::from_params(spec.clone(), plain.params.clone()).unwrap();
    let (a, b, _) = desk_pairs(3, 1);
    let (p, s) = (plain.predict(&a[0], &b[0]).unwrap().to_array(), scaled.predict(&a[0], &b[0]).unwrap().to_array());
    let k = spec.output_scale.as_ref().unwrap();
    for j in 0..OUTPUTS {
        assert!((s[j] - k[j] * p[j]).abs() <= 1e-15 * p[j].abs().max(1.0));
    }
    spec.output_scale = Some(vec![1.0; 6]);
    assert!(spec.validate().is_err());
}
