mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfuda_core::losses::{softmax_backward, total_adaptation_loss, total_adaptation_loss_grad, EntropyMode, LossConfig};
use sfuda_core::model::{
    adapt_bn_statistics, build_model, forward_softmax, logits_to_probmaps, stacked_grad_to_tensor, Adam, AdamConfig,
    BnAdaptConfig, BnMode, ModelDescriptor, SegModel, Tensor,
};
use sfuda_core::{Error, ParameterSnapshot, ProbMap};

use common::{random_labels, relative_error};

fn batch(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor<f32> {
    Tensor::from_vec(n, 1, side, side, (0..n * side * side).map(|_| rng.random_range(0.0..1.0)).collect())
}

#[test]
fn default_network_size() {
    let model = build_model(ModelDescriptor::default()).unwrap();
    assert_eq!(model.parameter_count(), 48_931);
    assert_eq!(model.classes(), 3);
}

#[test]
fn forward_is_a_pure_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = build_model(ModelDescriptor::default()).unwrap();
    let x = batch(&mut rng, 2, 16);
    let a = model.forward(&x, BnMode::Running).unwrap();
    let b = model.forward(&x, BnMode::Running).unwrap();
    assert_eq!((a.n, a.c, a.h, a.w), (2, 3, 16, 16));
    assert_eq!(a.data, b.data);
    let p = forward_softmax(&model, &Tensor::from_vec(1, 1, 16, 16, x.sample(0).to_vec()), BnMode::Running).unwrap();
    for lane in p.values().lanes(ndarray::Axis(2)) {
        assert!((lane.sum() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn rejects_incompatible_inputs() {
    let model = build_model(ModelDescriptor::default()).unwrap();
    let odd = Tensor::<f32>::zeros(1, 1, 10, 10);
    assert!(matches!(model.forward(&odd, BnMode::Running), Err(Error::Argument(_))));
    let channels = Tensor::<f32>::zeros(1, 2, 16, 16);
    assert!(matches!(model.forward(&channels, BnMode::Running), Err(Error::Argument(_))));
}

#[test]
fn same_seed_same_weights() {
    let d = ModelDescriptor { seed: 11, ..ModelDescriptor::default() };
    assert_eq!(build_model(d.clone()).unwrap().snapshot(), build_model(d).unwrap().snapshot());
    let other = build_model(ModelDescriptor { seed: 12, ..ModelDescriptor::default() }).unwrap();
    assert_ne!(other.snapshot(), build_model(ModelDescriptor { seed: 11, ..ModelDescriptor::default() }).unwrap().snapshot());
}

#[test]
fn bn_statistics_follow_the_moving_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model: SegModel<f64> = build_model(ModelDescriptor { channels: vec![4, 8], ..ModelDescriptor::default() })
        .unwrap()
        .cast();
    let x = batch(&mut rng, 3, 8);
    let x = Tensor::from_vec(x.n, x.c, x.h, x.w, x.data.iter().map(|&v| v as f64).collect());
    let m = 0.5;
    let cfg = BnAdaptConfig { momentum: m, passes: 2, ..BnAdaptConfig::default() };
    let adapted = adapt_bn_statistics(&model, std::slice::from_ref(&x), &cfg).unwrap();

    // First layer: its input does not depend on the statistics, so its batch
    // moments are the same on both passes and the EMA has a closed form.
    let (_, cache) = model.forward_with_cache(&x, BnMode::Batch).unwrap();
    let (mean, var) = cache.batch_moments()[0].unwrap().clone();
    let keep = (1.0 - m) * (1.0 - m);
    let (s0, s1) = (&model.stats()[0], &adapted.stats()[0]);
    for c in 0..mean.len() {
        assert!((s1.mean[c] - (keep * s0.mean[c] + (1.0 - keep) * mean[c])).abs() < 1e-12);
        assert!((s1.var[c] - (keep * s0.var[c] + (1.0 - keep) * var[c])).abs() < 1e-12);
    }
    // Batch-mode moments never depend on the running statistics, so a second
    // run of two passes moves every layer the same way.
    let again = adapt_bn_statistics(&model, std::slice::from_ref(&x), &cfg).unwrap();
    assert_eq!(again.stats()[1].mean, adapted.stats()[1].mean);
}

#[test]
fn bn_adaptation_leaves_parameters_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = build_model(ModelDescriptor::default()).unwrap();
    let adapted = adapt_bn_statistics(&model, &[batch(&mut rng, 2, 16), batch(&mut rng, 2, 16)], &BnAdaptConfig::default())
        .unwrap();
    assert_eq!(model.snapshot(), adapted.snapshot());
    assert_ne!(model.stats()[0].mean, adapted.stats()[0].mean);
    assert!(adapt_bn_statistics(&model, &[], &BnAdaptConfig::default()).is_err());
    let bad = BnAdaptConfig { momentum: 0.0, ..BnAdaptConfig::default() };
    assert!(matches!(adapt_bn_statistics(&model, &[batch(&mut rng, 1, 16)], &bad), Err(Error::Config(_))));
}

#[test]
fn gamma_beta_entropy_steps_touch_only_bn_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = build_model(ModelDescriptor::default()).unwrap();
    let cfg = BnAdaptConfig { train_gamma_beta: true, entropy_steps: 3, learning_rate: 1e-2, ..BnAdaptConfig::default() };
    let adapted = adapt_bn_statistics(&model, &[batch(&mut rng, 2, 16)], &cfg).unwrap();
    let affine = model.bn_affine_indices();
    let mut moved = 0;
    for (i, (a, b)) in model.params().iter().zip(adapted.params()).enumerate() {
        if affine.contains(&i) {
            moved += (a.values != b.values) as usize;
        } else {
            assert_eq!(a.values, b.values, "{} changed", a.name);
        }
    }
    assert!(moved > 0);
}

/// Single-precision check of the total objective through a two-stage network.
#[test]
fn micro_model_gradient_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = build_model(ModelDescriptor { channels: vec![2, 3], classes: 2, seed: 9, ..ModelDescriptor::default() })
        .unwrap();
    let x = batch(&mut rng, 1, 4);
    let mut anchor = model.snapshot().into_entries();
    for t in &mut anchor {
        for v in &mut t.values {
            *v += if rng.random_bool(0.5) { 0.05 } else { -0.05 };
        }
    }
    let anchor = ParameterSnapshot::new(anchor).unwrap();
    let y = random_labels(&mut rng, 4, 4, 2, 1.0);
    let cfg = LossConfig {
        use_ei: true,
        entropy_mode: EntropyMode::Max,
        entropy_coefficient: 0.5,
        use_wc: true,
        wc_coefficient: 0.01,
        wc_normalized: false,
    };
    let loss = |m: &SegModel<f32>| {
        let p = ProbMap::stack(&logits_to_probmaps(&m.forward(&x, BnMode::Running).unwrap()).unwrap()).unwrap();
        total_adaptation_loss(&p, &y, m.params(), &anchor, &cfg).unwrap().total
    };
    let (logits, cache) = model.forward_with_cache(&x, BnMode::Running).unwrap();
    let p = ProbMap::stack(&logits_to_probmaps(&logits).unwrap()).unwrap();
    let (_, g) = total_adaptation_loss_grad(&p, &y, model.params(), &anchor, &cfg).unwrap();
    let mut grads = model.backward(&cache, stacked_grad_to_tensor(&softmax_backward(&p, &g.probs), 1));
    for (a, b) in grads.iter_mut().zip(&g.params) {
        for (u, v) in a.iter_mut().zip(b) {
            *u += v;
        }
    }
    let h = 1e-2f32;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let t = rng.random_range(0..grads.len());
        let i = rng.random_range(0..grads[t].len());
        let at = |d: f32| {
            let mut m = model.clone();
            m.param_values_mut().nth(t).unwrap()[i] += d;
            loss(&m)
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h as f64);
        worst = worst.max(relative_error(grads[t][i] as f64, numeric, 1e-2));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn adam_updates_only_selected_tensors() {
    let model = build_model(ModelDescriptor { channels: vec![2, 3], ..ModelDescriptor::default() }).unwrap();
    let mut params = model.params().to_vec();
    let grads: Vec<Vec<f32>> = params.iter().map(|p| vec![1.0; p.values.len()]).collect();
    let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..AdamConfig::default() }, &params).only(&[0]);
    opt.step(&mut params, &grads);
    assert_ne!(params[0].values, model.params()[0].values);
    assert_eq!(params[1..], model.params()[1..]);
}
