use std::time::Instant;

use ien::dataset::{build_dataset, DatasetConfig};
use ien::gradcheck::{check_graph_gradient, finite_difference_check};
use ien::graph::Var;
use ien::layers::{convlstm_cell, ConvLstmVars};
use ien::model::{checkpoint_bytes, forward, init_params, IenConfig};
use ien::motion::RenderMode;
use ien::optim::ParamSet;
use ien::scene::{apply_detector_noise, generate_scene, render_affordance_channels, DetectorNoise, Grid};
use ien::trainer::{evaluate_loss, DatasetWindows};
use ien::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn convlstm_two_step_rollout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = [normal(&mut rng, &[1, 4, 4], 1.0), normal(&mut rng, &[1, 4, 4], 1.0)];
    let weights = [
        normal(&mut rng, &[8, 1, 3, 3], 0.4),
        normal(&mut rng, &[8, 2, 3, 3], 0.4),
        normal(&mut rng, &[8], 0.4),
    ];
    let proj = normal(&mut rng, &[2, 4, 4], 1.0);
    for which in 0..3 {
        let err = check_graph_gradient(&weights[which], 1e-5, None, |g, p| {
            let v: Vec<Var> =
                (0..3).map(|i| if i == which { p } else { g.constant(weights[i].clone()) }).collect();
            let w = ConvLstmVars { input_kernel: v[0], hidden_kernel: v[1], bias: v[2] };
            let mut h = g.constant(Tensor::zeros(&[2, 4, 4]));
            let mut c = g.constant(Tensor::zeros(&[2, 4, 4]));
            for x in &xs {
                let x = g.constant(x.clone());
                (h, c) = convlstm_cell(g, x, h, c, &w)?;
            }
            g.weighted_sum(h, proj.clone())
        })
        .unwrap();
        assert!(err < 1e-4, "weight {which}: {err}");
    }
}

#[test]
fn upsample_then_average_pool_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = normal(&mut rng, &[2, 4, 4], 1.0);
    let up = ien::ops::upsample2_forward(x.data(), 2, 4, 4);
    let mut pooled = vec![0.0; 2 * 4 * 4];
    for c in 0..2 {
        for y in 0..4 {
            for xx in 0..4 {
                let at = |dy: usize, dx: usize| up[(c * 8 + 2 * y + dy) * 8 + 2 * xx + dx];
                pooled[(c * 4 + y) * 4 + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    assert_eq!(pooled, x.data());
}

#[test]
fn softmax_jacobian_vector_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normal(&mut rng, &[1, 16, 16], 1.0);
    let v = normal(&mut rng, &[1, 16, 16], 1.0);
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let s = g.softmax_spatial(p).unwrap();
    let total: f64 = g.value(s).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    let l = g.weighted_sum(s, v.clone()).unwrap();
    let grads = g.backward(l).unwrap();
    let err = finite_difference_check(&x, grads.get(p).unwrap(), 1e-5, None, |t| {
        let s = ien::ops::softmax(t.data());
        s.iter().zip(v.data()).map(|(a, b)| a * b).sum()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_softmax_kl_composite_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = normal(&mut rng, &[2, 6, 6], 1.0);
    let k = normal(&mut rng, &[1, 2, 3, 3], 0.5);
    let raw = Tensor::from_fn(&[1, 6, 6], |_| rng.random_range(0.01..1.0));
    let z = raw.sum();
    let target = Tensor::from_fn(&[1, 6, 6], |i| raw.data()[i] / z);
    let err = check_graph_gradient(&k, 1e-5, None, |g, p| {
        let xi = g.constant(x.clone());
        let y = g.conv2d(xi, p, None, 1, 1)?;
        let s = g.softmax_spatial(y)?;
        let t = g.constant(target.clone());
        g.kl_divergence(t, s, 1e-8)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn target_index_is_uniform() {
    let mut counts = [0usize; 3];
    for seed in 0..3000 {
        counts[generate_scene(3, Grid::new(64, 64), seed).unwrap().target_index] += 1;
    }
    for c in counts {
        assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
    }
}

#[test]
fn mask_dropout_keeps_seventy_percent() {
    let scene = generate_scene(2, Grid::new(64, 64), 11).unwrap();
    let clean = render_affordance_channels(&scene);
    let plane = 64 * 64;
    let noise = DetectorNoise { mask_dropout: 0.3, boundary_jitter: 0, false_negative: 0.0 };
    let object_pixels = |t: &Tensor<f32>| t.data()[..3 * plane].iter().filter(|&&v| v != 0.0).count();
    let before = object_pixels(&clean);
    let kept: usize = (0..100)
        .map(|seed| object_pixels(&apply_detector_noise(&clean, &scene, &noise, seed).unwrap().0))
        .sum();
    let fraction = kept as f64 / (100 * before) as f64;
    assert!((fraction - 0.7).abs() <= 0.03, "{fraction}");
}

#[test]
fn small_desk_build_is_fast() {
    let started = Instant::now();
    let ds = build_dataset(&DatasetConfig::new(8, RenderMode::DepthLike, 7)).unwrap();
    assert_eq!(ds.window_count(), 400);
    assert!(started.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn fresh_network_is_near_uniform() {
    let cfg = IenConfig::reference(1);
    let g = cfg.grid;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: ParamSet<f32> = init_params(&cfg, seed).unwrap();
        let aff = Tensor::from_fn(&[cfg.affordance_channels, g.height, g.width], |_| {
            if rng.random_bool(0.3) { 1.0 } else { 0.0 }
        });
        let seq = Tensor::from_fn(&[2, 1, g.height, g.width], |_| rng.random::<f32>());
        let out = forward(&params, &cfg, &aff, &seq).unwrap();
        let max = out.data().iter().copied().fold(f32::MIN, f32::max);
        let min = out.data().iter().copied().fold(f32::MAX, f32::min);
        assert!(max / min < 10.0, "seed {seed}: {}", max / min);
    }
}

#[test]
fn recurrent_state_accumulates() {
    let cfg = IenConfig::tiny(1);
    let g = cfg.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params: ParamSet<f32> = init_params(&cfg, 5).unwrap();
    let aff = Tensor::zeros(&[cfg.affordance_channels, g.height, g.width]);
    let seq = Tensor::from_fn(&[10, 1, g.height, g.width], |_| rng.random::<f32>());
    let one = forward(&params, &cfg, &aff, &seq.slice_outer(0, 1).unwrap()).unwrap();
    let ten = forward(&params, &cfg, &aff, &seq).unwrap();
    assert_ne!(one, ten);
}

#[test]
fn reference_checkpoint_is_small() {
    let cfg = IenConfig::reference(3);
    let params: ParamSet<f32> = init_params(&cfg, 0).unwrap();
    assert!(checkpoint_bytes(&params, &cfg).unwrap().len() < 20 * 1024 * 1024);
}

#[test]
fn ablated_network_ignores_affordances() {
    let cfg = IenConfig { use_affordance: false, ..IenConfig::tiny(1) };
    let g = cfg.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params: ParamSet<f64> = init_params(&cfg, 6).unwrap();
    let seq = Tensor::from_fn(&[3, 1, g.height, g.width], |_| rng.random::<f64>());
    let a = Tensor::from_fn(&[cfg.affordance_channels, g.height, g.width], |_| rng.random::<f64>());
    let b = Tensor::from_fn(&[cfg.affordance_channels, g.height, g.width], |_| rng.random::<f64>());
    assert_eq!(forward(&params, &cfg, &a, &seq).unwrap(), forward(&params, &cfg, &b, &seq).unwrap());

    let proj = Tensor::from_fn(&[1, g.height, g.width], |_| rng.random::<f64>());
    let mut graph = Graph::new();
    let vars = ien::model::IenVars::register(&mut graph, &params, false);
    let av = graph.param(a);
    let out = ien::model::forward_graph(&mut graph, &vars, &cfg, av, &seq).unwrap();
    let loss = graph.weighted_sum(out, proj).unwrap();
    let grads = graph.backward(loss).unwrap();
    assert!(grads.get(av).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let mut data = DatasetConfig::new(1, RenderMode::DepthLike, 8);
    data.grid = Grid::new(32, 32);
    data.sigma = 2.0;
    let ds = build_dataset(&data).unwrap();
    let cfg = IenConfig { grid: data.grid, ..IenConfig::tiny(1) };
    let params: ParamSet<f32> = init_params(&cfg, 8).unwrap();
    let before = checkpoint_bytes(&params, &cfg).unwrap();
    let loss = evaluate_loss(&params, &cfg, &DatasetWindows::all(&ds), 1e-8).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(checkpoint_bytes(&params, &cfg).unwrap(), before);
}
