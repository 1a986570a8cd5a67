//! End-to-end finite-difference check of the PointNet loss gradient.

use onh_core::autograd::Graph;
use onh_core::pointnet::{forward, init_params, Mode, ModelParams, PointNetConfig};
use onh_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(config: &PointNetConfig, b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for _ in 0..b * config.s_points {
        for _ in 0..3 {
            data.push(rng.random_range(-1.0..1.0));
        }
        let class = rng.random_range(0..8);
        data.extend((0..8).map(|c| if c == class { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[b, config.s_points, 11], data).unwrap()
}

fn loss(params: &ModelParams<f64>, config: &PointNetConfig, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let pass = forward(&mut g, params, config, x, Mode::Train, 17).unwrap();
    let ce = g.softmax_cross_entropy(pass.logits, labels).unwrap();
    let reg = g.scale(pass.ortho_penalty, config.ortho_weight);
    let total = g.add(ce, reg).unwrap();
    g.value(total).data()[0]
}

#[test]
fn tiny_pointnet_gradients_match_central_differences() {
    let config = PointNetConfig::tiny();
    let mut params: ModelParams<f64> = init_params(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, t) in params.iter_mut() {
        if ModelParams::<f64>::is_trainable(name) {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = batch(&config, 4, 5);
    let labels = [0usize, 1, 1, 0];

    let mut g = Graph::new();
    let pass = forward(&mut g, &params, &config, &x, Mode::Train, 17).unwrap();
    let ce = g.softmax_cross_entropy(pass.logits, &labels).unwrap();
    let reg = g.scale(pass.ortho_penalty, config.ortho_weight);
    let total = g.add(ce, reg).unwrap();
    g.backward(total).unwrap();

    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, var) in &pass.params {
        let analytic = g.grad(*var).unwrap();
        for i in 0..analytic.numel() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let up = loss(&p, &config, &x, &labels);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = loss(&p, &config, &x, &labels);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            // structurally zero gradients come back as ~1e-9 of rounding noise
            let scale = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / scale;
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
            checked += 1;
        }
    }
    assert_eq!(checked, params.trainable_count());
    eprintln!("checked {checked} gradients, worst relative error {worst:.2e}");
}
