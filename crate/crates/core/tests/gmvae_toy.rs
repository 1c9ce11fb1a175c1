//! One-dimensional GMVAE with hand-set linear networks, checked against a
//! direct evaluation of each bound term.

use ndarray::{array, Array2};
use osr_core::gmvae::{ElboNoise, ElboWeights, GmvaeConfig, GmvaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.8378770664093453;

fn log_normal(x: f64, mean: f64, log_var: f64) -> f64 {
    -0.5 * (LN_2PI + log_var + (x - mean).powi(2) / log_var.exp())
}

/// Linear networks: `μ_z = 0.8x + 0.1`, `lv_z = −0.4x − 0.2`;
/// `μ_w = 0.5x + 0.3y₁ − 0.1`, `lv_w = 0.2x − 0.6y₀ + 0.1`;
/// per-component prior means `m_j = a_j w + b_j`, log-variances
/// `l_j = c_j w + d_j`; decoder `o = 1.5z − 0.25`.
fn toy(components: Vec<usize>) -> GmvaeModel {
    let m: usize = components.iter().sum();
    let config = GmvaeConfig {
        components,
        dim_z: 1,
        dim_w: 1,
        phi_z_hidden: Vec::new(),
        beta_hidden: Vec::new(),
        ..GmvaeConfig::with_defaults(2, 1)
    };
    let mut model = GmvaeModel::new(config, vec![0, 1], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let set = |net: &mut osr_core::nn::Mlp, w: Array2<f64>, b: Vec<f64>| {
        assert_eq!(net.params.layers.len(), 1);
        net.params.layers[0].weight = w;
        net.params.layers[0].bias = b.into();
    };
    set(&mut model.phi_z, array![[0.8, -0.4]], vec![0.1, -0.2]);
    set(&mut model.phi_w, array![[0.5, 0.2], [0.0, -0.6], [0.3, 0.0]], vec![-0.1, 0.1]);
    let (a, b, c, d) = prior_coefficients();
    let mut w = Array2::zeros((1, 2 * m));
    let mut bias = vec![0.0; 2 * m];
    for j in 0..m {
        w[[0, j]] = a[j];
        bias[j] = b[j];
        w[[0, m + j]] = c[j];
        bias[m + j] = d[j];
    }
    set(&mut model.beta, w, bias);
    set(&mut model.theta, array![[1.5]], vec![-0.25]);
    model
}

fn prior_coefficients() -> ([f64; 4], [f64; 4], [f64; 4], [f64; 4]) {
    (
        [1.0, -0.5, 0.7, 0.2],
        [-1.0, 1.2, 0.4, -0.3],
        [0.3, -0.2, 0.1, 0.5],
        [0.1, -0.4, 0.2, 0.0],
    )
}

struct Hand {
    reconstruction: f64,
    latent_covering: f64,
    w_prior: f64,
    v_prior: f64,
}

fn hand_terms(components: &[usize], x: &[f64], y: &[usize], ez: &[f64], ew: &[f64]) -> Hand {
    let (a, b, c, d) = prior_coefficients();
    let n = x.len() as f64;
    let mut h = Hand {
        reconstruction: 0.0,
        latent_covering: 0.0,
        w_prior: 0.0,
        v_prior: 0.0,
    };
    for i in 0..x.len() {
        let (xi, yi) = (x[i], y[i]);
        let (y0, y1) = (f64::from(yi == 0), f64::from(yi == 1));
        let mu_z = 0.8 * xi + 0.1;
        let lv_z = -0.4 * xi - 0.2;
        let mu_w = 0.5 * xi + 0.3 * y1 - 0.1;
        let lv_w = 0.2 * xi - 0.6 * y0 + 0.1;
        let z = mu_z + (0.5 * lv_z).exp() * ez[i];
        let w = mu_w + (0.5 * lv_w).exp() * ew[i];
        let o = 1.5 * z - 0.25;
        h.reconstruction += -0.5 * (LN_2PI + (xi - o).powi(2));

        let first = if yi == 0 { 0 } else { components[0] };
        let k = components[yi];
        let pi = 1.0 / k as f64;
        let g: Vec<f64> = (first..first + k).map(|j| log_normal(z, a[j] * w + b[j], c[j] * w + d[j])).collect();
        let top = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = g.iter().map(|v| (v - top).exp()).sum();
        let r: Vec<f64> = g.iter().map(|v| (v - top).exp() / norm).collect();
        let expected_g: f64 = r.iter().zip(&g).map(|(r, g)| r * g).sum();
        h.latent_covering += log_normal(z, mu_z, lv_z) - expected_g;
        h.v_prior += r.iter().map(|r| r * (r / pi).ln()).sum::<f64>();
        h.w_prior += 0.5 * (mu_w * mu_w + lv_w.exp() - 1.0 - lv_w);
    }
    h.reconstruction /= n;
    h.latent_covering /= n;
    h.w_prior /= n;
    h.v_prior /= n;
    h
}

fn check(components: Vec<usize>) {
    let model = toy(components.clone());
    let x = [0.7, -1.3, 0.2];
    let labels = [0usize, 1, 1];
    let (ez, ew) = ([0.4, -1.1, 0.9], [-0.3, 0.8, 1.6]);
    let noise = ElboNoise {
        z: vec![Array2::from_shape_vec((3, 1), ez.to_vec()).unwrap()],
        w: vec![Array2::from_shape_vec((3, 1), ew.to_vec()).unwrap()],
    };
    let xs = Array2::from_shape_vec((3, 1), x.to_vec()).unwrap();
    let (b, _) = model.elbo_with_grad(&xs, &labels, &noise, ElboWeights::default()).unwrap();
    let h = hand_terms(&components, &x, &labels, &ez, &ew);
    assert!((b.reconstruction - h.reconstruction).abs() < 1e-6);
    assert!((b.latent_covering - h.latent_covering).abs() < 1e-6);
    assert!((b.w_prior - h.w_prior).abs() < 1e-6);
    assert!((b.v_prior - h.v_prior).abs() < 1e-6);
    let total = h.reconstruction - h.latent_covering - h.w_prior - h.v_prior;
    assert!((b.total - total).abs() < 1e-6);
}

#[test]
fn single_component_toy_matches_hand_evaluation() {
    check(vec![1, 1]);
}

#[test]
fn two_component_toy_matches_hand_evaluation() {
    check(vec![2, 2]);
}
