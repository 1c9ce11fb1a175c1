mod common;

use common::*;

const TOLERANCE: f64 = 1e-4;

fn check(f: impl Fn(u64) -> f64) {
    for seed in 0..INSTANCES as u64 {
        let err = f(seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn sigmoid_mlp_backprop_matches_finite_differences() {
    check(mlp_instance);
}

#[test]
fn iiloss_embedding_gradient_matches_finite_differences() {
    check(iiloss_embedding_instance);
}

#[test]
fn iiloss_network_gradient_matches_finite_differences() {
    check(iiloss_network_instance);
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    check(|s| elbo_term_instance(s, "reconstruction"));
}

#[test]
fn latent_covering_gradient_matches_finite_differences() {
    check(|s| elbo_term_instance(s, "latent_covering"));
}

#[test]
fn w_prior_gradient_matches_finite_differences() {
    check(|s| elbo_term_instance(s, "w_prior"));
}

#[test]
fn v_prior_gradient_matches_finite_differences() {
    check(|s| elbo_term_instance(s, "v_prior"));
}

#[test]
fn full_bound_gradient_matches_finite_differences() {
    use osr_core::gmvae::ElboWeights;
    for seed in 0..5 {
        let inst = elbo_instance(seed);
        let w = ElboWeights::default();
        let (_, g) = inst.model.elbo_with_grad(&inst.x, &inst.labels, &inst.noise, w).unwrap();
        // The weighted gradients are linear in the weights.
        let mut sum = g.theta.zeros_like();
        for term in ELBO_TERMS {
            let (_, gt) = inst
                .model
                .elbo_with_grad(&inst.x, &inst.labels, &inst.noise, ElboWeights::only(term).unwrap())
                .unwrap();
            sum.accumulate(&gt.theta);
        }
        let flat = |p: &osr_core::nn::MlpParams| p.trainable().concat();
        assert!(relative_error(&flat(&sum), &flat(&g.theta)) < 1e-12);
    }
}

#[test]
fn checked_gradients_are_not_trivially_zero() {
    use osr_core::gmvae::ElboWeights;
    let inst = elbo_instance(0);
    let norm = |p: &osr_core::nn::MlpParams| p.trainable().concat().iter().map(|v| v * v).sum::<f64>().sqrt();
    let grads = |term| {
        inst.model
            .elbo_with_grad(&inst.x, &inst.labels, &inst.noise, ElboWeights::only(term).unwrap())
            .unwrap()
            .1
    };
    let recon = grads("reconstruction");
    assert!(norm(&recon.phi_z) > 1e-6 && norm(&recon.theta) > 1e-6);
    let cover = grads("latent_covering");
    assert!(norm(&cover.phi_z) > 1e-6 && norm(&cover.phi_w) > 1e-6 && norm(&cover.beta) > 1e-6);
    let wp = grads("w_prior");
    assert!(norm(&wp.phi_w) > 1e-6);
    let vp = grads("v_prior");
    assert!(norm(&vp.phi_z) > 1e-6 && norm(&vp.phi_w) > 1e-6 && norm(&vp.beta) > 1e-6);
}
