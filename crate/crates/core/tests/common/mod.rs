//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance runner.
#![allow(dead_code)]

use ndarray::Array2;
use osr_core::gmvae::{ElboNoise, ElboWeights, GmvaeConfig, GmvaeModel, Likelihood, ReconstructionBlock};
use osr_core::iiloss::{ii_loss, ii_loss_with_grad, IiLossConfig};
use osr_core::nn::{Activation, Mlp, MlpParams, MlpSpec, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const INSTANCES: usize = 20;
pub const ELBO_TERMS: [&str; 4] = ["reconstruction", "latent_covering", "w_prior", "v_prior"];

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn flatten(p: &MlpParams, skip: &[String]) -> Vec<f64> {
    p.trainable_names()
        .iter()
        .zip(p.trainable())
        .filter(|(n, _)| !skip.contains(n))
        .flat_map(|(_, t)| t.to_vec())
        .collect()
}

/// Central differences of `loss` with respect to every trainable entry of
/// the network selected by `get`, skipping tensors named in `skip`.
fn numeric_grad<T: Clone>(
    base: &T,
    get: impl Fn(&mut T) -> &mut MlpParams,
    skip: &[String],
    loss: impl Fn(&T) -> f64,
) -> Vec<f64> {
    let mut work = base.clone();
    let names = get(&mut work).trainable_names();
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        if skip.contains(name) {
            continue;
        }
        let len = get(&mut work).trainable()[t].len();
        for i in 0..len {
            let orig = get(&mut work).trainable()[t][i];
            get(&mut work).trainable_mut()[t][i] = orig + STEP;
            let up = loss(&work);
            get(&mut work).trainable_mut()[t][i] = orig - STEP;
            let down = loss(&work);
            get(&mut work).trainable_mut()[t][i] = orig;
            out.push((up - down) / (2.0 * STEP));
        }
    }
    out
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Three-layer sigmoid MLP under a random linear read-out.
pub fn mlp_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(MlpSpec::new(vec![4, 6, 5, 3], Activation::Sigmoid, Activation::Sigmoid), &mut rng).unwrap();
    let x = gaussian_matrix(&mut rng, 7, 4, 1.0);
    let upstream = gaussian_matrix(&mut rng, 7, 3, 1.0);
    let loss = |m: &Mlp| (m.predict(&x).unwrap() * &upstream).sum();
    let (_, tape) = net.forward(&x, Mode::Train, &mut rng).unwrap();
    let (grads, _) = net.backward(&tape, &upstream).unwrap();
    let numeric = numeric_grad(&net, |m| &mut m.params, &[], loss);
    relative_error(&flatten(&grads, &[]), &numeric)
}

fn labelled_embeddings(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let classes = rng.random_range(2..5usize);
    let n = classes * rng.random_range(2..6usize);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut e = gaussian_matrix(rng, n, 3, 1.0);
    for (mut row, &l) in e.rows_mut().into_iter().zip(&labels) {
        row[l % 3] += 3.0 * l as f64;
    }
    (e, labels)
}

/// ii-loss with respect to the embeddings.
pub fn iiloss_embedding_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e, labels) = labelled_embeddings(&mut rng);
    let (_, analytic) = ii_loss_with_grad(&e, &labels).unwrap();
    let mut numeric = Vec::new();
    let mut work = e.clone();
    for idx in 0..e.len() {
        let (i, j) = (idx / e.ncols(), idx % e.ncols());
        let orig = work[[i, j]];
        work[[i, j]] = orig + STEP;
        let up = ii_loss(&work, &labels).unwrap().loss;
        work[[i, j]] = orig - STEP;
        let down = ii_loss(&work, &labels).unwrap().loss;
        work[[i, j]] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    relative_error(analytic.as_slice().unwrap(), &numeric)
}

/// ii-loss back-propagated through the embedding network (batchnorm in
/// train mode, dropout off).
pub fn iiloss_network_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = IiLossConfig {
        hidden: vec![6],
        dim_z: 3,
        dropout: 0.0,
        ..IiLossConfig::default()
    };
    let net = Mlp::new(config.network_spec(4), &mut rng).unwrap();
    let classes = 3;
    let labels: Vec<usize> = (0..12).map(|i| i % classes).collect();
    let mut x = gaussian_matrix(&mut rng, 12, 4, 1.0);
    for (mut row, &l) in x.rows_mut().into_iter().zip(&labels) {
        row[l] += 2.0;
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let loss = |m: &Mlp| {
        let (e, _) = m.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ii_loss(&e, &labels).unwrap().loss
    };
    let (e, tape) = net.forward(&x, Mode::Train, &mut unused).unwrap();
    let (_, d_e) = ii_loss_with_grad(&e, &labels).unwrap();
    let (grads, _) = net.backward(&tape, &d_e).unwrap();
    // The embedding layer's batchnorm scale is fixed at one.
    let skip = vec![format!("layer{}.bn_scale", net.params.layers.len() - 1)];
    let numeric = numeric_grad(&net, |m| &mut m.params, &skip, loss);
    relative_error(&flatten(&grads, &skip), &numeric)
}

pub struct ElboInstance {
    pub model: GmvaeModel,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub noise: ElboNoise,
}

/// Small mixed-likelihood model with two components per class so every
/// term, including the component prior, is non-trivial.
pub fn elbo_instance(seed: u64) -> ElboInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = GmvaeConfig {
        components: vec![2, 2],
        dim_z: 2,
        dim_w: 2,
        class_prior: Some(vec![vec![0.3, 0.7], vec![0.5, 0.5]]),
        reconstruction: vec![
            ReconstructionBlock {
                width: 2,
                likelihood: Likelihood::Gaussian,
            },
            ReconstructionBlock {
                width: 2,
                likelihood: Likelihood::Bernoulli,
            },
        ],
        phi_z_hidden: vec![4],
        beta_hidden: vec![3],
        mc_samples: 2,
        ..GmvaeConfig::with_defaults(2, 4)
    };
    let mut model = GmvaeModel::new(config, vec![10, 20], &mut rng).unwrap();
    // Non-zero biases keep the check away from symmetric points.
    for net in [&mut model.phi_z, &mut model.phi_w, &mut model.beta, &mut model.theta] {
        for layer in &mut net.params.layers {
            layer.bias.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let n = 5;
    let mut x = gaussian_matrix(&mut rng, n, 4, 1.0);
    for i in 0..n {
        for j in 2..4 {
            x[[i, j]] = f64::from(rng.random_bool(0.5) as u8);
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { 10 } else { 20 }).collect();
    let noise = ElboNoise::draw(n, 2, 2, 2, &mut rng);
    ElboInstance { model, x, labels, noise }
}

/// Worst relative error over the four networks for one weighted term.
pub fn elbo_term_instance(seed: u64, term: &str) -> f64 {
    let inst = elbo_instance(seed);
    let weights = ElboWeights::only(term).unwrap();
    let (_, grads) = inst.model.elbo_with_grad(&inst.x, &inst.labels, &inst.noise, weights).unwrap();
    let loss = |m: &GmvaeModel| {
        let (b, _) = m.elbo_with_grad(&inst.x, &inst.labels, &inst.noise, weights).unwrap();
        weights.loss(&b)
    };
    let pairs: [(&MlpParams, fn(&mut GmvaeModel) -> &mut MlpParams); 4] = [
        (&grads.phi_z, |m| &mut m.phi_z.params),
        (&grads.phi_w, |m| &mut m.phi_w.params),
        (&grads.beta, |m| &mut m.beta.params),
        (&grads.theta, |m| &mut m.theta.params),
    ];
    pairs
        .iter()
        .map(|(g, get)| relative_error(&flatten(g, &[]), &numeric_grad(&inst.model, get, &[], loss)))
        .fold(0.0, f64::max)
}

/// Worst relative error per check over `INSTANCES` seeds.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..INSTANCES as u64).map(|s| f(1000 + s)).fold(0.0, f64::max);
    let mut out = vec![
        ("sigmoid_mlp".to_string(), worst(&mlp_instance)),
        ("iiloss_embeddings".to_string(), worst(&iiloss_embedding_instance)),
        ("iiloss_network".to_string(), worst(&iiloss_network_instance)),
    ];
    for term in ELBO_TERMS {
        out.push((format!("elbo_{term}"), worst(&|s| elbo_term_instance(s, term))));
    }
    out
}
