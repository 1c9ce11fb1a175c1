//! Class-conditional Gaussian-mixture VAE.
//!
//! Generative side: `w ~ N(0, I)`, `v | y ~ Mult(π(y))`,
//! `z | w, y, v ~ N(μ_ck(w; β), diag σ²_ck(w; β))`, `x | z ~ p_θ(x | z)`.
//! Inference side: `q(z | x)` from `φ_z`, `q(w | x, y)` from `φ_w`, and the
//! component posterior `p_β(v | z, w, y)` by Bayes' rule.
//!
//! The objective is the four-term bound
//! `reconstruction − latent_covering − w_prior − v_prior`, estimated with
//! reparameterized samples. Gradients are derived by hand below; the
//! finite-difference suite in `tests/gradients.rs` checks them.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::centroid::CentroidSet;
use crate::data::LabeledData;
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    gaussian_head_backward, split_gaussian_head, Activation, AdamConfig, AdamState, GaussianBatch, GaussianParams,
    Mlp, MlpDocument, MlpParams, MlpSpec, Mode, Tape,
};
use crate::training::{shuffled_batches, stage_rng, EarlyStopper, StoppingConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Unit-variance Gaussian on the decoder output.
    Gaussian,
    /// Independent Bernoulli per column with the decoder output as logit.
    Bernoulli,
}

/// A contiguous run of encoded columns sharing one likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionBlock {
    pub width: usize,
    pub likelihood: Likelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmvaeConfig {
    /// Components per class, `K_c`. Its length is the number of classes.
    pub components: Vec<usize>,
    pub dim_z: usize,
    pub dim_w: usize,
    /// Per-class component prior `π(y)`; uniform when absent.
    #[serde(default)]
    pub class_prior: Option<Vec<Vec<f64>>>,
    /// Likelihood layout over the encoded feature columns.
    pub reconstruction: Vec<ReconstructionBlock>,
    pub phi_z_hidden: Vec<usize>,
    pub beta_hidden: Vec<usize>,
    pub mc_samples: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub stopping: StoppingConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

impl GmvaeConfig {
    /// One component per class, the layer sizes of the reference
    /// architecture, and Gaussian reconstruction over `input_width` columns.
    pub fn with_defaults(num_classes: usize, input_width: usize) -> Self {
        Self {
            components: vec![1; num_classes],
            dim_z: 10,
            dim_w: 10,
            class_prior: None,
            reconstruction: vec![ReconstructionBlock {
                width: input_width,
                likelihood: Likelihood::Gaussian,
            }],
            phi_z_hidden: vec![100, 50],
            beta_hidden: vec![20, 20],
            mc_samples: 1,
            batch_size: 128,
            adam: AdamConfig::default(),
            stopping: StoppingConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.components.len()
    }

    pub fn total_components(&self) -> usize {
        self.components.iter().sum()
    }

    pub fn input_width(&self) -> usize {
        self.reconstruction.iter().map(|b| b.width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::InvalidConfig("at least two classes required".into()));
        }
        if self.components.contains(&0) {
            return Err(Error::InvalidConfig("every class needs at least one component".into()));
        }
        if self.dim_z == 0 || self.dim_w == 0 {
            return Err(Error::InvalidConfig("latent dimensions must be positive".into()));
        }
        if self.mc_samples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("mc_samples and batch_size must be positive".into()));
        }
        if self.input_width() == 0 || self.reconstruction.iter().any(|b| b.width == 0) {
            return Err(Error::InvalidConfig("empty reconstruction block".into()));
        }
        if let Some(prior) = &self.class_prior {
            if prior.len() != self.num_classes() {
                return Err(Error::InvalidConfig("class_prior needs one row per class".into()));
            }
            for (row, &k) in prior.iter().zip(&self.components) {
                let sum: f64 = row.iter().sum();
                if row.len() != k || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(
                        "class_prior rows must be probability vectors of length K_c".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `ln π(y)` for class `c`.
    fn log_prior(&self, c: usize) -> Vec<f64> {
        match &self.class_prior {
            Some(p) => p[c].iter().map(|v| v.ln()).collect(),
            None => vec![-(self.components[c] as f64).ln(); self.components[c]],
        }
    }

    fn component_offset(&self, c: usize) -> usize {
        self.components[..c].iter().sum()
    }

    fn likelihood_per_column(&self) -> Vec<Likelihood> {
        self.reconstruction
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.likelihood, b.width))
            .collect()
    }

    pub fn phi_z_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.phi_z_hidden);
        sizes.push(2 * self.dim_z);
        MlpSpec::new(sizes, Activation::Sigmoid, Activation::Identity)
    }

    pub fn phi_w_spec(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.input_width() + self.num_classes(), 2 * self.dim_w],
            Activation::Identity,
            Activation::Identity,
        )
    }

    pub fn beta_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.dim_w];
        sizes.extend(&self.beta_hidden);
        sizes.push(2 * self.total_components() * self.dim_z);
        MlpSpec::new(sizes, Activation::Sigmoid, Activation::Identity)
    }

    /// Mirror image of `φ_z`.
    pub fn theta_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.dim_z];
        sizes.extend(self.phi_z_hidden.iter().rev());
        sizes.push(self.input_width());
        MlpSpec::new(sizes, Activation::Sigmoid, Activation::Identity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub latent_covering: f64,
    pub w_prior: f64,
    pub v_prior: f64,
    pub total: f64,
}

impl ElboBreakdown {
    fn from_terms(reconstruction: f64, latent_covering: f64, w_prior: f64, v_prior: f64) -> Result<Self> {
        for (term, v) in [
            ("reconstruction", reconstruction),
            ("latent_covering", latent_covering),
            ("w_prior", w_prior),
            ("v_prior", v_prior),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteTerm { term });
            }
        }
        Ok(Self {
            reconstruction,
            latent_covering,
            w_prior,
            v_prior,
            total: reconstruction - latent_covering - w_prior - v_prior,
        })
    }

    fn weighted_mean(items: &[(Self, usize)]) -> Self {
        let n: usize = items.iter().map(|(_, w)| w).sum();
        let avg = |f: fn(&Self) -> f64| items.iter().map(|(b, w)| f(b) * *w as f64).sum::<f64>() / n as f64;
        Self {
            reconstruction: avg(|b| b.reconstruction),
            latent_covering: avg(|b| b.latent_covering),
            w_prior: avg(|b| b.w_prior),
            v_prior: avg(|b| b.v_prior),
            total: avg(|b| b.total),
        }
    }
}

/// Standard-normal draws for the reparameterized `z` and `w` samples, one
/// `[batch × dim]` matrix per Monte-Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub z: Vec<Array2<f64>>,
    pub w: Vec<Array2<f64>>,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(batch: usize, dim_z: usize, dim_w: usize, samples: usize, rng: &mut R) -> Self {
        let mut draw = |d| Array2::from_shape_simple_fn((batch, d), || rng.sample::<f64, _>(StandardNormal));
        let mut z = Vec::with_capacity(samples);
        let mut w = Vec::with_capacity(samples);
        for _ in 0..samples {
            z.push(draw(dim_z));
            w.push(draw(dim_w));
        }
        Self { z, w }
    }
}

/// Multipliers on each term of the objective. The default weights give the
/// plain bound; isolating a term is useful for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboWeights {
    pub reconstruction: f64,
    pub latent_covering: f64,
    pub w_prior: f64,
    pub v_prior: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            latent_covering: 1.0,
            w_prior: 1.0,
            v_prior: 1.0,
        }
    }
}

impl ElboWeights {
    pub fn only(term: &str) -> Result<Self> {
        let mut w = Self {
            reconstruction: 0.0,
            latent_covering: 0.0,
            w_prior: 0.0,
            v_prior: 0.0,
        };
        match term {
            "reconstruction" => w.reconstruction = 1.0,
            "latent_covering" => w.latent_covering = 1.0,
            "w_prior" => w.w_prior = 1.0,
            "v_prior" => w.v_prior = 1.0,
            other => return Err(Error::InvalidInput(format!("unknown ELBO term `{other}`"))),
        }
        Ok(w)
    }

    /// The weighted negative bound, which training minimizes.
    pub fn loss(&self, b: &ElboBreakdown) -> f64 {
        -self.reconstruction * b.reconstruction
            + self.latent_covering * b.latent_covering
            + self.w_prior * b.w_prior
            + self.v_prior * b.v_prior
    }
}

/// Gradients of the weighted negative bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    pub phi_z: MlpParams,
    pub phi_w: MlpParams,
    pub beta: MlpParams,
    pub theta: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPosterior {
    pub probabilities: Vec<f64>,
    /// Every component density underflowed and the prior was returned.
    pub fell_back_to_prior: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmvaeModel {
    pub config: GmvaeConfig,
    /// Dataset class id for each model class index.
    pub class_ids: Vec<usize>,
    pub phi_z: Mlp,
    pub phi_w: Mlp,
    pub beta: Mlp,
    pub theta: Mlp,
    pub phi_z_frozen: bool,
}

/// `log N(x; m, exp(lv))` for one coordinate together with its partials
/// with respect to `x`, `m` and `lv`.
fn coord_log_density(x: f64, m: f64, lv: f64) -> (f64, f64, f64, f64) {
    let inv_var = (-lv).exp();
    let d = x - m;
    let value = -0.5 * (LN_2PI + lv + d * d * inv_var);
    (value, -d * inv_var, d * inv_var, -0.5 + 0.5 * d * d * inv_var)
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn softmax_in_place(logits: &mut [f64]) -> bool {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return false;
    }
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    true
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::InvalidInput(format!("class index {l} outside 0..{num_classes}")));
        }
        out[[i, l]] = 1.0;
    }
    Ok(out)
}

fn one_hot_indices(y: &Array2<f64>, num_classes: usize) -> Result<Vec<usize>> {
    if y.ncols() != num_classes {
        return Err(shape_err(format!("label width {} != {num_classes} classes", y.ncols())));
    }
    y.axis_iter(Axis(0))
        .map(|row| {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            if ones.len() == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0) {
                Ok(ones[0])
            } else {
                Err(Error::InvalidInput("label row is not one-hot".into()))
            }
        })
        .collect()
}

impl GmvaeModel {
    pub fn new<R: Rng + ?Sized>(config: GmvaeConfig, class_ids: Vec<usize>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if class_ids.len() != config.num_classes() {
            return Err(Error::InvalidConfig(format!(
                "{} class ids for {} classes",
                class_ids.len(),
                config.num_classes()
            )));
        }
        let phi_z = Mlp::new(config.phi_z_spec(), rng)?;
        let phi_w = Mlp::new(config.phi_w_spec(), rng)?;
        let beta = Mlp::new(config.beta_spec(), rng)?;
        let theta = Mlp::new(config.theta_spec(), rng)?;
        Ok(Self {
            config,
            class_ids,
            phi_z,
            phi_w,
            beta,
            theta,
            phi_z_frozen: false,
        })
    }

    /// Maps dataset class ids to model class indices.
    pub fn class_indices(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.class_ids
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::InvalidInput(format!("class {l} is not a known class")))
            })
            .collect()
    }

    pub fn encode_z(&self, x: &Array2<f64>) -> Result<GaussianBatch> {
        split_gaussian_head(&self.phi_z.predict(x)?, self.config.dim_z)
    }

    /// `y` holds one one-hot row per sample over the model's classes.
    pub fn encode_w(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<GaussianBatch> {
        one_hot_indices(y, self.config.num_classes())?;
        if x.nrows() != y.nrows() {
            return Err(shape_err("x and y differ in row count"));
        }
        let input = ndarray::concatenate![Axis(1), x.view(), y.view()];
        split_gaussian_head(&self.phi_w.predict(&input)?, self.config.dim_w)
    }

    /// Prior Gaussians of every `(class, component)` pair given one `w`.
    pub fn prior_components(&self, w: &[f64]) -> Result<Vec<Vec<GaussianParams>>> {
        if w.len() != self.config.dim_w {
            return Err(shape_err(format!("w has dimension {}, expected {}", w.len(), self.config.dim_w)));
        }
        let w = Array2::from_shape_vec((1, w.len()), w.to_vec()).expect("row vector");
        let prior = self.prior_batch(&self.beta.predict(&w)?)?;
        let dz = self.config.dim_z;
        Ok((0..self.config.num_classes())
            .map(|c| {
                let off = self.config.component_offset(c);
                (0..self.config.components[c])
                    .map(|k| {
                        let cols = (off + k) * dz..(off + k + 1) * dz;
                        GaussianParams {
                            mean: prior.mean.slice(s![0, cols.clone()]).to_vec(),
                            log_variance: prior.log_variance.slice(s![0, cols]).to_vec(),
                        }
                    })
                    .collect()
            })
            .collect())
    }

    fn prior_batch(&self, head: &Array2<f64>) -> Result<GaussianBatch> {
        split_gaussian_head(head, self.config.total_components() * self.config.dim_z)
    }

    /// `p_β(v | z, w, y)` over the components of model class `class`.
    pub fn component_posterior(&self, z: &[f64], w: &[f64], class: usize) -> Result<ComponentPosterior> {
        if class >= self.config.num_classes() {
            return Err(Error::InvalidInput(format!("class index {class} out of range")));
        }
        if z.len() != self.config.dim_z {
            return Err(shape_err("z has the wrong dimension"));
        }
        let grid = self.prior_components(w)?;
        let log_prior = self.config.log_prior(class);
        let mut logits: Vec<f64> = grid[class]
            .iter()
            .zip(&log_prior)
            .map(|(g, lp)| lp + g.log_density(z))
            .collect();
        if softmax_in_place(&mut logits) {
            Ok(ComponentPosterior {
                probabilities: logits,
                fell_back_to_prior: false,
            })
        } else {
            Ok(ComponentPosterior {
                probabilities: log_prior.iter().map(|l| l.exp()).collect(),
                fell_back_to_prior: true,
            })
        }
    }

    /// Monte-Carlo estimate of the bound, batch-averaged. `labels` are
    /// dataset class ids.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
        mc_samples: usize,
        rng: &mut R,
    ) -> Result<ElboBreakdown> {
        if mc_samples == 0 {
            return Err(Error::InvalidInput("mc_samples must be at least 1".into()));
        }
        let noise = ElboNoise::draw(x.nrows(), self.config.dim_z, self.config.dim_w, mc_samples, rng);
        Ok(self.evaluate(x, labels, &noise, ElboWeights::default(), false)?.0)
    }

    /// The bound under fixed noise, plus gradients of
    /// `weights.loss(bound)` for all four networks.
    pub fn elbo_with_grad(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
        noise: &ElboNoise,
        weights: ElboWeights,
    ) -> Result<(ElboBreakdown, ElboGradients)> {
        let (b, g) = self.evaluate(x, labels, noise, weights, true)?;
        Ok((b, g.expect("gradients requested")))
    }

    fn evaluate(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
        noise: &ElboNoise,
        wt: ElboWeights,
        want_grad: bool,
    ) -> Result<(ElboBreakdown, Option<ElboGradients>)> {
        let cfg = &self.config;
        let (n, dz, dw) = (x.nrows(), cfg.dim_z, cfg.dim_w);
        if n == 0 {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        if labels.len() != n {
            return Err(shape_err("one label per row"));
        }
        let samples = noise.z.len();
        if samples == 0 || noise.w.len() != samples {
            return Err(Error::InvalidInput("noise must hold at least one z and one w draw".into()));
        }
        if noise.z.iter().any(|e| e.dim() != (n, dz)) || noise.w.iter().any(|e| e.dim() != (n, dw)) {
            return Err(shape_err("noise shape does not match the batch"));
        }
        let classes = self.class_indices(labels)?;
        let y = one_hot(&classes, cfg.num_classes())?;
        let likelihoods = cfg.likelihood_per_column();
        // No layer in these networks is stochastic, so the rng is never drawn.
        let mut unused = ChaCha8Rng::seed_from_u64(0);

        let (head_z, tape_z) = self.phi_z.forward(x, Mode::Train, &mut unused)?;
        let qz = split_gaussian_head(&head_z, dz)?;
        let xy = ndarray::concatenate![Axis(1), x.view(), y.view()];
        let (head_w, tape_w) = self.phi_w.forward(&xy, Mode::Train, &mut unused)?;
        let qw = split_gaussian_head(&head_w, dw)?;
        let std_z = qz.log_variance.mapv(|lv| (0.5 * lv).exp());
        let std_w = qw.log_variance.mapv(|lv| (0.5 * lv).exp());

        let scale = 1.0 / (n * samples) as f64;
        let (mut recon, mut covering, mut v_prior) = (0.0, 0.0, 0.0);
        let mut d_mean_z = Array2::<f64>::zeros((n, dz));
        let mut d_lv_z = Array2::<f64>::zeros((n, dz));
        let mut d_mean_w = Array2::<f64>::zeros((n, dw));
        let mut d_lv_w = Array2::<f64>::zeros((n, dw));
        let mut g_theta = self.theta.params.zeros_like();
        let mut g_beta = self.beta.params.zeros_like();

        for (eps_z, eps_w) in noise.z.iter().zip(&noise.w) {
            let z = qz.sample_with_noise(eps_z);
            let w = qw.sample_with_noise(eps_w);
            let (head_b, tape_b) = self.beta.forward(&w, Mode::Train, &mut unused)?;
            let prior = self.prior_batch(&head_b)?;
            let (out, tape_t) = self.theta.forward(&z, Mode::Train, &mut unused)?;

            // Reconstruction.
            let mut d_out = Array2::<f64>::zeros(out.raw_dim());
            for ((i, j), &o) in out.indexed_iter() {
                let xv = x[[i, j]];
                let (value, d_value) = match likelihoods[j] {
                    Likelihood::Gaussian => (-0.5 * (LN_2PI + (xv - o) * (xv - o)), xv - o),
                    Likelihood::Bernoulli => (xv * o - softplus(o), xv - crate::nn::sigmoid(o)),
                };
                recon += value * scale;
                d_out[[i, j]] = -wt.reconstruction * d_value * scale;
            }

            // Latent covering and component prior.
            let mut d_z = Array2::<f64>::zeros((n, dz));
            let mut d_prior_mean = Array2::<f64>::zeros(prior.mean.raw_dim());
            let mut d_prior_lv = Array2::<f64>::zeros(prior.log_variance.raw_dim());
            for i in 0..n {
                let c = classes[i];
                let off = cfg.component_offset(c);
                let kc = cfg.components[c];
                let log_pi = cfg.log_prior(c);
                let log_q: f64 = (0..dz)
                    .map(|d| coord_log_density(z[[i, d]], qz.mean[[i, d]], qz.log_variance[[i, d]]).0)
                    .sum();
                let g: Vec<f64> = (0..kc)
                    .map(|k| {
                        (0..dz)
                            .map(|d| {
                                let col = (off + k) * dz + d;
                                coord_log_density(z[[i, d]], prior.mean[[i, col]], prior.log_variance[[i, col]]).0
                            })
                            .sum()
                    })
                    .collect();
                let mut r: Vec<f64> = g.iter().zip(&log_pi).map(|(g, lp)| g + lp).collect();
                if !softmax_in_place(&mut r) {
                    return Err(Error::NonFiniteTerm { term: "latent_covering" });
                }
                let g_bar: f64 = r.iter().zip(&g).map(|(r, g)| r * g).sum();
                // KL(r ‖ π) with 0·ln 0 = 0.
                let kl_parts: Vec<f64> = r
                    .iter()
                    .zip(&log_pi)
                    .map(|(&r, &lp)| if r > 0.0 { r.ln() - lp } else { 0.0 })
                    .collect();
                let kl: f64 = r.iter().zip(&kl_parts).map(|(r, p)| r * p).sum();
                covering += (log_q - g_bar) * scale;
                v_prior += kl * scale;

                if !want_grad {
                    continue;
                }
                // ∂ḡ/∂g_k = r_k (1 + g_k − ḡ); ∂KL/∂g_k = r_k (ℓ_k − KL).
                for k in 0..kc {
                    let h = (-wt.latent_covering * r[k] * (1.0 + g[k] - g_bar) + wt.v_prior * r[k] * (kl_parts[k] - kl))
                        * scale;
                    if h == 0.0 {
                        continue;
                    }
                    for d in 0..dz {
                        let col = (off + k) * dz + d;
                        let (_, dx, dm, dlv) =
                            coord_log_density(z[[i, d]], prior.mean[[i, col]], prior.log_variance[[i, col]]);
                        d_z[[i, d]] += h * dx;
                        d_prior_mean[[i, col]] += h * dm;
                        d_prior_lv[[i, col]] += h * dlv;
                    }
                }
                // ln q(z|x) at the reparameterized sample is −½ Σ (ln 2π + lv + ε²).
                for d in 0..dz {
                    d_lv_z[[i, d]] += -0.5 * wt.latent_covering * scale;
                }
            }
            if !want_grad {
                continue;
            }
            let (gt, d_z_recon) = self.theta.backward(&tape_t, &d_out)?;
            g_theta.accumulate(&gt);
            let d_head_b = gaussian_head_backward(&head_b, &d_prior_mean, &d_prior_lv);
            let (gb, d_w) = self.beta.backward(&tape_b, &d_head_b)?;
            g_beta.accumulate(&gb);
            let d_z = d_z + d_z_recon;
            d_mean_z += &d_z;
            d_lv_z += &(&d_z * eps_z * &std_z * 0.5);
            d_mean_w += &d_w;
            d_lv_w += &(&d_w * eps_w * &std_w * 0.5);
        }

        let w_prior = qw
            .mean
            .iter()
            .zip(qw.log_variance.iter())
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum::<f64>()
            / n as f64;
        let breakdown = ElboBreakdown::from_terms(recon, covering, w_prior, v_prior)?;
        if !want_grad {
            return Ok((breakdown, None));
        }
        d_mean_w.zip_mut_with(&qw.mean, |g, m| *g += wt.w_prior * m / n as f64);
        d_lv_w.zip_mut_with(&qw.log_variance, |g, lv| *g += wt.w_prior * 0.5 * (lv.exp() - 1.0) / n as f64);

        let (g_phi_w, _) = self
            .phi_w
            .backward(&tape_w, &gaussian_head_backward(&head_w, &d_mean_w, &d_lv_w))?;
        let (g_phi_z, _) = self
            .phi_z
            .backward(&tape_z, &gaussian_head_backward(&head_z, &d_mean_z, &d_lv_z))?;
        Ok((
            breakdown,
            Some(ElboGradients {
                phi_z: g_phi_z,
                phi_w: g_phi_w,
                beta: g_beta,
                theta: g_theta,
            }),
        ))
    }

    /// Encoder means, the deterministic latent mapping.
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.encode_z(x)?.mean)
    }

    /// Mean embedding per class over `data`, in model class order.
    pub fn class_centroids(&self, data: &LabeledData) -> Result<CentroidSet> {
        let idx = self.class_indices(&data.labels)?;
        CentroidSet::from_embeddings(&self.embed(&data.features)?, &idx, self.class_ids.clone())
    }

    pub fn to_checkpoint(&self) -> GmvaeCheckpoint {
        GmvaeCheckpoint {
            format: GMVAE_FORMAT.into(),
            config: self.config.clone(),
            class_ids: self.class_ids.clone(),
            phi_z_frozen: self.phi_z_frozen,
            phi_z: self.phi_z.to_document(),
            phi_w: self.phi_w.to_document(),
            beta: self.beta.to_document(),
            theta: self.theta.to_document(),
        }
    }

    pub fn from_checkpoint(c: &GmvaeCheckpoint) -> Result<Self> {
        if c.format != GMVAE_FORMAT {
            return Err(Error::InvalidInput(format!("unsupported checkpoint `{}`", c.format)));
        }
        c.config.validate()?;
        let model = Self {
            config: c.config.clone(),
            class_ids: c.class_ids.clone(),
            phi_z: Mlp::from_document(&c.phi_z)?,
            phi_w: Mlp::from_document(&c.phi_w)?,
            beta: Mlp::from_document(&c.beta)?,
            theta: Mlp::from_document(&c.theta)?,
            phi_z_frozen: c.phi_z_frozen,
        };
        let cfg = &model.config;
        for (name, net, spec) in [
            ("phi_z", &model.phi_z, cfg.phi_z_spec()),
            ("phi_w", &model.phi_w, cfg.phi_w_spec()),
            ("beta", &model.beta, cfg.beta_spec()),
            ("theta", &model.theta, cfg.theta_spec()),
        ] {
            if net.spec.layer_sizes != spec.layer_sizes {
                return Err(shape_err(format!("`{name}` layer sizes do not match the config")));
            }
        }
        if model.class_ids.len() != cfg.num_classes() {
            return Err(Error::InvalidConfig("class id count differs from the config".into()));
        }
        Ok(model)
    }
}

pub const GMVAE_FORMAT: &str = "osr-gmvae/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmvaeCheckpoint {
    pub format: String,
    pub config: GmvaeConfig,
    pub class_ids: Vec<usize>,
    pub phi_z_frozen: bool,
    pub phi_z: MlpDocument,
    pub phi_w: MlpDocument,
    pub beta: MlpDocument,
    pub theta: MlpDocument,
}

/// Cross-entropy of a linear softmax head on the encoder mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Training-set objective before the first update.
    pub initial_loss: f64,
    /// Training-set objective after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn cross_entropy(head: &Mlp, means: &Array2<f64>, classes: &[usize]) -> Result<(f64, Array2<f64>, Tape)> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (logits, tape) = head.forward(means, Mode::Train, &mut unused)?;
    let n = classes.len() as f64;
    let mut loss = 0.0;
    let mut d = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let mut p = row.to_vec();
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= (p[classes[i]] - lse) / n;
        for (j, v) in p.iter_mut().enumerate() {
            *v = (*v - lse).exp();
            d[[i, j]] = (*v - f64::from(u8::from(j == classes[i]))) / n;
        }
    }
    Ok((loss, d, tape))
}

fn pretrain_loss(model: &GmvaeModel, head: &Mlp, x: &Array2<f64>, classes: &[usize]) -> Result<f64> {
    let means = model.embed(x)?;
    let logits = head.predict(&means)?;
    let mut loss = 0.0;
    for (row, &c) in logits.axis_iter(Axis(0)).zip(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[c] - lse;
    }
    Ok(loss / classes.len() as f64)
}

/// Trains `φ_z` through a temporary softmax head on its mean output, then
/// marks it frozen. The head is discarded.
pub fn pretrain_phi_z(model: &mut GmvaeModel, train: &LabeledData, seed: u64) -> Result<PretrainLog> {
    train.check_classes(&model.class_ids)?;
    let classes = model.class_indices(&train.labels)?;
    let cfg = model.config.pretrain.clone();
    let mut rng = stage_rng(seed, "gmvae-pretrain");
    let head_spec = MlpSpec::new(
        vec![model.config.dim_z, model.config.num_classes()],
        Activation::Identity,
        Activation::Identity,
    );
    let mut head = Mlp::new(head_spec, &mut rng)?;
    let mut adam_z = AdamState::new(&model.phi_z.params, cfg.adam);
    let mut adam_head = AdamState::new(&head.params, cfg.adam);
    let initial_loss = pretrain_loss(model, &head, &train.features, &classes)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let dz = model.config.dim_z;
    for _ in 0..cfg.epochs {
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let xb = train.features.select(Axis(0), &batch);
            let cb: Vec<usize> = batch.iter().map(|&i| classes[i]).collect();
            let (head_z, tape_z) = model.phi_z.forward(&xb, Mode::Train, &mut rng)?;
            let means = head_z.slice(s![.., ..dz]).to_owned();
            let (_, d_logits, tape_head) = cross_entropy(&head, &means, &cb)?;
            let (g_head, d_means) = head.backward(&tape_head, &d_logits)?;
            let d_lv = Array2::zeros(d_means.raw_dim());
            let (g_z, _) = model
                .phi_z
                .backward(&tape_z, &gaussian_head_backward(&head_z, &d_means, &d_lv))?;
            adam_z.update(&mut model.phi_z.params, &g_z)?;
            adam_head.update(&mut head.params, &g_head)?;
        }
        epoch_losses.push(pretrain_loss(model, &head, &train.features, &classes)?);
    }
    model.phi_z_frozen = true;
    Ok(PretrainLog {
        initial_loss,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmvaeEpoch {
    pub epoch: usize,
    /// Batch-size-weighted mean over the epoch's updates.
    pub train: ElboBreakdown,
    /// Evaluated with the same noise every epoch.
    pub validation: ElboBreakdown,
}

#[derive(Debug, Clone)]
pub struct GmvaeTraining {
    pub model: GmvaeModel,
    pub log: Vec<GmvaeEpoch>,
}

/// Maximizes the bound over `θ`, `β` and `φ_w` with `φ_z` held fixed,
/// early-stopping on the validation negative bound. Returns the best
/// validation model.
pub fn train_gmvae(model: GmvaeModel, train: &LabeledData, validation: &LabeledData, seed: u64) -> Result<GmvaeTraining> {
    if !model.phi_z_frozen {
        return Err(Error::InvalidConfig("φ_z must be pretrained and frozen first".into()));
    }
    train.check_classes(&model.class_ids)?;
    validation.check_classes(&model.class_ids)?;
    let cfg = model.config.clone();
    let mut rng = stage_rng(seed, "gmvae-train");
    let validation_noise = ElboNoise::draw(
        validation.len(),
        cfg.dim_z,
        cfg.dim_w,
        cfg.mc_samples,
        &mut stage_rng(seed, "gmvae-validation-noise"),
    );
    let mut model = model;
    let mut adam_w = AdamState::new(&model.phi_w.params, cfg.adam);
    let mut adam_beta = AdamState::new(&model.beta.params, cfg.adam);
    let mut adam_theta = AdamState::new(&model.theta.params, cfg.adam);
    let mut stopper = EarlyStopper::new(cfg.stopping);
    let mut best = model.clone();
    let mut log = Vec::new();
    let weights = ElboWeights::default();

    let diverged = |epoch, term, best: &GmvaeModel| Error::GmvaeDiverged {
        epoch,
        term,
        last_good: Box::new(best.clone()),
    };

    for epoch in 1..=cfg.stopping.max_epochs.max(1) {
        let mut parts = Vec::new();
        for batch in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let xb = train.features.select(Axis(0), &batch);
            let lb: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let noise = ElboNoise::draw(batch.len(), cfg.dim_z, cfg.dim_w, cfg.mc_samples, &mut rng);
            let (b, g) = match model.elbo_with_grad(&xb, &lb, &noise, weights) {
                Ok(v) => v,
                Err(Error::NonFiniteTerm { term }) => return Err(diverged(epoch, term, &best)),
                Err(e) => return Err(e),
            };
            for (adam, params, grad) in [
                (&mut adam_w, &mut model.phi_w.params, &g.phi_w),
                (&mut adam_beta, &mut model.beta.params, &g.beta),
                (&mut adam_theta, &mut model.theta.params, &g.theta),
            ] {
                match adam.update(params, grad) {
                    Ok(()) => {}
                    Err(Error::NonFiniteGradient(_)) => return Err(diverged(epoch, "gradient", &best)),
                    Err(e) => return Err(e),
                }
            }
            parts.push((b, batch.len()));
        }
        let val = match model.evaluate(
            &validation.features,
            &validation.labels,
            &validation_noise,
            weights,
            false,
        ) {
            Ok((b, _)) => b,
            Err(Error::NonFiniteTerm { term }) => return Err(diverged(epoch, term, &best)),
            Err(e) => return Err(e),
        };
        log.push(GmvaeEpoch {
            epoch,
            train: ElboBreakdown::weighted_mean(&parts),
            validation: val,
        });
        let decision = stopper.update(-val.total);
        if decision.improved {
            best = model.clone();
        }
        if decision.stop {
            break;
        }
    }
    Ok(GmvaeTraining { model: best, log })
}
