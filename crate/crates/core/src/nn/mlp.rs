use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Numerical guard added to the batch variance before normalizing.
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic when blending in a new batch.
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation `pre` and output `out`.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    /// When false the scale stays pinned at 1 and only the shift is learned.
    pub learn_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub activation: Activation,
    #[serde(default)]
    pub batchnorm: Option<BatchNormSpec>,
    #[serde(default)]
    pub dropout: f64,
}

/// Shape and per-layer behaviour of a sequential MLP.
///
/// `layers[i]` describes the map from `layer_sizes[i]` to `layer_sizes[i + 1]`:
/// dense, then optional batchnorm, then activation, then optional dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Every hidden layer uses `hidden`, the last layer uses `output`.
    pub fn new(layer_sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        let n = layer_sizes.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| LayerSpec {
                activation: if i + 1 == n { output } else { hidden },
                batchnorm: None,
                dropout: 0.0,
            })
            .collect();
        Self {
            layer_sizes,
            layers,
        }
    }

    /// Adds learnable batchnorm and dropout to every hidden layer.
    pub fn with_hidden_regularization(mut self, dropout: f64) -> Self {
        let n = self.layers.len();
        for layer in self.layers.iter_mut().take(n.saturating_sub(1)) {
            layer.batchnorm = Some(BatchNormSpec { learn_scale: true });
            layer.dropout = dropout;
        }
        self
    }

    pub fn with_output_batchnorm(mut self, learn_scale: bool) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.batchnorm = Some(BatchNormSpec { learn_scale });
        }
        self
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        if self.layers.len() + 1 != self.layer_sizes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} layer sizes need {} layer specs, got {}",
                self.layer_sizes.len(),
                self.layer_sizes.len() - 1,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::InvalidConfig(format!(
                    "layer {i}: dropout rate {} outside [0, 1)",
                    layer.dropout
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNormParams {
    fn identity(width: usize) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    fn zeros_like(&self) -> Self {
        let w = self.scale.len();
        Self {
            scale: Array1::zeros(w),
            shift: Array1::zeros(w),
            running_mean: Array1::zeros(w),
            running_var: Array1::zeros(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `[d_in × d_out]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub batchnorm: Option<BatchNormParams>,
}

/// Learnable state of an MLP. Gradients reuse the same layout; their
/// running-statistics fields are always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    batchnorm: l.batchnorm.as_ref().map(BatchNormParams::zeros_like),
                })
                .collect(),
        }
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, then
    /// batchnorm scale and shift when present.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let Some(bn) = &l.batchnorm {
                out.push(bn.scale.as_slice().expect("standard layout"));
                out.push(bn.shift.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut l.batchnorm {
                out.push(bn.scale.as_slice_mut().expect("standard layout"));
                out.push(bn.shift.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{i}.weight"));
            out.push(format!("layer{i}.bias"));
            if l.batchnorm.is_some() {
                out.push(format!("layer{i}.bn_scale"));
                out.push(format!("layer{i}.bn_shift"));
            }
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite())
                && l.bias.iter().all(|v| v.is_finite())
                && l.batchnorm.as_ref().is_none_or(|bn| {
                    bn.scale
                        .iter()
                        .chain(bn.shift.iter())
                        .chain(bn.running_mean.iter())
                        .chain(bn.running_var.iter())
                        .all(|v| v.is_finite())
                })
        })
    }

    /// Adds `other` into `self` tensor by tensor.
    pub fn accumulate(&mut self, other: &MlpParams) {
        for (dst, src) in self.trainable_mut().into_iter().zip(other.trainable()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.trainable_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batchnorm, dropout masks drawn from the caller's stream.
    Train,
    /// Running statistics for batchnorm, dropout disabled.
    Infer,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Array2<f64>,
    /// Normalized pre-activation (only with batchnorm).
    normalized: Option<Array2<f64>>,
    /// Per-feature `1/sqrt(var + eps)` used for the normalization.
    inv_std: Option<Array1<f64>>,
    pre_activation: Array2<f64>,
    activated: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)).
    mask: Option<Array2<f64>>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
}

/// Intermediate values recorded by [`Mlp::forward`] and consumed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    layers: Vec<LayerTape>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, identity batchnorm.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, ls)| {
                let (fan_in, fan_out) = (spec.layer_sizes[i], spec.layer_sizes[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
                LayerParams {
                    weight,
                    bias: Array1::zeros(fan_out),
                    batchnorm: ls.batchnorm.map(|_| BatchNormParams::identity(fan_out)),
                }
            })
            .collect();
        Ok(Self {
            spec,
            params: MlpParams { layers },
        })
    }

    pub fn from_parts(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        let mlp = Self { spec, params };
        mlp.check_params()?;
        Ok(mlp)
    }

    fn check_params(&self) -> Result<()> {
        if self.params.layers.len() != self.spec.layers.len() {
            return Err(shape_err(format!(
                "spec has {} layers, params have {}",
                self.spec.layers.len(),
                self.params.layers.len()
            )));
        }
        for (i, (ls, lp)) in self.spec.layers.iter().zip(&self.params.layers).enumerate() {
            let (d_in, d_out) = (self.spec.layer_sizes[i], self.spec.layer_sizes[i + 1]);
            if lp.weight.dim() != (d_in, d_out) || lp.bias.len() != d_out {
                return Err(shape_err(format!(
                    "layer {i}: expected weight {d_in}×{d_out}, bias {d_out}"
                )));
            }
            match (&ls.batchnorm, &lp.batchnorm) {
                (None, None) => {}
                (Some(_), Some(bn)) => {
                    if [&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var]
                        .iter()
                        .any(|a| a.len() != d_out)
                    {
                        return Err(shape_err(format!("layer {i}: batchnorm width != {d_out}")));
                    }
                }
                _ => return Err(shape_err(format!("layer {i}: batchnorm presence mismatch"))),
            }
        }
        if !self.params.all_finite() {
            return Err(Error::InvalidInput("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.input_width() {
            return Err(shape_err(format!(
                "input width {} != expected {}",
                input.ncols(),
                self.input_width()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Inference-mode forward pass without recording a tape.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        for (ls, lp) in self.spec.layers.iter().zip(&self.params.layers) {
            let mut a = x.dot(&lp.weight) + &lp.bias;
            if let Some(bn) = &lp.batchnorm {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BATCHNORM_EPS).sqrt());
                a = (&a - &bn.running_mean) * &inv_std * &bn.scale + &bn.shift;
            }
            a.mapv_inplace(|v| ls.activation.apply(v));
            x = a;
        }
        Ok(x)
    }

    /// Forward pass that records what [`Mlp::backward`] needs. `rng` is only
    /// consumed in train mode by layers with dropout.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_input(input)?;
        let mut tapes = Vec::with_capacity(self.spec.layers.len());
        let mut x = input.to_owned();
        for (ls, lp) in self.spec.layers.iter().zip(&self.params.layers) {
            let a = x.dot(&lp.weight) + &lp.bias;
            let (pre, normalized, inv_std, batch_mean, batch_var) = match &lp.batchnorm {
                None => (a, None, None, None, None),
                Some(bn) => {
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
                            let var = a.var_axis(Axis(0), 0.0);
                            (mean, var)
                        }
                        Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + BATCHNORM_EPS).sqrt());
                    let xhat = (&a - &mean) * &inv_std;
                    let pre = &xhat * &bn.scale + &bn.shift;
                    let stats = (mode == Mode::Train).then_some((mean, var));
                    let (bm, bv) = match stats {
                        Some((m, v)) => (Some(m), Some(v)),
                        None => (None, None),
                    };
                    (pre, Some(xhat), Some(inv_std), bm, bv)
                }
            };
            let activated = pre.mapv(|v| ls.activation.apply(v));
            let (out, mask) = if mode == Mode::Train && ls.dropout > 0.0 {
                let keep = 1.0 - ls.dropout;
                let mask = Array2::from_shape_fn(activated.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                (&activated * &mask, Some(mask))
            } else {
                (activated.clone(), None)
            };
            tapes.push(LayerTape {
                input: x,
                normalized,
                inv_std,
                pre_activation: pre,
                activated,
                mask,
                batch_mean,
                batch_var,
            });
            x = out;
        }
        Ok((
            x,
            Tape {
                mode,
                layers: tapes,
            },
        ))
    }

    /// Exact gradients of `sum(upstream ⊙ output)` with respect to the
    /// trainable parameters and the input.
    pub fn backward(&self, tape: &Tape, upstream: &Array2<f64>) -> Result<(MlpParams, Array2<f64>)> {
        let last = tape
            .layers
            .last()
            .ok_or_else(|| shape_err("empty tape"))?;
        if upstream.dim() != last.activated.dim() {
            return Err(shape_err(format!(
                "upstream gradient {:?} != output {:?}",
                upstream.dim(),
                last.activated.dim()
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut g = upstream.to_owned();
        for (i, ((ls, lp), lt)) in self
            .spec
            .layers
            .iter()
            .zip(&self.params.layers)
            .zip(&tape.layers)
            .enumerate()
            .rev()
        {
            if let Some(mask) = &lt.mask {
                g *= mask;
            }
            Zip::from(&mut g)
                .and(&lt.pre_activation)
                .and(&lt.activated)
                .for_each(|gv, &pre, &out| *gv *= ls.activation.derivative(pre, out));

            let da = match (&lp.batchnorm, &lt.normalized, &lt.inv_std) {
                (Some(bn), Some(xhat), Some(inv_std)) => {
                    let gbn = grads.layers[i].batchnorm.as_mut().expect("same layout");
                    if ls.batchnorm.is_some_and(|b| b.learn_scale) {
                        gbn.scale = (&g * xhat).sum_axis(Axis(0));
                    }
                    gbn.shift = g.sum_axis(Axis(0));
                    let dxhat = &g * &bn.scale;
                    match tape.mode {
                        Mode::Train => {
                            let n = g.nrows() as f64;
                            let sum_d = dxhat.sum_axis(Axis(0));
                            let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                            ((&dxhat * n) - &sum_d - &(xhat * &sum_dx)) * &(inv_std / n)
                        }
                        Mode::Infer => dxhat * inv_std,
                    }
                }
                _ => g,
            };
            grads.layers[i].weight = lt.input.t().dot(&da);
            grads.layers[i].bias = da.sum_axis(Axis(0));
            g = da.dot(&lp.weight.t());
        }
        Ok((grads, g))
    }

    /// Blends the batch statistics of a train-mode tape into the running
    /// batchnorm statistics.
    pub fn commit_batch_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        for (lp, lt) in self.params.layers.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(m), Some(v)) = (&mut lp.batchnorm, &lt.batch_mean, &lt.batch_var) {
                bn.running_mean = &bn.running_mean * BATCHNORM_MOMENTUM + m * (1.0 - BATCHNORM_MOMENTUM);
                bn.running_var = &bn.running_var * BATCHNORM_MOMENTUM + v * (1.0 - BATCHNORM_MOMENTUM);
            }
        }
    }

    /// FNV-1a over the bit patterns of every parameter, running stats included.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for l in &self.params.layers {
            l.weight.iter().chain(l.bias.iter()).for_each(|&v| eat(v));
            if let Some(bn) = &l.batchnorm {
                bn.scale
                    .iter()
                    .chain(bn.shift.iter())
                    .chain(bn.running_mean.iter())
                    .chain(bn.running_var.iter())
                    .for_each(|&v| eat(v));
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(weight: Array2<f64>, bias: Array1<f64>, act: Activation) -> Mlp {
        let (d_in, d_out) = weight.dim();
        let spec = MlpSpec::new(vec![d_in, d_out], act, act);
        Mlp::from_parts(
            spec,
            MlpParams {
                layers: vec![LayerParams {
                    weight,
                    bias,
                    batchnorm: None,
                }],
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = single_layer(Array2::eye(2), Array1::zeros(2), Activation::Identity);
        let out = mlp.predict(&array![[1.0, 2.0]]).unwrap();
        assert_eq!(out, array![[1.0, 2.0]]);
    }

    #[test]
    fn zero_sigmoid_layer_gives_half() {
        let mlp = single_layer(Array2::zeros((4, 3)), Array1::zeros(3), Activation::Sigmoid);
        let out = mlp.predict(&array![[3.0, -1.0, 7.0, 0.2]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_multiplied_affine_layer() {
        let w = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let mlp = single_layer(w, array![0.5, -0.5], Activation::Identity);
        let out = mlp.predict(&array![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(out, array![[4.5, 4.5]]);
    }

    #[test]
    fn rejects_bad_input() {
        let mlp = single_layer(Array2::eye(2), Array1::zeros(2), Activation::Identity);
        assert!(matches!(mlp.predict(&array![[1.0, 2.0, 3.0]]), Err(Error::Shape(_))));
        assert!(matches!(
            mlp.predict(&array![[1.0, f64::NAN]]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mlp = single_layer(array![[0.3, -0.2], [0.1, 0.4]], array![0.0, 0.0], Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = array![[2.0, -1.0]];
        let (_, tape) = mlp.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = array![[0.5, 3.0]];
        let (grads, _) = mlp.backward(&tape, &g).unwrap();
        assert_eq!(grads.layers[0].weight, x.t().dot(&g));
        assert_eq!(grads.layers[0].bias, array![0.5, 3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Sigmoid, Activation::Identity)
            .with_hidden_regularization(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let (out, tape) = mlp.forward(&x, Mode::Train, &mut rng).unwrap();
        let (grads, dx) = mlp.backward(&tape, &Array2::zeros(out.raw_dim())).unwrap();
        assert!(grads.trainable().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_is_idempotent_and_matches_forward() {
        let spec = MlpSpec::new(vec![3, 6, 2], Activation::Relu, Activation::Identity)
            .with_hidden_regularization(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(spec, &mut rng).unwrap();
        let before = mlp.checksum();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64) - (j as f64) * 0.7);
        let a = mlp.predict(&x).unwrap();
        let b = mlp.predict(&x).unwrap();
        let (c, _) = mlp.forward(&x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(before, mlp.checksum());
    }

    #[test]
    fn batchnorm_train_output_matches_shift_and_scale() {
        let mut spec = MlpSpec::new(vec![2, 3], Activation::Identity, Activation::Identity);
        spec.layers[0].batchnorm = Some(BatchNormSpec { learn_scale: true });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(spec, &mut rng).unwrap();
        let bn = mlp.params.layers[0].batchnorm.as_mut().unwrap();
        bn.scale = array![0.5, 2.0, 1.5];
        bn.shift = array![-1.0, 0.0, 3.0];
        let x = Array2::from_shape_fn((64, 2), |(i, j)| {
            ((i * 37 + j * 11) % 29) as f64 * 3.0 - 40.0
        });
        let (out, _) = mlp.forward(&x, Mode::Train, &mut rng).unwrap();
        let mean = out.mean_axis(Axis(0)).unwrap();
        let var = out.var_axis(Axis(0), 0.0);
        let bn = mlp.params.layers[0].batchnorm.as_ref().unwrap();
        for k in 0..3 {
            assert!((mean[k] - bn.shift[k]).abs() < 1e-5);
            assert!((var[k] - bn.scale[k].powi(2)).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let spec = MlpSpec::new(vec![4, 16, 2], Activation::Relu, Activation::Identity)
            .with_hidden_regularization(0.5);
        let mlp = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = Array2::from_elem((3, 4), 1.0);
        let (a, _) = mlp.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (b, _) = mlp.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        let mut spec = MlpSpec::new(vec![3], Activation::Relu, Activation::Identity);
        assert!(spec.validate().is_err());
        spec = MlpSpec::new(vec![3, 0, 2], Activation::Relu, Activation::Identity);
        assert!(spec.validate().is_err());
        spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, Activation::Identity);
        spec.layers[0].dropout = 1.0;
        assert!(spec.validate().is_err());
    }
}
