//! Baseline pipeline: an embedding network trained with the intra-spread
//! minus inter-spread loss, rejecting by squared distance to the nearest
//! class centroid with a contamination-ratio threshold.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centroid::{squared_distance, CentroidSet};
use crate::data::LabeledData;
use crate::decision::{threshold_rule, OpenSetPrediction};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, MlpDocument, MlpSpec, Mode};
use crate::training::{stratified_batches, EarlyStopper, StoppingConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IiLossValue {
    pub loss: f64,
    /// Mean squared distance of each sample to its class centroid.
    pub intra: f64,
    /// Smallest squared distance between two class centroids.
    pub inter: f64,
}

struct BatchGeometry {
    classes: Vec<usize>,
    member_of: Vec<usize>,
    counts: Vec<usize>,
    centroids: Array2<f64>,
}

fn batch_geometry(embeddings: &Array2<f64>, labels: &[usize]) -> Result<BatchGeometry> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape("one label per embedding row".into()));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidBatch(
            "ii-loss needs at least two classes in a batch".into(),
        ));
    }
    let member_of: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label collected above"))
        .collect();
    let mut counts = vec![0usize; classes.len()];
    let mut centroids = Array2::zeros((classes.len(), embeddings.ncols()));
    for (row, &c) in embeddings.axis_iter(Axis(0)).zip(&member_of) {
        let mut dst = centroids.row_mut(c);
        dst += &row;
        counts[c] += 1;
    }
    for (mut row, &n) in centroids.axis_iter_mut(Axis(0)).zip(&counts) {
        row /= n as f64;
    }
    Ok(BatchGeometry {
        classes,
        member_of,
        counts,
        centroids,
    })
}

/// Closest pair of distinct centroids, ties resolved by lowest indices.
fn closest_pair(centroids: &Array2<f64>) -> (usize, usize, f64) {
    let mut best = (0, 1, f64::INFINITY);
    for a in 0..centroids.nrows() {
        for b in a + 1..centroids.nrows() {
            let d = squared_distance(centroids.row(a), centroids.row(b));
            if d < best.2 {
                best = (a, b, d);
            }
        }
    }
    best
}

/// Intra-spread minus inter-spread of a labelled batch of embeddings, using
/// the batch's own class centroids.
pub fn ii_loss(embeddings: &Array2<f64>, labels: &[usize]) -> Result<IiLossValue> {
    let g = batch_geometry(embeddings, labels)?;
    let n = embeddings.nrows() as f64;
    let intra = embeddings
        .axis_iter(Axis(0))
        .zip(&g.member_of)
        .map(|(row, &c)| squared_distance(row, g.centroids.row(c)))
        .sum::<f64>()
        / n;
    let (_, _, inter) = closest_pair(&g.centroids);
    Ok(IiLossValue {
        loss: intra - inter,
        intra,
        inter,
    })
}

/// [`ii_loss`] together with its gradient with respect to every embedding.
pub fn ii_loss_with_grad(embeddings: &Array2<f64>, labels: &[usize]) -> Result<(IiLossValue, Array2<f64>)> {
    let value = ii_loss(embeddings, labels)?;
    let g = batch_geometry(embeddings, labels)?;
    let n = embeddings.nrows() as f64;
    let (a, b, _) = closest_pair(&g.centroids);
    let diff = &g.centroids.row(a) - &g.centroids.row(b);
    let mut grad = Array2::zeros(embeddings.raw_dim());
    for ((mut out, row), &c) in grad.axis_iter_mut(Axis(0)).zip(embeddings.axis_iter(Axis(0))).zip(&g.member_of) {
        // Intra term: the centroid's own dependence on the row cancels.
        out.assign(&((&row - &g.centroids.row(c)) * (2.0 / n)));
        if c == a {
            out.scaled_add(-2.0 / g.counts[a] as f64, &diff);
        } else if c == b {
            out.scaled_add(2.0 / g.counts[b] as f64, &diff);
        }
    }
    debug_assert_eq!(g.classes.len(), g.counts.len());
    Ok((value, grad))
}

/// Squared distance to the nearest centroid.
pub fn outlier_score_of(embedding: ndarray::ArrayView1<f64>, centroids: &CentroidSet) -> f64 {
    centroids.nearest(embedding).1
}

/// `softmax(−‖μᵢ − z‖²)` with max-subtraction.
pub fn softmax_posterior_of(embedding: ndarray::ArrayView1<f64>, centroids: &CentroidSet) -> Array1<f64> {
    let logits: Vec<f64> = centroids.squared_distances(embedding).iter().map(|d| -d).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = exps.sum();
    exps / total
}

/// Value at rank `⌈(1 − α)·n⌉` (1-based) of the ascending scores.
pub fn nearest_rank_percentile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to take a percentile of".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("α = {alpha} outside [0, 1)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The tolerance keeps products like 0.99·100 from rounding up a rank.
    let rank = ((1.0 - alpha) * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationConfig {
    pub alpha: f64,
    pub threshold: f64,
}

pub fn fit_contamination_threshold(training_scores: &[f64], alpha: f64) -> Result<ContaminationConfig> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("contamination ratio {alpha} outside (0, 1)")));
    }
    Ok(ContaminationConfig {
        alpha,
        threshold: nearest_rank_percentile(training_scores, alpha)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IiLossConfig {
    pub hidden: Vec<usize>,
    pub dim_z: usize,
    pub dropout: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub stopping: StoppingConfig,
}

impl Default for IiLossConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 50],
            dim_z: 10,
            dropout: 0.2,
            batch_size: 128,
            adam: AdamConfig::default(),
            stopping: StoppingConfig::default(),
        }
    }
}

impl IiLossConfig {
    /// Hidden layers: dense → batchnorm → ReLU → dropout. The embedding
    /// layer is linear with a scale-free batchnorm, which keeps the
    /// inter-spread term bounded.
    pub fn network_spec(&self, input_width: usize) -> MlpSpec {
        let mut sizes = vec![input_width];
        sizes.extend(&self.hidden);
        sizes.push(self.dim_z);
        MlpSpec::new(sizes, Activation::Relu, Activation::Identity)
            .with_hidden_regularization(self.dropout)
            .with_output_batchnorm(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IiLossModel {
    pub network: Mlp,
    pub centroids: CentroidSet,
    pub contamination: Option<ContaminationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IiLossEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_intra: f64,
    pub validation_inter: f64,
}

#[derive(Debug, Clone)]
pub struct IiLossTraining {
    pub model: IiLossModel,
    pub log: Vec<IiLossEpoch>,
}

pub fn train_iiloss(
    config: &IiLossConfig,
    train: &LabeledData,
    validation: &LabeledData,
    class_ids: &[usize],
    seed: u64,
) -> Result<IiLossTraining> {
    train.check_classes(class_ids)?;
    validation.check_classes(class_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut network = Mlp::new(config.network_spec(train.features.ncols()), &mut rng)?;
    let mut adam = AdamState::new(&network.params, config.adam);
    let mut stopper = EarlyStopper::new(config.stopping);
    let mut best = network.clone();
    let mut log = Vec::new();

    let finish = |net: Mlp| -> Result<IiLossModel> {
        let embeddings = net.predict(&train.features)?;
        let labels = train.model_labels(class_ids)?;
        let centroids = CentroidSet::from_embeddings(&embeddings, &labels, class_ids.to_vec())?;
        Ok(IiLossModel {
            network: net,
            centroids,
            contamination: None,
        })
    };

    for epoch in 1..=config.stopping.max_epochs.max(1) {
        let mut epoch_loss = 0.0;
        let batches = stratified_batches(&train.labels, config.batch_size, &mut rng);
        for batch in &batches {
            let xb = train.features.select(Axis(0), batch);
            let lb: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (z, tape) = network.forward(&xb, Mode::Train, &mut rng)?;
            let (value, dz) = ii_loss_with_grad(&z, &lb)?;
            if !value.loss.is_finite() {
                return Err(Error::IiLossDiverged {
                    epoch,
                    last_good: Box::new(finish(best)?),
                });
            }
            let (grads, _) = network.backward(&tape, &dz)?;
            if let Err(e) = adam.update(&mut network.params, &grads) {
                return match e {
                    Error::NonFiniteGradient(_) => Err(Error::IiLossDiverged {
                        epoch,
                        last_good: Box::new(finish(best)?),
                    }),
                    other => Err(other),
                };
            }
            network.commit_batch_stats(&tape);
            epoch_loss += value.loss * batch.len() as f64;
        }
        let val = ii_loss(&network.predict(&validation.features)?, &validation.labels)?;
        if !val.loss.is_finite() {
            return Err(Error::IiLossDiverged {
                epoch,
                last_good: Box::new(finish(best)?),
            });
        }
        log.push(IiLossEpoch {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            validation_loss: val.loss,
            validation_intra: val.intra,
            validation_inter: val.inter,
        });
        let decision = stopper.update(val.loss);
        if decision.improved {
            best = network.clone();
        }
        if decision.stop {
            break;
        }
    }
    Ok(IiLossTraining {
        model: finish(best)?,
        log,
    })
}

impl IiLossModel {
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.network.predict(x)
    }

    pub fn outlier_scores(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let z = self.embed(x)?;
        Ok(z.axis_iter(Axis(0)).map(|e| outlier_score_of(e, &self.centroids)).collect())
    }

    pub fn softmax_posterior(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let z = self.embed(x)?;
        let mut out = Array2::zeros((z.nrows(), self.centroids.len()));
        for (mut row, e) in out.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))) {
            row.assign(&softmax_posterior_of(e, &self.centroids));
        }
        Ok(out)
    }

    pub fn fit_threshold(&mut self, train_x: &Array2<f64>, alpha: f64) -> Result<ContaminationConfig> {
        let scores = self.outlier_scores(train_x)?;
        let config = fit_contamination_threshold(&scores, alpha)?;
        self.contamination = Some(config);
        Ok(config)
    }

    /// Arg-max posterior class when the outlier score is within the fitted
    /// threshold, novel otherwise.
    pub fn predict_open_set(&self, x: &Array2<f64>) -> Result<Vec<OpenSetPrediction>> {
        let threshold = self
            .contamination
            .ok_or_else(|| Error::InvalidConfig("contamination threshold not fitted".into()))?
            .threshold;
        let z = self.embed(x)?;
        Ok(z.axis_iter(Axis(0))
            .map(|e| {
                let (nearest, score) = self.centroids.nearest(e);
                threshold_rule(score, self.centroids.class_ids[nearest], threshold)
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> IiLossCheckpoint {
        IiLossCheckpoint {
            format: IILOSS_FORMAT.into(),
            network: self.network.to_document(),
            centroids: self.centroids.clone(),
            contamination: self.contamination,
        }
    }

    pub fn from_checkpoint(c: &IiLossCheckpoint) -> Result<Self> {
        if c.format != IILOSS_FORMAT {
            return Err(Error::InvalidInput(format!("unsupported checkpoint `{}`", c.format)));
        }
        let network = Mlp::from_document(&c.network)?;
        let centroids = CentroidSet::new(c.centroids.centroids.clone(), c.centroids.class_ids.clone())?;
        if centroids.dim() != network.output_width() {
            return Err(Error::Shape("centroid width differs from embedding width".into()));
        }
        Ok(Self {
            network,
            centroids,
            contamination: c.contamination,
        })
    }
}

pub const IILOSS_FORMAT: &str = "osr-iiloss/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IiLossCheckpoint {
    pub format: String,
    pub network: MlpDocument,
    pub centroids: CentroidSet,
    pub contamination: Option<ContaminationConfig>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn samples_on_centroids() {
        let e = array![[0.0], [0.0], [2.0]];
        let v = ii_loss(&e, &[0, 0, 1]).unwrap();
        assert_eq!(v.loss, -4.0);
    }

    #[test]
    fn hand_evaluated_loss() {
        let e = array![[0.0], [2.0], [4.0]];
        let v = ii_loss(&e, &[0, 0, 1]).unwrap();
        assert!((v.intra - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.inter, 9.0);
        assert!((v.loss - (2.0 / 3.0 - 9.0)).abs() < 1e-15);
    }

    #[test]
    fn single_class_batch_rejected() {
        let e = array![[0.0], [1.0]];
        assert!(matches!(ii_loss(&e, &[3, 3]), Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn outlier_score_examples() {
        let c = CentroidSet::new(array![[0.0], [10.0]], vec![0, 1]).unwrap();
        assert_eq!(outlier_score_of(array![3.0].view(), &c), 9.0);
        assert_eq!(outlier_score_of(array![10.0].view(), &c), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let c = CentroidSet::new(array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], vec![0, 1, 2, 3]).unwrap();
        let p = softmax_posterior_of(array![0.0, 0.0].view(), &c);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let far = CentroidSet::new(array![[0.0], [100.0]], vec![0, 1]).unwrap();
        assert!(softmax_posterior_of(array![0.0].view(), &far)[0] > 1.0 - 1e-6);

        // Squared distances 1 and 2.
        let c2 = CentroidSet::new(array![[1.0, 0.0], [0.0, 2f64.sqrt()]], vec![0, 1]).unwrap();
        let p = softmax_posterior_of(array![0.0, 0.0].view(), &c2);
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        assert!((p[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn nearest_rank_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(fit_contamination_threshold(&s, 0.01).unwrap().threshold, 99.0);
        assert_eq!(fit_contamination_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap().threshold, 2.0);
        assert_eq!(fit_contamination_threshold(&[4.2; 7], 0.3).unwrap().threshold, 4.2);
        assert!(fit_contamination_threshold(&[], 0.1).is_err());
        assert!(fit_contamination_threshold(&[1.0], 0.0).is_err());
        assert_eq!(nearest_rank_percentile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 3.0);
    }

    #[test]
    fn open_set_boundary_is_inclusive() {
        let c = CentroidSet::new(array![[0.0], [10.0]], vec![4, 9]).unwrap();
        assert_eq!(threshold_rule(outlier_score_of(array![3.0].view(), &c), 4, 9.0).label, crate::decision::OpenLabel::Known(4));
        assert_eq!(threshold_rule(9.0 + 1e-12, 4, 9.0).label, crate::decision::OpenLabel::Novel);
    }

    proptest! {
        #[test]
        fn threshold_leaves_at_most_alpha_share_above(scores in prop::collection::vec(0.0f64..100.0, 1..200), alpha in 0.001f64..0.999) {
            let t = fit_contamination_threshold(&scores, alpha).unwrap().threshold;
            let above = scores.iter().filter(|&&s| s > t).count();
            prop_assert!(above <= (alpha * scores.len() as f64).ceil() as usize);
            prop_assert!(scores.contains(&t));
        }

        #[test]
        fn translation_and_scaling(points in prop::collection::vec(-5.0f64..5.0, 12), shift in -3.0f64..3.0, scale in 0.1f64..4.0) {
            let e = Array2::from_shape_vec((6, 2), points).unwrap();
            let labels = [0, 0, 1, 1, 2, 2];
            let base = ii_loss(&e, &labels).unwrap();
            let moved = ii_loss(&e.mapv(|v| v + shift), &labels).unwrap();
            prop_assert!((base.loss - moved.loss).abs() < 1e-9 * (1.0 + base.loss.abs()));
            let scaled = ii_loss(&e.mapv(|v| v * scale), &labels).unwrap();
            prop_assert!((scaled.intra - base.intra * scale * scale).abs() < 1e-9 * (1.0 + scaled.intra));
            prop_assert!((scaled.inter - base.inter * scale * scale).abs() < 1e-9 * (1.0 + scaled.inter));
        }

        #[test]
        fn posterior_argmax_is_nearest_centroid(c in prop::collection::vec(-5.0f64..5.0, 8), e in prop::collection::vec(-6.0f64..6.0, 2)) {
            let set = CentroidSet::new(Array2::from_shape_vec((4, 2), c).unwrap(), vec![0, 1, 2, 3]).unwrap();
            let e = Array1::from(e);
            let p = softmax_posterior_of(e.view(), &set);
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            let (nearest, _) = set.nearest(e.view());
            let d = set.squared_distances(e.view());
            let mut argmax = 0;
            for i in 1..4 { if p[i] > p[argmax] { argmax = i; } }
            // Equal posteriors only arise from equal distances.
            prop_assert!(argmax == nearest || d[argmax] == d[nearest]);
        }
    }
}
