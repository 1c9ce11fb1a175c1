use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BatchNormParams, LayerParams, Mlp, MlpParams, MlpSpec};
use crate::error::{shape_err, Error, Result};

pub const MLP_FORMAT: &str = "osr-mlp/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing parameter document: a spec header followed by named,
/// shaped arrays in layer order. Floats are written in shortest
/// round-trip form, so decoding reproduces every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDocument {
    pub format: String,
    pub spec: MlpSpec,
    pub arrays: Vec<NamedArray>,
}

fn vector(name: String, v: &Array1<f64>) -> NamedArray {
    NamedArray {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

impl Mlp {
    pub fn to_document(&self) -> MlpDocument {
        let mut arrays = Vec::new();
        for (i, l) in self.params.layers.iter().enumerate() {
            arrays.push(NamedArray {
                name: format!("layer{i}.weight"),
                shape: vec![l.weight.nrows(), l.weight.ncols()],
                data: l.weight.iter().copied().collect(),
            });
            arrays.push(vector(format!("layer{i}.bias"), &l.bias));
            if let Some(bn) = &l.batchnorm {
                arrays.push(vector(format!("layer{i}.bn_scale"), &bn.scale));
                arrays.push(vector(format!("layer{i}.bn_shift"), &bn.shift));
                arrays.push(vector(format!("layer{i}.bn_running_mean"), &bn.running_mean));
                arrays.push(vector(format!("layer{i}.bn_running_var"), &bn.running_var));
            }
        }
        MlpDocument {
            format: MLP_FORMAT.to_string(),
            spec: self.spec.clone(),
            arrays,
        }
    }

    pub fn from_document(doc: &MlpDocument) -> Result<Self> {
        if doc.format != MLP_FORMAT {
            return Err(Error::InvalidInput(format!(
                "unsupported parameter format `{}`",
                doc.format
            )));
        }
        doc.spec.validate()?;
        let mut arrays = doc.arrays.iter();
        let mut take = |name: String, shape: &[usize]| -> Result<Vec<f64>> {
            let a = arrays
                .next()
                .ok_or_else(|| shape_err(format!("missing array `{name}`")))?;
            if a.name != name || a.shape != shape || a.data.len() != shape.iter().product::<usize>() {
                return Err(shape_err(format!(
                    "expected `{name}` with shape {shape:?}, found `{}` {:?}",
                    a.name, a.shape
                )));
            }
            Ok(a.data.clone())
        };
        let mut layers = Vec::new();
        for (i, ls) in doc.spec.layers.iter().enumerate() {
            let (d_in, d_out) = (doc.spec.layer_sizes[i], doc.spec.layer_sizes[i + 1]);
            let weight = Array2::from_shape_vec((d_in, d_out), take(format!("layer{i}.weight"), &[d_in, d_out])?)
                .map_err(|e| shape_err(e.to_string()))?;
            let bias = Array1::from(take(format!("layer{i}.bias"), &[d_out])?);
            let batchnorm = match ls.batchnorm {
                None => None,
                Some(_) => Some(BatchNormParams {
                    scale: Array1::from(take(format!("layer{i}.bn_scale"), &[d_out])?),
                    shift: Array1::from(take(format!("layer{i}.bn_shift"), &[d_out])?),
                    running_mean: Array1::from(take(format!("layer{i}.bn_running_mean"), &[d_out])?),
                    running_var: Array1::from(take(format!("layer{i}.bn_running_var"), &[d_out])?),
                }),
            };
            layers.push(LayerParams {
                weight,
                bias,
                batchnorm,
            });
        }
        if arrays.next().is_some() {
            return Err(shape_err("trailing arrays in parameter document"));
        }
        Mlp::from_parts(doc.spec.clone(), MlpParams { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mode};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn json_round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, bn in any::<bool>()) {
            let mut spec = MlpSpec::new(vec![3, hidden, 2], Activation::Relu, Activation::Identity);
            if bn {
                spec = spec.with_hidden_regularization(0.1).with_output_batchnorm(false);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mlp = Mlp::new(spec, &mut rng).unwrap();
            // Perturb running statistics so they are not trivially 0/1.
            let x = ndarray::Array2::from_shape_fn((4, 3), |(i, j)| (seed.wrapping_add((i * 3 + j) as u64) % 97) as f64 / 7.0);
            let (_, tape) = mlp.forward(&x, Mode::Train, &mut rng).unwrap();
            mlp.commit_batch_stats(&tape);
            let text = serde_json::to_string(&mlp.to_document()).unwrap();
            let back = Mlp::from_document(&serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(back.checksum(), mlp.checksum());
            prop_assert_eq!(back, mlp);
        }
    }

    #[test]
    fn mismatched_document_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(
            MlpSpec::new(vec![2, 3], Activation::Identity, Activation::Identity),
            &mut rng,
        )
        .unwrap();
        let mut doc = mlp.to_document();
        doc.arrays[0].shape = vec![3, 2];
        assert!(Mlp::from_document(&doc).is_err());
        let mut doc = mlp.to_document();
        doc.format = "other".into();
        assert!(Mlp::from_document(&doc).is_err());
    }
}
