use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Buffer, Linear, Mode, Module};
use crate::tensor::{self, Element, Parameter, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `(in, out)` per linear layer; consecutive pairs must chain.
    pub layer_dims: Vec<(usize, usize)>,
    /// Batch norm between each hidden linear layer and its ReLU.
    pub hidden_norm: bool,
}

impl MlpConfig {
    /// `input -> hidden -> ... -> output` with the given hidden widths.
    pub fn chain(input: usize, hidden: &[usize], output: usize, hidden_norm: bool) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden.iter().chain(std::iter::once(&output)) {
            dims.push((prev, h));
            prev = h;
        }
        Self {
            layer_dims: dims,
            hidden_norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims.first().map_or(0, |d| d.0)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims.last().map_or(0, |d| d.1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layer_dims.is_empty() {
            return Err("mlp: at least one layer required".into());
        }
        if self.layer_dims.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err("mlp: layer dims must be positive".into());
        }
        for w in self.layer_dims.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(format!(
                    "mlp: layer output {} does not feed next input {}",
                    w[0].1, w[1].0
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Mlp<E: Element> {
    pub config: MlpConfig,
    pub layers: Vec<(Linear<E>, Option<BatchNorm<E>>)>,
}

impl<E: Element> Mlp<E> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        config: &MlpConfig,
        trainable: bool,
        rng: &mut R,
    ) -> std::result::Result<Self, String> {
        config.validate()?;
        let last = config.layer_dims.len() - 1;
        let layers = config
            .layer_dims
            .iter()
            .enumerate()
            .map(|(i, &(input, output))| {
                let lin = Linear::new(&format!("{name}.fc{i}"), input, output, trainable, rng);
                let bn = (i < last && config.hidden_norm)
                    .then(|| BatchNorm::new(&format!("{name}.bn{i}"), output, trainable));
                (lin, bn)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// Linear, then batch norm and ReLU on every layer but the last.
    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        if x.rank() != 2 || x.shape()[1] != self.config.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_forward",
                detail: format!(
                    "input {:?}, expected [_, {}]",
                    x.shape(),
                    self.config.input_dim()
                ),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (lin, bn)) in self.layers.iter().enumerate() {
            h = lin.forward(&h)?;
            if i < last {
                if let Some(bn) = bn {
                    h = bn.forward(&h, mode)?;
                }
                h = tensor::relu(&h);
            }
        }
        Ok(h)
    }
}

impl<E: Element> Module<E> for Mlp<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        self.layers
            .iter()
            .flat_map(|(l, bn)| {
                let mut p = l.parameters();
                if let Some(bn) = bn {
                    p.extend(bn.parameters());
                }
                p
            })
            .collect()
    }

    fn buffers(&self) -> Vec<&Buffer<E>> {
        self.layers
            .iter()
            .filter_map(|(_, bn)| bn.as_ref())
            .flat_map(|bn| bn.buffers())
            .collect()
    }
}
