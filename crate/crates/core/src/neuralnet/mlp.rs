//! Fully connected ELU networks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, dropout_rate: f64) -> Result<Self> {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        let spec = MlpSpec {
            layer_sizes,
            dropout_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Network structure plus the indices of its tensors inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    /// `(weight, bias)` parameter indices per layer.
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Appends freshly initialized tensors to `params`. Weights and biases are
    /// uniform on `±1/√fan_in`.
    pub fn init(spec: MlpSpec, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let wi = params.push(Mat::from_vec(fan_in, fan_out, weight)?);
            let bi = params.push(Mat::from_vec(1, fan_out, bias)?);
            layers.push((wi, bi));
        }
        Ok(Mlp { spec, layers })
    }

    /// Parameter index of the last layer's bias, useful for custom output initialization.
    pub fn output_bias_index(&self) -> usize {
        self.layers.last().unwrap().1
    }

    pub fn output_weight_index(&self) -> usize {
        self.layers.last().unwrap().0
    }

    /// Records the forward pass. Dropout (inverted scaling) follows every
    /// hidden activation when `dropout` carries a generator.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        mut dropout: Option<&mut Rng>,
    ) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let w = tape.param(params, wi);
            let b = tape.param(params, bi);
            h = tape.affine(h, w, b);
            if l < last {
                h = tape.elu(h);
                let rate = self.spec.dropout_rate;
                if let (Some(rng), true) = (dropout.as_deref_mut(), rate > 0.0) {
                    let (r, c) = tape.value(h).shape();
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..r * c)
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    let mask = tape.constant(Mat { rows: r, cols: c, data: mask });
                    h = tape.mul(h, mask);
                }
            }
        }
        h
    }

    /// Inference without dropout or tape bookkeeping.
    pub fn predict(&self, params: &ParamSet, x: &Mat) -> Mat {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let mut next = h.matmul(&params.tensors[wi]);
            let b = &params.tensors[bi].data;
            for row in next.data.chunks_mut(b.len()) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                    if l < last && *v <= 0.0 {
                        *v = v.exp_m1();
                    }
                }
            }
            h = next;
        }
        h
    }

    pub fn checkpoint(&self, params: &ParamSet) -> MlpCheckpoint {
        MlpCheckpoint {
            layer_sizes: self.spec.layer_sizes.clone(),
            dropout_rate: self.spec.dropout_rate,
            weights: self
                .layers
                .iter()
                .map(|&(w, _)| params.tensors[w].data.clone())
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|&(_, b)| params.tensors[b].data.clone())
                .collect(),
        }
    }
}

/// Flat serialized form: layer sizes plus row-major `fan_in × fan_out`
/// weight arrays and bias vectors per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpCheckpoint {
    /// Rebuilds a network whose tensors are the only entries of a new [`ParamSet`].
    pub fn restore(&self) -> Result<(Mlp, ParamSet)> {
        let spec = MlpSpec {
            layer_sizes: self.layer_sizes.clone(),
            dropout_rate: self.dropout_rate,
        };
        spec.validate()?;
        let n = spec.layer_sizes.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::Shape("checkpoint layer count mismatch".into()));
        }
        let mut params = ParamSet::default();
        let mut layers = Vec::new();
        for (l, w) in spec.layer_sizes.windows(2).enumerate() {
            let wi = params.push(Mat::from_vec(w[0], w[1], self.weights[l].clone())?);
            let bi = params.push(Mat::from_vec(1, w[1], self.biases[l].clone())?);
            layers.push((wi, bi));
        }
        Ok((Mlp { spec, layers }, params))
    }
}
