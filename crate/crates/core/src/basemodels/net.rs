//! Linear or multilayer maps from features to a fixed-width output.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Mat;
use crate::neuralnet::{Mlp, MlpSpec, NodeId, ParamSet, Tape};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Net {
    Linear { weight: usize, bias: usize },
    Mlp(Mlp),
}

impl Net {
    /// An affine map initialized at zero, or an MLP when `hidden` is nonempty.
    pub fn init(
        input: usize,
        hidden: &[usize],
        output: usize,
        dropout: f64,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Net> {
        if hidden.is_empty() {
            let weight = params.push(Mat::zeros(input, output));
            let bias = params.push(Mat::zeros(1, output));
            Ok(Net::Linear { weight, bias })
        } else {
            let spec = MlpSpec::new(input, hidden, output, dropout)?;
            Ok(Net::Mlp(Mlp::init(spec, params, rng)?))
        }
    }

    pub fn bias_index(&self) -> usize {
        match self {
            Net::Linear { bias, .. } => *bias,
            Net::Mlp(m) => m.output_bias_index(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        dropout: Option<&mut Rng>,
    ) -> NodeId {
        match self {
            Net::Linear { weight, bias } => {
                let w = tape.param(params, *weight);
                let b = tape.param(params, *bias);
                tape.affine(x, w, b)
            }
            Net::Mlp(m) => m.forward(tape, params, x, dropout),
        }
    }

    pub fn predict(&self, params: &ParamSet, x: &Mat) -> Mat {
        match self {
            Net::Linear { weight, bias } => {
                let mut out = x.matmul(&params.tensors[*weight]);
                let b = &params.tensors[*bias].data;
                for row in out.data.chunks_mut(b.len()) {
                    for (v, bb) in row.iter_mut().zip(b) {
                        *v += bb;
                    }
                }
                out
            }
            Net::Mlp(m) => m.predict(params, x),
        }
    }
}
