//! Isotonization operators mapping `ℝ^m` onto the nondecreasing cone.
//!
//! Each operator is almost everywhere a linear map; the returned
//! [`IsoBackward`] records that local linear map so the operators can be used
//! as layers in end-to-end training. At exact ties the backward map reuses the
//! choice the forward pass made (stable order / first wins).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which isotonization operator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsoOperator {
    Sort,
    Pava,
    MinMaxSweep,
}

impl std::str::FromStr for IsoOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sort" => Ok(IsoOperator::Sort),
            "pava" => Ok(IsoOperator::Pava),
            "minmax" | "min_max_sweep" | "minmaxsweep" => Ok(IsoOperator::MinMaxSweep),
            other => Err(Error::Config(format!("unknown isotonization operator `{other}`"))),
        }
    }
}

/// Local linear map of an isotonization operator.
#[derive(Debug, Clone, PartialEq)]
pub enum IsoBackward {
    /// `out[i] = v[source[i]]` with `source` a permutation (sort).
    Permutation(Vec<usize>),
    /// `out[i]` = mean of `v` over the block containing `i` (PAVA).
    Blocks(Vec<(usize, usize)>),
    /// `out[k] = v[source[k]]`, not necessarily a permutation (min-max sweep).
    Selection(Vec<usize>),
}

impl IsoBackward {
    /// Directional derivative: the operator's local linear map applied to `dv`.
    pub fn jvp(&self, dv: &[f64]) -> Vec<f64> {
        match self {
            IsoBackward::Permutation(src) | IsoBackward::Selection(src) => {
                src.iter().map(|&s| dv[s]).collect()
            }
            IsoBackward::Blocks(blocks) => {
                let mut out = vec![0.0; dv.len()];
                for &(a, b) in blocks {
                    let mean = dv[a..b].iter().sum::<f64>() / (b - a) as f64;
                    out[a..b].iter_mut().for_each(|o| *o = mean);
                }
                out
            }
        }
    }

    /// Transposed map, accumulated into `grad_in`: `grad_in += Jᵀ grad_out`.
    pub fn vjp_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        match self {
            IsoBackward::Permutation(src) | IsoBackward::Selection(src) => {
                for (&s, &g) in src.iter().zip(grad_out) {
                    grad_in[s] += g;
                }
            }
            // the block-averaging matrix is symmetric
            IsoBackward::Blocks(blocks) => {
                for &(a, b) in blocks {
                    let mean = grad_out[a..b].iter().sum::<f64>() / (b - a) as f64;
                    grad_in[a..b].iter_mut().for_each(|g| *g += mean);
                }
            }
        }
    }

    pub fn vjp(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; grad_out.len()];
        self.vjp_into(grad_out, &mut g);
        g
    }
}

/// Output of an isotonization operator together with its local linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicResult {
    pub values: Vec<f64>,
    pub backward: IsoBackward,
}

/// Order statistics of `v`; ties keep their original relative order.
pub fn sort_op(v: &[f64]) -> IsotonicResult {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    IsotonicResult {
        values: order.iter().map(|&i| v[i]).collect(),
        backward: IsoBackward::Permutation(order),
    }
}

/// Euclidean projection onto the nondecreasing cone by pooled adjacent
/// violators, in linear time.
pub fn pava(v: &[f64]) -> IsotonicResult {
    // stack of (start, len, sum)
    let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        let mut cur = (i, 1usize, x);
        while let Some(&(s, n, sum)) = blocks.last() {
            // merge while the previous block mean exceeds the current one
            if sum * cur.1 as f64 > cur.2 * n as f64 {
                blocks.pop();
                cur = (s, n + cur.1, sum + cur.2);
            } else {
                break;
            }
        }
        blocks.push(cur);
    }
    let mut values = vec![0.0; v.len()];
    let mut spans = Vec::with_capacity(blocks.len());
    for (s, n, sum) in blocks {
        let mean = sum / n as f64;
        values[s..s + n].iter_mut().for_each(|o| *o = mean);
        spans.push((s, s + n));
    }
    IsotonicResult {
        values,
        backward: IsoBackward::Blocks(spans),
    }
}

/// Min-max sweep from the 0-based `anchor` index: cumulative max upward,
/// cumulative min downward.
pub fn min_max_sweep(v: &[f64], anchor: usize) -> Result<IsotonicResult> {
    if anchor >= v.len() {
        return Err(Error::Domain(format!(
            "sweep anchor {anchor} out of range for length {}",
            v.len()
        )));
    }
    let m = v.len();
    let mut values = v.to_vec();
    let mut source: Vec<usize> = (0..m).collect();
    for k in anchor + 1..m {
        if values[k - 1] >= v[k] {
            values[k] = values[k - 1];
            source[k] = source[k - 1];
        }
    }
    for k in (0..anchor).rev() {
        if values[k + 1] <= v[k] {
            values[k] = values[k + 1];
            source[k] = source[k + 1];
        }
    }
    Ok(IsotonicResult {
        values,
        backward: IsoBackward::Selection(source),
    })
}

/// Applies `op`; `anchor` is only used by the min-max sweep.
pub fn apply(op: IsoOperator, v: &[f64], anchor: usize) -> Result<IsotonicResult> {
    match op {
        IsoOperator::Sort => Ok(sort_op(v)),
        IsoOperator::Pava => Ok(pava(v)),
        IsoOperator::MinMaxSweep => min_max_sweep(v, anchor),
    }
}

pub fn is_nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}
