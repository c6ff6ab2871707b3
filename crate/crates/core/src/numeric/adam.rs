use serde::{Deserialize, Serialize};

use super::dense::DenseArray;
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn for_param(p: &DenseArray, lr: f64) -> Self {
        Self::new(p.len(), lr)
    }

    /// Re-indexes moment rows after the tracked parameter was resized;
    /// `None` rows start from zero moments.
    pub fn remap_rows(&mut self, row_width: usize, sources: &[Option<usize>]) {
        let gather = |buf: &[f64]| {
            let mut out = Vec::with_capacity(sources.len() * row_width);
            for s in sources {
                match s {
                    Some(i) => out.extend_from_slice(&buf[i * row_width..(i + 1) * row_width]),
                    None => out.extend(std::iter::repeat_n(0.0, row_width)),
                }
            }
            out
        };
        self.m = gather(&self.m);
        self.v = gather(&self.v);
    }
}

/// Applies one bias-corrected Adam update and zeroes the gradient buffer.
pub fn adam_step(params: &mut DenseArray, state: &mut AdamState) -> Result<()> {
    if !params.has_grad() {
        return Err(Error::MissingGrad);
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension(format!(
            "Adam buffers of length {} for parameter of length {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let grad = params.grad().expect("checked").to_vec();
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.zero_grad();
    Ok(())
}
