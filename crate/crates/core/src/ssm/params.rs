use rand::Rng;

use crate::error::{ensure, Result};
use crate::scalar::{softplus, Scalar};
use crate::ssm::scan::{selective_scan, ScanDims, ScanInputs, ScanTrace};
use crate::ssm::{Discretization, SsmMode};
use crate::tensor::Tensor;

/// Trainable parameters of one selective state-space layer.
///
/// `A = −exp(a_log)` keeps every rate strictly negative; `Δ_t =
/// softplus(x_t·W_Δ + b_Δ)` keeps every timescale strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    pub mode: SsmMode,
    pub method: Discretization,
    pub d_model: usize,
    pub state_dim: usize,
    /// `[d_model × state_dim]` in diagonal mode, `[heads]` in scalar mode.
    pub a_log: Tensor<T>,
    pub in_proj: Tensor<T>,
    pub delta_proj: Tensor<T>,
    pub delta_bias: Tensor<T>,
    pub b_proj: Tensor<T>,
    pub c_proj: Tensor<T>,
    pub out_proj: Tensor<T>,
}

/// Per-token scan coefficients produced from a token sequence.
#[derive(Clone, Debug)]
pub struct Projections<T> {
    pub dims: ScanDims,
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> Projections<T> {
    pub fn inputs<'a>(
        &'a self,
        method: Discretization,
        keep: Option<&'a [bool]>,
        exempt: Option<&'a [bool]>,
    ) -> ScanInputs<'a, T> {
        ScanInputs {
            dims: self.dims,
            method,
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            keep,
            exempt,
        }
    }
}

/// Initial timescale every channel starts from.
pub(crate) const INITIAL_DELTA: f64 = 0.01;

/// `n` values evenly spaced over `[lo, hi]`; a single value sits at `lo`.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl<T: Scalar> SsmParams<T> {
    pub fn init<R: Rng>(
        mode: SsmMode,
        method: Discretization,
        d_model: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(d_model >= 1 && state_dim >= 1, "d_model and state_dim must be positive");
        let groups = match mode {
            SsmMode::Diag => d_model,
            SsmMode::Scalar { heads } => {
                ensure!(heads >= 1 && d_model % heads == 0, "{d_model} channels do not split into {heads} heads");
                heads
            }
        };
        let a_log = match mode {
            SsmMode::Diag => {
                let row = linspace(1.0, state_dim as f64, state_dim);
                let data = (0..d_model).flat_map(|_| row.iter().map(|v| T::lit(v.ln()))).collect();
                Tensor::new(vec![d_model, state_dim], data)?
            }
            SsmMode::Scalar { heads } => {
                let vals = linspace(1.0, state_dim as f64, heads);
                Tensor::new(vec![heads], vals.iter().map(|v| T::lit(v.ln())).collect())?
            }
        };
        let scale = 1.0 / (d_model as f64).sqrt();
        let bias = INITIAL_DELTA.exp_m1().ln();
        Ok(SsmParams {
            mode,
            method,
            d_model,
            state_dim,
            a_log,
            in_proj: Tensor::randn(rng, vec![d_model, d_model], scale),
            delta_proj: Tensor::randn(rng, vec![d_model, groups], 0.1 * scale),
            delta_bias: Tensor::full(vec![groups], T::lit(bias)),
            b_proj: Tensor::randn(rng, vec![d_model, state_dim], scale),
            c_proj: Tensor::randn(rng, vec![d_model, state_dim], scale),
            out_proj: Tensor::randn(rng, vec![d_model, d_model], scale),
        })
    }

    /// `A = −exp(a_log)`.
    pub fn a(&self) -> Vec<T> {
        self.a_log.data().iter().map(|&v| -v.exp()).collect()
    }

    pub fn dims(&self, len: usize) -> ScanDims {
        ScanDims {
            len,
            channels: self.d_model,
            state_dim: self.state_dim,
            mode: self.mode,
        }
    }

    /// Projects `[len × d_model]` tokens into scan coefficients.
    pub fn project(&self, tokens: &Tensor<T>) -> Result<Projections<T>> {
        let (len, d) = tokens.dims2()?;
        ensure!(d == self.d_model, "tokens have {d} features, layer expects {}", self.d_model);
        let delta = tokens
            .matmul(&self.delta_proj)?
            .add_row(&self.delta_bias)?
            .map(softplus)
            .into_data();
        Ok(Projections {
            dims: self.dims(len),
            u: tokens.matmul(&self.in_proj)?.into_data(),
            delta,
            a: self.a(),
            b: tokens.matmul(&self.b_proj)?.into_data(),
            c: tokens.matmul(&self.c_proj)?.into_data(),
        })
    }

    /// Full layer: projections, scan, output projection. Returns
    /// `[len × d_model]` outputs and the state trace.
    pub fn scan(
        &self,
        tokens: &Tensor<T>,
        keep: Option<&[bool]>,
        exempt: Option<&[bool]>,
    ) -> Result<(Tensor<T>, ScanTrace<T>)> {
        let proj = self.project(tokens)?;
        let trace = selective_scan(&proj.inputs(self.method, keep, exempt))?;
        let y = Tensor::new(vec![proj.dims.len, self.d_model], trace.outputs.clone())?;
        Ok((y.matmul(&self.out_proj)?, trace))
    }
}
