//! Sequential selective scan with optional per-token state passthrough.
//!
//! Layout conventions (all row-major):
//! - `u`: `[len × channels]` token inputs
//! - `delta`: `[len × groups]` positive timescales, one per channel group
//! - `a`: `[channels × state_dim]` in diagonal mode, `[groups]` in scalar mode
//! - `b`, `c`: `[len × state_dim]`, shared by all channels
//!
//! States are kept for every step so the reverse pass can replay them.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::ssm::{Discretization, SsmMode};

/// Extents of one scan problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub mode: SsmMode,
}

impl ScanDims {
    pub fn groups(&self) -> usize {
        match self.mode {
            SsmMode::Diag => self.channels,
            SsmMode::Scalar { heads } => heads,
        }
    }

    pub fn a_len(&self) -> usize {
        match self.mode {
            SsmMode::Diag => self.channels * self.state_dim,
            SsmMode::Scalar { heads } => heads,
        }
    }

    #[inline]
    pub fn group_of(&self, channel: usize) -> usize {
        match self.mode {
            SsmMode::Diag => channel,
            SsmMode::Scalar { heads } => channel / (self.channels / heads),
        }
    }

    #[inline]
    pub fn a_index(&self, channel: usize, n: usize) -> usize {
        match self.mode {
            SsmMode::Diag => channel * self.state_dim + n,
            SsmMode::Scalar { .. } => self.group_of(channel),
        }
    }
}

/// Borrowed inputs of a scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub method: Discretization,
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    /// `keep[t] == false` freezes the state at token `t` on non-exempt channels.
    pub keep: Option<&'a [bool]>,
    /// Channels that update even on dropped tokens.
    pub exempt: Option<&'a [bool]>,
}

/// Outputs plus every hidden state, `states[0]` being the zero initial state.
#[derive(Clone, Debug)]
pub struct ScanTrace<T> {
    pub dims: ScanDims,
    /// `[len × channels]`
    pub outputs: Vec<T>,
    /// `[(len + 1) × channels × state_dim]`
    pub states: Vec<T>,
}

impl<T: Scalar> ScanTrace<T> {
    /// Hidden state of `channel` after the first `t` tokens; `t = 0` is the zero state.
    pub fn state(&self, t: usize, channel: usize) -> &[T] {
        let s = self.dims.state_dim;
        let base = (t * self.dims.channels + channel) * s;
        &self.states[base..base + s]
    }

    /// Final state, `[channels × state_dim]`.
    pub fn final_state(&self) -> &[T] {
        let step = self.dims.channels * self.dims.state_dim;
        &self.states[self.dims.len * step..]
    }
}

impl<'a, T: Scalar> ScanInputs<'a, T> {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        ensure!(d.len >= 1, "selective scan over an empty sequence");
        ensure!(d.channels >= 1 && d.state_dim >= 1, "scan needs channels and state_dim ≥ 1");
        if let SsmMode::Scalar { heads } = d.mode {
            ensure!(
                heads >= 1 && d.channels % heads == 0,
                "{} channels do not split into {heads} heads",
                d.channels
            );
        }
        let g = d.groups();
        ensure!(self.u.len() == d.len * d.channels, "scan input u has {} values, expected {}", self.u.len(), d.len * d.channels);
        ensure!(self.delta.len() == d.len * g, "scan delta has {} values, expected {}", self.delta.len(), d.len * g);
        ensure!(self.a.len() == d.a_len(), "scan A has {} values, expected {}", self.a.len(), d.a_len());
        ensure!(self.b.len() == d.len * d.state_dim, "scan B has {} values, expected {}", self.b.len(), d.len * d.state_dim);
        ensure!(self.c.len() == d.len * d.state_dim, "scan C has {} values, expected {}", self.c.len(), d.len * d.state_dim);
        if let Some(k) = self.keep {
            ensure!(k.len() == d.len, "token mask has length {}, sequence has {}", k.len(), d.len);
        }
        if let Some(e) = self.exempt {
            ensure!(e.len() == d.channels, "channel exemption has length {}, model has {} channels", e.len(), d.channels);
        }
        ensure!(self.a.iter().all(|&a| a < T::zero()), "state matrix A must be strictly negative");
        ensure!(self.delta.iter().all(|&v| v > T::zero()), "timescales must be strictly positive");
        Ok(())
    }

    #[inline]
    fn passthrough(&self, t: usize, channel: usize) -> bool {
        let dropped = self.keep.is_some_and(|k| !k[t]);
        dropped && !self.exempt.is_some_and(|e| e[channel])
    }
}

/// Discrete input coefficient and its partials `(b̄, ∂b̄/∂Δ, ∂b̄/∂A, ∂b̄/∂B)`
/// for unit `B`; multiply by the actual `B` to scale.
#[inline]
fn input_coeff<T: Scalar>(method: Discretization, delta: T, a: T, a_bar: T) -> (T, T, T, T) {
    match method {
        Discretization::Euler => (delta, T::one(), T::zero(), delta),
        Discretization::Zoh => {
            let em1 = (delta * a).exp_m1();
            let coeff = em1 / a;
            let d_a = (a_bar * delta * a - em1) / (a * a);
            (coeff, a_bar, d_a, coeff)
        }
    }
}

/// Runs the recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t · h_t`.
///
/// Dropped tokens copy the previous state unchanged on non-exempt channels and
/// still emit `y_t = C_t · h_{t-1}`.
pub fn selective_scan<T: Scalar>(inp: &ScanInputs<'_, T>) -> Result<ScanTrace<T>> {
    inp.validate()?;
    let d = inp.dims;
    let (len, ch, s) = (d.len, d.channels, d.state_dim);
    let groups = d.groups();
    let step = ch * s;
    let mut states = vec![T::zero(); (len + 1) * step];
    let mut outputs = vec![T::zero(); len * ch];
    let mut a_bar = vec![T::zero(); s];
    let mut b_bar = vec![T::zero(); s];

    for t in 0..len {
        let (prev_all, cur_all) = states[t * step..(t + 2) * step].split_at_mut(step);
        let b_row = &inp.b[t * s..(t + 1) * s];
        let c_row = &inp.c[t * s..(t + 1) * s];
        let mut cached_group = usize::MAX;
        for c in 0..ch {
            let prev = &prev_all[c * s..(c + 1) * s];
            let cur = &mut cur_all[c * s..(c + 1) * s];
            if inp.passthrough(t, c) {
                cur.copy_from_slice(prev);
            } else {
                let g = d.group_of(c);
                let delta = inp.delta[t * groups + g];
                // Scalar mode shares Ā and B̄ across a head; recompute only on change.
                let shared = matches!(d.mode, SsmMode::Scalar { .. });
                if !shared || g != cached_group {
                    for n in 0..s {
                        let a = inp.a[d.a_index(c, n)];
                        let ab = (delta * a).exp();
                        let (coeff, ..) = input_coeff(inp.method, delta, a, ab);
                        a_bar[n] = ab;
                        b_bar[n] = coeff * b_row[n];
                    }
                    cached_group = g;
                }
                let x = inp.u[t * ch + c];
                for n in 0..s {
                    cur[n] = a_bar[n] * prev[n] + b_bar[n] * x;
                }
            }
            outputs[t * ch + c] = c_row.iter().zip(cur.iter()).map(|(&cv, &h)| cv * h).sum();
        }
    }
    Ok(ScanTrace {
        dims: d,
        outputs,
        states,
    })
}

/// Gradients of a scalar loss with respect to every scan input.
#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// Reverse sweep of [`selective_scan`] given `∂L/∂y` of shape `[len × channels]`.
pub fn selective_scan_backward<T: Scalar>(
    inp: &ScanInputs<'_, T>,
    trace: &ScanTrace<T>,
    grad_out: &[T],
) -> ScanGrads<T> {
    let d = inp.dims;
    let (len, ch, s) = (d.len, d.channels, d.state_dim);
    let groups = d.groups();
    let step = ch * s;
    let mut g = ScanGrads {
        u: vec![T::zero(); len * ch],
        delta: vec![T::zero(); len * groups],
        a: vec![T::zero(); d.a_len()],
        b: vec![T::zero(); len * s],
        c: vec![T::zero(); len * s],
    };
    let mut dh = vec![T::zero(); step];

    for t in (0..len).rev() {
        let prev_all = &trace.states[t * step..(t + 1) * step];
        let cur_all = &trace.states[(t + 1) * step..(t + 2) * step];
        let b_row = &inp.b[t * s..(t + 1) * s];
        let c_row = &inp.c[t * s..(t + 1) * s];
        for c in 0..ch {
            let gy = grad_out[t * ch + c];
            let cur = &cur_all[c * s..(c + 1) * s];
            let dh_c = &mut dh[c * s..(c + 1) * s];
            for n in 0..s {
                g.c[t * s + n] += gy * cur[n];
                dh_c[n] += gy * c_row[n];
            }
            if inp.passthrough(t, c) {
                continue;
            }
            let prev = &prev_all[c * s..(c + 1) * s];
            let grp = d.group_of(c);
            let delta = inp.delta[t * groups + grp];
            let x = inp.u[t * ch + c];
            let mut du = T::zero();
            let mut ddelta = T::zero();
            for n in 0..s {
                let ai = d.a_index(c, n);
                let a = inp.a[ai];
                let ab = (delta * a).exp();
                let (coeff, dc_dd, dc_da, _) = input_coeff(inp.method, delta, a, ab);
                let bn = b_row[n];
                let adj = dh_c[n];
                let d_ab = adj * prev[n];
                let d_bb = adj * x;
                du += adj * coeff * bn;
                ddelta += d_ab * ab * a + d_bb * dc_dd * bn;
                g.a[ai] += d_ab * ab * delta + d_bb * dc_da * bn;
                g.b[t * s + n] += d_bb * coeff;
                dh_c[n] = adj * ab;
            }
            g.u[t * ch + c] += du;
            g.delta[t * groups + grp] += ddelta;
        }
    }
    g
}
