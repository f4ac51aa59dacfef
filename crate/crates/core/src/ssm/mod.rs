//! State-space discretization, the selective scan, memory-decay analysis and
//! literal-summation reference evaluations of the recurrence.

pub mod oracle;
mod params;
pub mod scan;

pub use params::{Projections, SsmParams};
pub use scan::{selective_scan, selective_scan_backward, ScanDims, ScanGrads, ScanInputs, ScanTrace};

use crate::error::{contract, ensure, Result};
use crate::scalar::Scalar;

/// Shape of the state matrix `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmMode {
    /// One negative rate per (channel, state) entry, one timescale per channel.
    Diag,
    /// One negative rate and one timescale per head; channels split evenly
    /// across heads.
    Scalar { heads: usize },
}

/// How `B̄` is derived from `(Δ, A, B)`. `Ā = exp(ΔA)` in both cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discretization {
    /// `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`
    Zoh,
    /// `B̄ = ΔB`
    Euler,
}

impl std::str::FromStr for Discretization {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Discretization::Zoh),
            "euler" => Ok(Discretization::Euler),
            other => Err(crate::Error::Config(format!("unknown discretization `{other}`"))),
        }
    }
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Discretization::Zoh => "zoh",
            Discretization::Euler => "euler",
        })
    }
}

/// Discretizes one diagonal entry: returns `(Ā, B̄)`.
pub fn discretize_entry<T: Scalar>(a: T, b: T, delta: T, method: Discretization) -> Result<(T, T)> {
    ensure!(delta > T::zero(), "timescale must be positive, got {delta}");
    ensure!(a < T::zero(), "state rate must be negative, got {a}");
    let a_bar = (delta * a).exp();
    let b_bar = match method {
        Discretization::Euler => delta * b,
        Discretization::Zoh => (delta * a).exp_m1() / a * b,
    };
    Ok((a_bar, b_bar))
}

/// Elementwise [`discretize_entry`] over a diagonal `A` and matching `B`.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], delta: T, method: Discretization) -> Result<(Vec<T>, Vec<T>)> {
    ensure!(a.len() == b.len(), "A has {} diagonal entries but B has {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&a, &b)| discretize_entry(a, b, delta, method))
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}

/// Multiplicative weight `Π exp(AΔ_k) = exp(A·ΣΔ_k)` that an earlier token
/// keeps after the given span of timescales. An empty span gives 1.
pub fn decay_factor<T: Scalar>(a: T, deltas: &[T]) -> Result<T> {
    if let Some(bad) = deltas.iter().find(|&&d| d <= T::zero()) {
        return Err(contract!("decay span contains non-positive timescale {bad}"));
    }
    Ok((a * deltas.iter().copied().sum::<T>()).exp())
}

/// Contribution weight `α_{i,j} = C_j (Π_{k=j+1..i} Ā_k) B̄_j` of token `j`
/// to token `i`, one value per channel. Indices are 0-based and `j < i`.
pub fn channel_locality<T: Scalar>(inp: &ScanInputs<'_, T>, j: usize, i: usize) -> Result<Vec<T>> {
    ensure!(j < i, "locality span needs j < i, got j={j}, i={i}");
    ensure!(i < inp.dims.len, "locality span end {i} outside sequence of {}", inp.dims.len);
    locality_unchecked(inp, j, i)
}

/// Locality of every channel over the whole sequence (first token to last).
/// A one-token sequence degenerates to the empty product `C_0 B̄_0`.
pub fn locality_scores<T: Scalar>(inp: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    inp.validate()?;
    locality_unchecked(inp, 0, inp.dims.len - 1)
}

fn locality_unchecked<T: Scalar>(inp: &ScanInputs<'_, T>, j: usize, i: usize) -> Result<Vec<T>> {
    let d = inp.dims;
    let groups = d.groups();
    let s = d.state_dim;
    let mut span = vec![T::zero(); groups];
    for k in j + 1..=i {
        for (g, acc) in span.iter_mut().enumerate() {
            *acc += inp.delta[k * groups + g];
        }
    }
    (0..d.channels)
        .map(|c| {
            let g = d.group_of(c);
            let delta_j = inp.delta[j * groups + g];
            let mut alpha = T::zero();
            for n in 0..s {
                let a = inp.a[d.a_index(c, n)];
                let (_, b_bar) = discretize_entry(a, inp.b[j * s + n], delta_j, inp.method)?;
                alpha += inp.c[j * s + n] * (a * span[g]).exp() * b_bar;
            }
            Ok(alpha)
        })
        .collect()
}
