//! Literal-summation evaluations of the unrolled recurrence.
//!
//! These deliberately avoid the recursive update: every hidden state is
//! rebuilt as an explicit weighted sum over its predecessors, so they serve
//! as independent references for [`selective_scan`](super::selective_scan).
//! All positions are 1-based, matching the usual statement of the sums.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

fn product<T: Scalar>(factors: &[T], from: usize, to: usize) -> T {
    // Π_{k=from..=to}, 1-based; empty when from > to.
    (from..=to).fold(T::one(), |acc, k| acc * factors[k - 1])
}

/// `h_i = Σ_{j=1..i} (Π_{k=j+1..i} Ā_k) B̄_j x_j` for one scalar state entry.
pub fn hidden_state_oracle<T: Scalar>(a_bar: &[T], b_bar: &[T], x: &[T], i: usize) -> Result<T> {
    ensure!(
        a_bar.len() == b_bar.len() && b_bar.len() == x.len(),
        "oracle sequences have lengths {}, {}, {}",
        a_bar.len(),
        b_bar.len(),
        x.len()
    );
    ensure!(i >= 1 && i <= x.len(), "oracle index {i} outside 1..={}", x.len());
    Ok((1..=i).map(|j| product(a_bar, j + 1, i) * b_bar[j - 1] * x[j - 1]).sum())
}

/// Row-major position `ℓ(i, j) = (i − 1)·W + j` of cell `(i, j)`.
pub fn linearize(i: usize, j: usize, width: usize) -> Result<usize> {
    ensure!(i >= 1, "row index must be ≥ 1, got {i}");
    ensure!(j >= 1 && j <= width, "column {j} outside 1..={width}");
    Ok((i - 1) * width + j)
}

/// 2D hidden state `h_{i,j} = Σ_{u≤i} Σ_{v≤j} Φ(u,v;i,j) B̄_{u,v} x_{u,v}` with
/// `Φ = (Π_{p=u+1..i} Ā^row_p)(Π_{q=v+1..j} Ā^col_q)`.
///
/// `row_factors` has one entry per grid row and `col_factors` one per column;
/// `b_bar` and `x` are `[height × width]` row-major.
pub fn scan_2d_oracle<T: Scalar>(
    row_factors: &[T],
    col_factors: &[T],
    b_bar: &[T],
    x: &[T],
    i: usize,
    j: usize,
) -> Result<T> {
    let (h, w) = (row_factors.len(), col_factors.len());
    ensure!(b_bar.len() == h * w && x.len() == h * w, "grid inputs must be {h}×{w}");
    ensure!(i >= 1 && i <= h && j >= 1 && j <= w, "location ({i},{j}) outside {h}×{w} grid");
    let mut acc = T::zero();
    for u in 1..=i {
        let vertical = product(row_factors, u + 1, i);
        for v in 1..=j {
            let phi = vertical * product(col_factors, v + 1, j);
            let cell = (u - 1) * w + (v - 1);
            acc += phi * b_bar[cell] * x[cell];
        }
    }
    Ok(acc)
}

/// 1D recurrence on a row-major grid, evaluated as the contribution of all
/// previous full rows plus the prefix of the current row.
///
/// Equals [`hidden_state_oracle`] at `ℓ(i, j)` up to summation order: the two
/// partial sums are formed separately and then added.
pub fn split_recurrence_oracle<T: Scalar>(
    a_bar: &[T],
    b_bar: &[T],
    x: &[T],
    width: usize,
    i: usize,
    j: usize,
) -> Result<T> {
    ensure!(width >= 1 && a_bar.len() % width == 0, "flat length {} is not a multiple of width {width}", a_bar.len());
    ensure!(a_bar.len() == b_bar.len() && b_bar.len() == x.len(), "grid inputs differ in length");
    let height = a_bar.len() / width;
    ensure!(i >= 1 && i <= height, "row {i} outside 1..={height}");
    let target = linearize(i, j, width)?;
    let term = |u: usize, v: usize| -> Result<T> {
        let t = linearize(u, v, width)?;
        Ok(product(a_bar, t + 1, target) * b_bar[t - 1] * x[t - 1])
    };
    let mut previous_rows = T::zero();
    for u in 1..i {
        for v in 1..=width {
            previous_rows += term(u, v)?;
        }
    }
    let mut current_row = T::zero();
    for v in 1..=j {
        current_row += term(i, v)?;
    }
    Ok(previous_rows + current_row)
}
