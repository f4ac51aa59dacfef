//! Stripe position encoding: a vertical depthwise dilated convolution over
//! the padded token map.

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StripeEncoderParams<T> {
    /// `[channels × k]`
    pub kernel: Tensor<T>,
    pub dilation: usize,
    pub residual: bool,
}

impl<T: Scalar> StripeEncoderParams<T> {
    /// Zero kernel, so the encoder starts as the identity when residual.
    pub fn zeros(channels: usize, k: usize, dilation: usize, residual: bool) -> Result<Self> {
        let p = StripeEncoderParams { kernel: Tensor::zeros(vec![channels, k]), dilation, residual };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, k) = self.kernel.dims2()?;
        ensure!(k % 2 == 1, "stripe kernel length must be odd, got {k}");
        ensure!(self.dilation >= 1, "stripe dilation must be ≥ 1");
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.shape()[1]
    }
}

fn check_layout(n: usize, back_map: &[(usize, usize)], height: usize, width: usize, keep: &[bool]) -> Result<()> {
    ensure!(keep.len() == n, "token mask has length {} for {n} tokens", keep.len());
    ensure!(back_map.len() == n, "back map has {} entries for {n} tokens", back_map.len());
    let mut seen = vec![false; height * width];
    for &(r, c) in back_map {
        ensure!(r < height && c < width, "token at ({r},{c}) outside {height}×{width}");
        ensure!(!seen[r * width + c], "duplicate coordinate ({r},{c}) in back map");
        seen[r * width + c] = true;
    }
    Ok(())
}

/// Encodes `sequence` (`[N × D]`) laid out on an `H × W` map by `back_map`.
///
/// Masked tokens (`keep[i] == false`) contribute zeros to the map and are
/// returned unchanged.
pub fn apply_s2pe<T: Scalar>(
    sequence: &Tensor<T>,
    back_map: &[(usize, usize)],
    height: usize,
    width: usize,
    keep: &[bool],
    params: &StripeEncoderParams<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    let (n, d) = sequence.dims2()?;
    ensure!(params.channels() == d, "stripe kernel has {} channels, tokens have {d}", params.channels());
    check_layout(n, back_map, height, width, keep)?;
    let mut map = vec![T::zero(); height * width * d];
    for (t, &(r, c)) in back_map.iter().enumerate() {
        if keep[t] {
            let cell = r * width + c;
            map[cell * d..(cell + 1) * d].copy_from_slice(sequence.row(t));
        }
    }
    let k = params.kernel_len();
    let centre = (k - 1) / 2;
    let w = params.kernel.data();
    let mut out = sequence.data().to_vec();
    for (t, &(r, c)) in back_map.iter().enumerate() {
        if !keep[t] {
            continue;
        }
        let mut conv = vec![T::zero(); d];
        for j in 0..k {
            let src = r as isize + (j as isize - centre as isize) * params.dilation as isize;
            if src < 0 || src >= height as isize {
                continue;
            }
            let cell = src as usize * width + c;
            for (ch, acc) in conv.iter_mut().enumerate() {
                *acc += w[ch * k + j] * map[cell * d + ch];
            }
        }
        let row = &mut out[t * d..(t + 1) * d];
        for (o, v) in row.iter_mut().zip(conv) {
            *o = if params.residual { *o + v } else { v };
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Differentiable form of [`apply_s2pe`]; `kernel` is the `[D × k]` weight.
#[allow(clippy::too_many_arguments)]
pub fn s2pe_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    back_map: &[(usize, usize)],
    height: usize,
    width: usize,
    keep: &[bool],
    dilation: usize,
    residual: bool,
) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    check_layout(n, back_map, height, width, keep)?;
    // Column-major cell order so the convolution length axis is vertical.
    let cells: Vec<usize> = back_map.iter().map(|&(r, c)| c * height + r).collect();
    let kept: Vec<usize> = (0..n).filter(|&t| keep[t]).collect();
    let rows = g.gather_rows(x, &kept)?;
    let kept_cells: Vec<usize> = kept.iter().map(|&t| cells[t]).collect();
    let map = g.scatter_rows(rows, &kept_cells, width * height)?;
    let map = g.reshape(map, vec![width, height, d])?;
    let conv = g.conv1d_depthwise(map, kernel, dilation)?;
    let conv = g.reshape(conv, vec![width * height, d])?;
    let back = g.gather_rows(conv, &cells)?;
    let encoded = if residual { g.add(x, back)? } else { back };
    g.select(keep, encoded, x)
}
