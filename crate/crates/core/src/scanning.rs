//! Token orderings over spatial grids.
//!
//! Cells are addressed 0-based as `(row, col)`; the flat order is row-major
//! over valid cells only. Blank cells never enter a token sequence and only
//! reappear inside padded rectangles.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grid extents, per-cell validity and the row-major list of valid cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridIndex {
    height: usize,
    width: usize,
    valid: Vec<bool>,
    coords: Vec<(usize, usize)>,
}

impl GridIndex {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "grid extents must be positive, got {height}×{width}");
        ensure!(
            valid.len() == height * width,
            "validity mask has {} cells for a {height}×{width} grid",
            valid.len()
        );
        let coords = (0..height * width)
            .filter(|&t| valid[t])
            .map(|t| (t / width, t % width))
            .collect();
        Ok(GridIndex { height, width, valid, coords })
    }

    /// Every cell valid.
    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// `(row, col)` of each flat token.
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    /// Number of valid cells, i.e. the token count.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.valid[row * self.width + col]
    }

    /// Flat token index of a cell, if it is valid.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        if !self.is_valid(row, col) {
            return None;
        }
        self.coords.binary_search(&(row, col)).ok()
    }
}

/// Extent of the half-stride fine grid over an `h × w` coarse grid.
pub fn overlap_extent(height: usize, width: usize) -> Result<(usize, usize)> {
    ensure!(height >= 1 && width >= 1, "coarse grid extents must be positive, got {height}×{width}");
    Ok((2 * height - 1, 2 * width - 1))
}

/// Coarse cells covered by the fine cell `(row, col)`: one, two or four of them.
pub fn overlapped_coarse(row: usize, col: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = [row / 2, row.div_ceil(2)];
    let cols = [col / 2, col.div_ceil(2)];
    let nr = if rows[0] == rows[1] { 1 } else { 2 };
    let nc = if cols[0] == cols[1] { 1 } else { 2 };
    (0..nr).flat_map(move |i| (0..nc).map(move |j| (rows[i], cols[j])))
}

/// Half-stride overlapping positions over `coarse`.
///
/// A fine cell is valid when any coarse cell it overlaps is valid.
pub fn overlap_positions(coarse: &GridIndex) -> GridIndex {
    let (fh, fw) = (2 * coarse.height - 1, 2 * coarse.width - 1);
    let valid = (0..fh * fw)
        .map(|t| overlapped_coarse(t / fw, t % fw).any(|(r, c)| coarse.is_valid(r, c)))
        .collect();
    GridIndex::new(fh, fw, valid).expect("fine extents are positive")
}

/// Fine tokens that sit exactly on a coarse cell (even row and column).
///
/// Returns the flat indices into `fine` in order, together with the coarse
/// grid they form.
pub fn coarse_subset(fine: &GridIndex) -> Result<(Vec<usize>, GridIndex)> {
    ensure!(
        fine.height % 2 == 1 && fine.width % 2 == 1,
        "fine grid {}×{} is not a half-stride grid",
        fine.height,
        fine.width
    );
    let (ch, cw) = (fine.height.div_ceil(2), fine.width.div_ceil(2));
    let mut valid = vec![false; ch * cw];
    let mut picks = Vec::new();
    for (t, &(r, c)) in fine.coords.iter().enumerate() {
        if r % 2 == 0 && c % 2 == 0 {
            picks.push(t);
            valid[(r / 2) * cw + c / 2] = true;
        }
    }
    Ok((picks, GridIndex::new(ch, cw, valid)?))
}

/// Row-major valid cells of `grid` (`[H × W × D]`) and their coordinates.
pub fn flatten<T: Scalar>(grid: &Tensor<T>, index: &GridIndex) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    ensure!(
        grid.rank() == 3 && grid.shape()[0] == index.height && grid.shape()[1] == index.width,
        "grid of shape {:?} does not match index extents {}×{}",
        grid.shape(),
        index.height,
        index.width
    );
    let d = grid.shape()[2];
    let mut data = Vec::with_capacity(index.len() * d);
    for &(r, c) in &index.coords {
        let base = (r * index.width + c) * d;
        data.extend_from_slice(&grid.data()[base..base + d]);
    }
    Ok((Tensor::new(vec![index.len(), d], data)?, index.coords.clone()))
}

/// Scatters a token sequence back into a zero-filled `[H × W × D]` grid.
///
/// Returns the grid and the row-major cell mask of occupied cells.
pub fn pad_to_rectangle<T: Scalar>(
    sequence: &Tensor<T>,
    back_map: &[(usize, usize)],
    height: usize,
    width: usize,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (n, d) = sequence.dims2()?;
    ensure!(back_map.len() == n, "back map has {} entries for {n} tokens", back_map.len());
    let mut grid = vec![T::zero(); height * width * d];
    let mut mask = vec![false; height * width];
    for (t, &(r, c)) in back_map.iter().enumerate() {
        ensure!(r < height && c < width, "token {t} at ({r},{c}) outside {height}×{width}");
        let cell = r * width + c;
        ensure!(!mask[cell], "duplicate coordinate ({r},{c}) in back map");
        mask[cell] = true;
        grid[cell * d..(cell + 1) * d].copy_from_slice(sequence.row(t));
    }
    Ok((Tensor::new(vec![height, width, d], grid)?, mask))
}

/// Fraction of valid cells.
pub fn tissue_ratio(index: &GridIndex) -> f64 {
    index.len() as f64 / (index.height * index.width) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_counts() {
        let one = overlap_positions(&GridIndex::full(1, 1).unwrap());
        assert_eq!(one.len(), 1);
        let two = overlap_positions(&GridIndex::full(2, 2).unwrap());
        assert_eq!((two.height(), two.width(), two.len()), (3, 3, 9));
        let eight = overlap_positions(&GridIndex::full(8, 8).unwrap());
        assert_eq!(eight.len(), 225);
        assert!(overlap_extent(0, 3).is_err());
    }

    #[test]
    fn overlap_cover_sets() {
        assert_eq!(overlapped_coarse(0, 0).collect::<Vec<_>>(), vec![(0, 0)]);
        assert_eq!(overlapped_coarse(1, 2).collect::<Vec<_>>(), vec![(0, 1), (1, 1)]);
        assert_eq!(overlapped_coarse(3, 1).count(), 4);
    }

    #[test]
    fn overlap_validity_is_or() {
        // 2×2 coarse with only (0,0) valid: fine cells touching it are valid.
        let coarse = GridIndex::new(2, 2, vec![true, false, false, false]).unwrap();
        let fine = overlap_positions(&coarse);
        assert_eq!(fine.coords(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn flatten_orders() {
        let idx = GridIndex::full(1, 3).unwrap();
        assert_eq!(idx.coords(), &[(0, 0), (0, 1), (0, 2)]);
        let idx = GridIndex::new(2, 2, vec![true, false, true, true]).unwrap();
        assert_eq!(idx.coords(), &[(0, 0), (1, 0), (1, 1)]);
        assert_eq!(idx.position(1, 1), Some(2));
        assert_eq!(idx.position(0, 1), None);
    }

    #[test]
    fn single_token_pad() {
        let seq = Tensor::<f64>::from_f64(vec![1, 2], &[4.0, 5.0]).unwrap();
        let (grid, mask) = pad_to_rectangle(&seq, &[(1, 1)], 3, 3).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(grid.data().iter().filter(|&&v| v == 0.0).count(), 16);
        assert!(pad_to_rectangle(&Tensor::<f64>::zeros(vec![2, 1]), &[(0, 0), (0, 0)], 2, 2).is_err());
        assert!(pad_to_rectangle(&seq, &[(3, 0)], 3, 3).is_err());
    }

    #[test]
    fn tissue_ratios() {
        let mut valid = vec![false; 9];
        valid[..4].fill(true);
        let idx = GridIndex::new(3, 3, valid).unwrap();
        assert!((tissue_ratio(&idx) - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(tissue_ratio(&GridIndex::full(2, 5).unwrap()), 1.0);
        assert_eq!(tissue_ratio(&GridIndex::new(2, 2, vec![false; 4]).unwrap()), 0.0);
    }

    #[test]
    fn coarse_subset_of_full_overlap() {
        let coarse = GridIndex::new(2, 3, vec![true, false, true, true, true, false]).unwrap();
        let fine = overlap_positions(&coarse);
        let (picks, back) = coarse_subset(&fine).unwrap();
        assert_eq!(picks.len(), 4);
        assert_eq!(back, coarse);
    }
}
