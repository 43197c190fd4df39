//! Even partition of a patch grid into `g × g` sub-images, and the attention
//! mask that confines replicated class tokens to their sub-image.

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Split `n` into `parts` contiguous spans; earlier spans take the larger share.
fn spans(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGrid {
    pub g: usize,
    pub rows: usize,
    pub cols: usize,
    row_spans: Vec<(usize, usize)>,
    col_spans: Vec<(usize, usize)>,
}

impl RegionGrid {
    pub fn new(g: usize, rows: usize, cols: usize) -> Result<Self> {
        if g == 0 || g > rows || g > cols {
            return Err(Error::config(format!(
                "cannot split a {rows}x{cols} patch grid into {g}x{g} regions"
            )));
        }
        Ok(Self {
            g,
            rows,
            cols,
            row_spans: spans(rows, g),
            col_spans: spans(cols, g),
        })
    }

    pub fn regions(&self) -> usize {
        self.g * self.g
    }

    /// Region id (row-major over the `g × g` layout) of a row-major patch index.
    pub fn region_of(&self, patch: usize) -> usize {
        let (r, c) = (patch / self.cols, patch % self.cols);
        let ri = self.row_spans.iter().position(|&(a, b)| r >= a && r < b).unwrap();
        let ci = self.col_spans.iter().position(|&(a, b)| c >= a && c < b).unwrap();
        ri * self.g + ci
    }

    /// Row-major patch indices belonging to `region`.
    pub fn members(&self, region: usize) -> Vec<usize> {
        let (r0, r1) = self.row_spans[region / self.g];
        let (c0, c1) = self.col_spans[region % self.g];
        (r0..r1)
            .flat_map(|r| (c0..c1).map(move |c| r * self.cols + c))
            .collect()
    }

    pub fn all_members(&self) -> Vec<Vec<usize>> {
        (0..self.regions()).map(|r| self.members(r)).collect()
    }

    /// Normalized box covered by `region`.
    pub fn bbox(&self, region: usize) -> BBox {
        let (r0, r1) = self.row_spans[region / self.g];
        let (c0, c1) = self.col_spans[region % self.g];
        BBox::from_xyxy(
            c0 as f64 / self.cols as f64,
            r0 as f64 / self.rows as f64,
            c1 as f64 / self.cols as f64,
            r1 as f64 / self.rows as f64,
        )
    }
}

/// Boolean attention mask over `[global | local × g² | patches]`.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub locals: usize,
    pub patches: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(grid: &RegionGrid) -> Self {
        let locals = grid.regions();
        let patches = grid.rows * grid.cols;
        let n = 1 + locals + patches;
        let mut allow = vec![false; n * n];
        let first_patch = 1 + locals;
        // global and patch rows: global + every patch, never local tokens
        for row in std::iter::once(0).chain(first_patch..n) {
            allow[row * n] = true;
            for c in first_patch..n {
                allow[row * n + c] = true;
            }
        }
        for r in 0..locals {
            let row = 1 + r;
            allow[row * n + row] = true;
            for p in grid.members(r) {
                allow[row * n + first_patch + p] = true;
            }
        }
        Self {
            locals,
            patches,
            allow,
        }
    }

    pub fn len(&self) -> usize {
        1 + self.locals + self.patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.len() + col]
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.allow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        for (g, r, c) in [(2, 14, 14), (3, 7, 5), (2, 3, 3), (4, 4, 9)] {
            let grid = RegionGrid::new(g, r, c).unwrap();
            let mut seen = vec![0; r * c];
            for reg in 0..grid.regions() {
                for p in grid.members(reg) {
                    seen[p] += 1;
                    assert_eq!(grid.region_of(p), reg);
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn uneven_split_favors_earlier_regions() {
        let grid = RegionGrid::new(2, 3, 3).unwrap();
        assert_eq!(grid.members(0), vec![0, 1, 3, 4]);
        assert_eq!(grid.members(3), vec![8]);
    }

    #[test]
    fn boxes_tile_the_image() {
        let grid = RegionGrid::new(2, 14, 14).unwrap();
        let area: f64 = (0..4).map(|r| grid.bbox(r).w * grid.bbox(r).h).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert_eq!(grid.bbox(0), BBox::new(0.25, 0.25, 0.5, 0.5));
    }

    #[test]
    fn mask_rows() {
        let grid = RegionGrid::new(2, 2, 2).unwrap();
        let m = AttentionMask::new(&grid);
        assert_eq!(m.len(), 9);
        // global
        assert!(m.allows(0, 0));
        assert!((1..5).all(|c| !m.allows(0, c)));
        assert!((5..9).all(|c| m.allows(0, c)));
        // local 2 sees itself and patch 2 only
        let row: Vec<bool> = (0..9).map(|c| m.allows(3, c)).collect();
        assert_eq!(
            row,
            vec![false, false, false, true, false, false, false, true, false]
        );
        // patches never see locals
        for p in 5..9 {
            assert!((1..5).all(|c| !m.allows(p, c)));
            assert!(m.allows(p, 0));
        }
    }

    #[test]
    fn too_fine_a_split_is_rejected() {
        assert!(RegionGrid::new(3, 2, 8).is_err());
    }
}
