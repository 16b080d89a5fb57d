//! Inversion of block lower-triangular matrices.
//!
//! For `B = [[A, 0], [C, D]]` the inverse is `[[A^-1, 0], [-D^-1 C A^-1, D^-1]]`.
//! Applied down the diagonal this gives the forward recursion
//! `L_kk = D_k^-1`, `L_kj = -D_k^-1 sum_{m=j}^{k-1} C_km L_mj`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::checked_inverse;

/// Square matrix partitioned into blocks, zero above the block diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLowerTriangular {
    sizes: Vec<usize>,
    /// `blocks[k][j]` for `j <= k`, of shape `sizes[k] x sizes[j]`.
    blocks: Vec<Vec<DMatrix<f64>>>,
}

impl BlockLowerTriangular {
    /// All-zero matrix with the given diagonal block sizes.
    pub fn zeros(sizes: &[usize]) -> Self {
        let blocks = sizes
            .iter()
            .enumerate()
            .map(|(k, &rk)| sizes[..=k].iter().map(|&cj| DMatrix::zeros(rk, cj)).collect())
            .collect();
        Self {
            sizes: sizes.to_vec(),
            blocks,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn block(&self, k: usize, j: usize) -> &DMatrix<f64> {
        assert!(j <= k, "block ({k}, {j}) is above the diagonal");
        &self.blocks[k][j]
    }

    pub fn block_mut(&mut self, k: usize, j: usize) -> &mut DMatrix<f64> {
        assert!(j <= k, "block ({k}, {j}) is above the diagonal");
        &mut self.blocks[k][j]
    }

    pub fn set_block(&mut self, k: usize, j: usize, m: DMatrix<f64>) {
        assert_eq!(m.shape(), (self.sizes[k], self.sizes[j]), "block ({k}, {j}) has wrong shape");
        *self.block_mut(k, j) = m;
    }

    /// Row (and column) offset of each block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.sizes.len());
        let mut acc = 0;
        for &s in &self.sizes {
            off.push(acc);
            acc += s;
        }
        off
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let off = self.offsets();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (k, row) in self.blocks.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                out.view_mut((off[k], off[j]), b.shape()).copy_from(b);
            }
        }
        out
    }

    /// Partitions a dense matrix, ignoring entries above the block diagonal.
    pub fn from_dense(m: &DMatrix<f64>, sizes: &[usize]) -> Self {
        let mut out = Self::zeros(sizes);
        let off = out.offsets();
        for k in 0..sizes.len() {
            for j in 0..=k {
                out.blocks[k][j] = m.view((off[k], off[j]), (sizes[k], sizes[j])).into_owned();
            }
        }
        out
    }
}

/// Inverts block by block. A diagonal block that is singular or has
/// condition number above [`crate::linalg::MAX_CONDITION`] yields
/// [`Error::SingularBlock`] with its 0-based index.
pub fn block_lower_triangular_inverse(m: &BlockLowerTriangular) -> Result<BlockLowerTriangular> {
    let k_count = m.n_blocks();
    let mut inv = BlockLowerTriangular::zeros(&m.sizes);
    for k in 0..k_count {
        let dk_inv = checked_inverse(m.block(k, k)).map_err(|condition| Error::SingularBlock { block: k, condition })?;
        for j in 0..k {
            let mut acc = DMatrix::zeros(m.sizes[k], m.sizes[j]);
            for mid in j..k {
                acc.gemm(1.0, m.block(k, mid), inv.block(mid, j), 1.0);
            }
            inv.blocks[k][j] = -(&dk_inv * acc);
        }
        inv.blocks[k][k] = dk_inv;
    }
    Ok(inv)
}
