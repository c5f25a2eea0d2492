//! Blocked (tiled) matrix layout and the tiled matmul kernel.
//!
//! A 2-D `[N][C]` matrix becomes a 4-D `[nn][bn][nc][bc]` arrangement where
//! edge tiles are simply short — the blocked form is a pure permutation of the
//! row-major data, so converting back is exact. When `C` (or `K`) is not
//! divisible by `bc` (or `bk`) the block size snaps to the full dimension and
//! only the `N` dimension keeps remainder tiles.

use super::Tensor;
use crate::error::{Error, Result};

/// Tile sizes for the `[bn×bc]·[bc×bk]` micro-products.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub bn: usize,
    pub bc: usize,
    pub bk: usize,
}

impl BlockConfig {
    pub fn new(bn: usize, bc: usize, bk: usize) -> Self {
        assert!(bn > 0 && bc > 0 && bk > 0, "block sizes must be positive");
        BlockConfig { bn, bc, bk }
    }
}

/// A matrix stored tile-by-tile: tile (rb, cb) holds rows
/// `[rb·bn, min((rb+1)·bn, rows))` × cols `[cb·bc, min((cb+1)·bc, cols))`,
/// row-major inside the tile, tiles laid out rb-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bn: usize,
    pub bc: usize,
    /// Row-block count (`nn`).
    pub nn: usize,
    /// Column-block count (`nc`).
    pub nc: usize,
    data: Vec<f64>,
    /// Offset of each tile in `data`, rb-major, length `nn·nc + 1`.
    tile_offsets: Vec<usize>,
}

impl BlockedMatrix {
    pub fn from_dense(t: &Tensor, bn: usize, bc: usize) -> Result<BlockedMatrix> {
        if t.shape().len() != 2 {
            return Err(Error::shape("blocked layout requires a 2-D tensor"));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let nn = rows.div_ceil(bn);
        let nc = cols.div_ceil(bc);
        let mut data = Vec::with_capacity(rows * cols);
        let mut tile_offsets = Vec::with_capacity(nn * nc + 1);
        for rb in 0..nn {
            let r0 = rb * bn;
            let h = bn.min(rows - r0);
            for cb in 0..nc {
                let c0 = cb * bc;
                let w = bc.min(cols - c0);
                tile_offsets.push(data.len());
                for r in r0..r0 + h {
                    data.extend_from_slice(&t.row(r)[c0..c0 + w]);
                }
            }
        }
        tile_offsets.push(data.len());
        Ok(BlockedMatrix {
            rows,
            cols,
            bn,
            bc,
            nn,
            nc,
            data,
            tile_offsets,
        })
    }

    /// Inverse permutation back to a row-major tensor.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for rb in 0..self.nn {
            let r0 = rb * self.bn;
            let h = self.bn.min(self.rows - r0);
            for cb in 0..self.nc {
                let c0 = cb * self.bc;
                let w = self.bc.min(self.cols - c0);
                let tile = self.tile(rb, cb);
                for r in 0..h {
                    out.row_mut(r0 + r)[c0..c0 + w].copy_from_slice(&tile[r * w..(r + 1) * w]);
                }
            }
        }
        out
    }

    #[inline]
    pub fn tile(&self, rb: usize, cb: usize) -> &[f64] {
        let idx = rb * self.nc + cb;
        &self.data[self.tile_offsets[idx]..self.tile_offsets[idx + 1]]
    }

    #[inline]
    pub fn tile_height(&self, rb: usize) -> usize {
        self.bn.min(self.rows - rb * self.bn)
    }

    #[inline]
    pub fn tile_width(&self, cb: usize) -> usize {
        self.bc.min(self.cols - cb * self.bc)
    }
}

/// Tiled product `a[N×C] · w[C×K]` iterating `(bn×bc)·(bc×bk)` micro-kernels.
/// `N` gets remainder tiles; if `C % bc != 0` the block size falls back to
/// `bc = C`, and likewise `bk = K`.
pub fn matmul_blocked(a: &Tensor, w: &Tensor, cfg: &BlockConfig) -> Result<Tensor> {
    if a.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::shape("matmul_blocked requires 2-D tensors"));
    }
    let (n, c) = (a.rows(), a.cols());
    let (c2, k) = (w.rows(), w.cols());
    if c != c2 {
        return Err(Error::shape(format!(
            "matmul_blocked: inner dims disagree, {n}x{c} vs {c2}x{k}"
        )));
    }
    let bc = if c % cfg.bc == 0 { cfg.bc } else { c.max(1) };
    let bk = if k % cfg.bk == 0 { cfg.bk } else { k.max(1) };
    let ab = BlockedMatrix::from_dense(a, cfg.bn, bc)?;
    // Weight tiles are bc×bk; reuse the same layout type with bn := bc.
    let wb = BlockedMatrix::from_dense(w, bc, bk)?;

    let mut out = Tensor::zeros(&[n, k]);
    let mut acc = vec![0.0; cfg.bn * bk.max(1)];
    for rb in 0..ab.nn {
        let h = ab.tile_height(rb);
        let r0 = rb * cfg.bn;
        for kb in 0..wb.nc {
            let kw = wb.tile_width(kb);
            let k0 = kb * bk;
            acc[..h * kw].fill(0.0);
            for cb in 0..ab.nc {
                let cw = ab.tile_width(cb);
                let at = ab.tile(rb, cb); // h × cw
                let wt = wb.tile(cb, kb); // cw × kw
                for r in 0..h {
                    let arow = &at[r * cw..(r + 1) * cw];
                    let orow = &mut acc[r * kw..(r + 1) * kw];
                    for (p, &av) in arow.iter().enumerate() {
                        let wrow = &wt[p * kw..(p + 1) * kw];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += av * wv;
                        }
                    }
                }
            }
            for r in 0..h {
                out.row_mut(r0 + r)[k0..k0 + kw].copy_from_slice(&acc[r * kw..(r + 1) * kw]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[r, c], data).unwrap()
    }

    #[test]
    fn block_unblock_is_identity() {
        let mut rng = crate::rng::stream(&[21]);
        for &(r, c, bn, bc) in &[(7usize, 5usize, 4usize, 2usize), (8, 8, 3, 3), (1, 9, 2, 4)] {
            let t = rand_tensor(&mut rng, r, c);
            let blocked = BlockedMatrix::from_dense(&t, bn, bc).unwrap();
            assert_eq!(blocked.to_dense(), t);
        }
    }

    #[test]
    fn blocked_matches_unblocked_including_remainders() {
        let mut rng = crate::rng::stream(&[22]);
        // 7×5 · 5×3 with bn=4, bc=2, bk=2: N has a remainder tile and both
        // C and K snap to full size.
        let cases = [
            (7usize, 5usize, 3usize, BlockConfig::new(4, 2, 2)),
            (8, 6, 4, BlockConfig::new(2, 3, 2)),
            (5, 5, 5, BlockConfig::new(5, 5, 5)),
            (9, 4, 7, BlockConfig::new(4, 4, 3)),
            (3, 1, 1, BlockConfig::new(2, 1, 1)),
        ];
        for (n, c, k, cfg) in cases {
            let a = rand_tensor(&mut rng, n, c);
            let w = rand_tensor(&mut rng, c, k);
            let got = matmul_blocked(&a, &w, &cfg).unwrap();
            let want = matmul(&a, &w).unwrap();
            let diff = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "cfg {cfg:?} diff {diff}");
        }
    }
}
