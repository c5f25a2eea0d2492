//! Dense numeric kernels: matmul (plain and blocked), fused UPDATE epilogues,
//! softmax-family ops over edge groups, and the elementwise pieces the models
//! need, each with an explicit backward.

pub mod blocked;
pub mod fused;

use crate::error::{Error, Result};
use rayon::prelude::*;

pub use blocked::{matmul_blocked, BlockConfig, BlockedMatrix};
pub use fused::{
    affine_relu_backward, affine_relu_forward, affine_sum_backward, affine_sum_forward,
    fused_update_backward, fused_update_forward, fused_update_sum_backward,
    fused_update_sum_forward, FusedOut,
};

/// Dense row-major tensor of f64. Shape is usually 2-D here; the blocked 4-D
/// views live in [`blocked::BlockedMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// New tensor whose row k is `self.row(idx[k])`.
    pub fn gather_rows(&self, idx: &[u32]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i as usize));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "hadamard: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

fn check_matrix(t: &Tensor, name: &str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!(
            "{name} must be 2-D, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// Dense product `a[N×C] · b[C×K]`. Row-parallel with an i-k-j inner loop so
/// each output row is accumulated in a fixed order regardless of thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "a")?;
    check_matrix(b, "b")?;
    let (n, c) = (a.rows(), a.cols());
    let (c2, k) = (b.rows(), b.cols());
    if c != c2 {
        return Err(Error::shape(format!(
            "matmul: inner dims disagree, {n}x{c} vs {c2}x{k}"
        )));
    }
    let mut out = vec![0.0; n * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, out_row)| {
        let a_row = a.row(i);
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * k..(p + 1) * k];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    });
    Tensor::from_vec(&[n, k], out)
}

/// `aᵀ[C×N] · b[N×K]` without materializing the transpose. Used for weight
/// gradients; accumulation order over N is ascending rows.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "a")?;
    check_matrix(b, "b")?;
    let (n, c) = (a.rows(), a.cols());
    let (n2, k) = (b.rows(), b.cols());
    if n != n2 {
        return Err(Error::shape(format!(
            "matmul_at_b: row counts disagree, {n} vs {n2}"
        )));
    }
    let mut out = vec![0.0; c * k];
    for i in 0..n {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * k..(p + 1) * k];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_vec(&[c, k], out)
}

/// `a[N×K] · bᵀ[K×C]` without materializing the transpose (input gradients).
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "a")?;
    check_matrix(b, "b")?;
    let (n, k) = (a.rows(), a.cols());
    let (c, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_a_bt: inner dims disagree, {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; n * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, out_row)| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    Tensor::from_vec(&[n, c], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// d/dx of relu evaluated at the pre-activation, times upstream grad.
pub fn relu_backward(grad: &Tensor, pre_act: &Tensor) -> Tensor {
    assert_eq!(grad.shape, pre_act.shape);
    let data = grad
        .data
        .iter()
        .zip(&pre_act.data)
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: grad.shape.clone(),
        data,
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(move |v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(grad: &Tensor, pre_act: &Tensor, slope: f64) -> Tensor {
    assert_eq!(grad.shape, pre_act.shape);
    let data = grad
        .data
        .iter()
        .zip(&pre_act.data)
        .map(|(&g, &p)| if p > 0.0 { g } else { slope * g })
        .collect();
    Tensor {
        shape: grad.shape.clone(),
        data,
    }
}

/// Stable grouping of edge indices by destination: `groups[d]` lists edge ids
/// with `dst[e] == d` in input order.
pub(crate) fn group_by_dst(dst: &[u32], num_dst: usize) -> Vec<Vec<u32>> {
    let mut groups = vec![Vec::new(); num_dst];
    for (e, &d) in dst.iter().enumerate() {
        groups[d as usize].push(e as u32);
    }
    groups
}

/// Normalizes per-edge attention logits into coefficients that sum to 1 over
/// each destination's in-edges, independently per head (column). Destinations
/// with no in-edges simply contribute no coefficients.
pub fn edge_softmax(logits: &Tensor, dst: &[u32], num_dst: usize) -> Result<Tensor> {
    check_matrix(logits, "logits")?;
    if logits.rows() != dst.len() {
        return Err(Error::shape(format!(
            "edge_softmax: {} logit rows vs {} edges",
            logits.rows(),
            dst.len()
        )));
    }
    let heads = logits.cols();
    let groups = group_by_dst(dst, num_dst);
    let mut out = Tensor::zeros(&[dst.len(), heads]);
    for group in &groups {
        if group.is_empty() {
            continue;
        }
        for h in 0..heads {
            let mut max = f64::NEG_INFINITY;
            for &e in group {
                max = max.max(logits.at(e as usize, h));
            }
            let mut sum = 0.0;
            for &e in group {
                let v = (logits.at(e as usize, h) - max).exp();
                out.data[e as usize * heads + h] = v;
                sum += v;
            }
            for &e in group {
                out.data[e as usize * heads + h] /= sum;
            }
        }
    }
    Ok(out)
}

/// Backward of [`edge_softmax`]: `d logit_e = α_e (g_e − Σ_{e'∈dst(e)} α_{e'} g_{e'})`.
pub fn edge_softmax_backward(
    alpha: &Tensor,
    grad_alpha: &Tensor,
    dst: &[u32],
    num_dst: usize,
) -> Result<Tensor> {
    if alpha.shape != grad_alpha.shape {
        return Err(Error::shape(format!(
            "edge_softmax_backward: {:?} vs {:?}",
            alpha.shape, grad_alpha.shape
        )));
    }
    let heads = alpha.cols();
    let groups = group_by_dst(dst, num_dst);
    let mut out = Tensor::zeros(&[dst.len(), heads]);
    for group in &groups {
        for h in 0..heads {
            let mut dot = 0.0;
            for &e in group {
                dot += alpha.at(e as usize, h) * grad_alpha.at(e as usize, h);
            }
            for &e in group {
                let a = alpha.at(e as usize, h);
                let g = grad_alpha.at(e as usize, h);
                out.data[e as usize * heads + h] = a * (g - dot);
            }
        }
    }
    Ok(out)
}
