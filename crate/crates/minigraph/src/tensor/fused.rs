//! Fused UPDATE kernels: matmul (or a sum of two matmuls) with the bias,
//! ReLU, and Dropout epilogue applied in one pass over the output, plus the
//! matching backwards. Weight gradients are computed as per-worker partial
//! copies over row chunks and reduced in ascending worker order, so a run is
//! reproducible for a fixed worker count.

use super::{matmul, matmul_a_bt, Tensor};
use crate::error::{Error, Result};
use crate::rng::DropoutKey;
use rayon::prelude::*;

/// Forward artifacts of a fused UPDATE: the regularized output plus what the
/// backward pass needs (dropout mask scales and pre-activation).
#[derive(Clone, Debug)]
pub struct FusedOut {
    pub out: Tensor,
    /// Per-element multiplier actually applied after ReLU: 0 for dropped
    /// elements, 1/(1-p) for kept ones (all ones when p = 0).
    pub mask: Tensor,
    /// x·w (+ second term) + bias, before ReLU.
    pub pre_act: Tensor,
}

fn check_bias(b: &Tensor, k: usize) -> Result<()> {
    if b.len() != k {
        return Err(Error::shape(format!(
            "bias has {} elements, output width is {k}",
            b.len()
        )));
    }
    Ok(())
}

fn add_bias(pre: &mut Tensor, b: &Tensor) {
    for i in 0..pre.rows() {
        let row = pre.row_mut(i);
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
}

/// One pass over `pre` applying ReLU then dropout keyed per element.
fn relu_dropout_epilogue(pre: &Tensor, dropout_p: f64, key: &DropoutKey) -> (Tensor, Tensor) {
    let mut out = Tensor::zeros(pre.shape());
    let mut mask = Tensor::zeros(pre.shape());
    let keep_scale = if dropout_p > 0.0 {
        1.0 / (1.0 - dropout_p)
    } else {
        1.0
    };
    let pre_d = pre.data();
    for idx in 0..pre_d.len() {
        let m = if dropout_p > 0.0 && key.draw(idx as u64) < dropout_p {
            0.0
        } else {
            keep_scale
        };
        mask.data_mut()[idx] = m;
        let v = pre_d[idx];
        out.data_mut()[idx] = if v > 0.0 { v * m } else { 0.0 };
    }
    (out, mask)
}

/// `Dropout(ReLU(x·w + b))`. The epilogue is elementwise, so the fused result
/// is bit-identical to the unfused matmul/bias/ReLU/Dropout composition under
/// the same dropout key.
pub fn fused_update_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dropout_p: f64,
    key: &DropoutKey,
) -> Result<FusedOut> {
    check_dropout(dropout_p)?;
    let mut pre = matmul(x, w)?;
    check_bias(b, pre.cols())?;
    add_bias(&mut pre, b);
    let (out, mask) = relu_dropout_epilogue(&pre, dropout_p, key);
    Ok(FusedOut {
        out,
        mask,
        pre_act: pre,
    })
}

/// `Dropout(ReLU(x_n·w_n + x_s·w_s + b))` — the two-matmul UPDATE used by
/// GraphSAGE (neighbor aggregate and self paths share one epilogue).
pub fn fused_update_sum_forward(
    x_n: &Tensor,
    w_n: &Tensor,
    x_s: &Tensor,
    w_s: &Tensor,
    b: &Tensor,
    dropout_p: f64,
    key: &DropoutKey,
) -> Result<FusedOut> {
    check_dropout(dropout_p)?;
    let mut pre = matmul(x_n, w_n)?;
    let second = matmul(x_s, w_s)?;
    if pre.shape() != second.shape() {
        return Err(Error::shape(format!(
            "fused sum: term shapes {:?} vs {:?}",
            pre.shape(),
            second.shape()
        )));
    }
    pre.add_assign(&second);
    check_bias(b, pre.cols())?;
    add_bias(&mut pre, b);
    let (out, mask) = relu_dropout_epilogue(&pre, dropout_p, key);
    Ok(FusedOut {
        out,
        mask,
        pre_act: pre,
    })
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout_p must be in [0,1), got {p}")));
    }
    Ok(())
}

/// Upstream grad through dropout and ReLU: `g ∘ mask ∘ 1[pre > 0]`.
fn epilogue_backward(grad_out: &Tensor, mask: &Tensor, pre_act: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(grad_out.shape());
    for ((o, (&gv, &mv)), &pv) in g
        .data_mut()
        .iter_mut()
        .zip(grad_out.data().iter().zip(mask.data()))
        .zip(pre_act.data())
    {
        *o = if pv > 0.0 { gv * mv } else { 0.0 };
    }
    g
}

/// `xᵀ[r0..r1] · g[r0..r1]` without materializing transposes or row copies.
fn atb_range(x: &Tensor, g: &Tensor, r0: usize, r1: usize) -> Tensor {
    let (c, k) = (x.cols(), g.cols());
    let mut out = Tensor::zeros(&[c, k]);
    for i in r0..r1 {
        let xrow = x.row(i);
        let grow = g.row(i);
        for (p, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[p * k..(p + 1) * k];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += xv * gv;
            }
        }
    }
    out
}

fn colsum_range(g: &Tensor, r0: usize, r1: usize) -> Vec<f64> {
    let k = g.cols();
    let mut out = vec![0.0; k];
    for i in r0..r1 {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Per-worker weight-gradient copies over contiguous row chunks, reduced in
/// ascending worker index order.
pub(crate) fn grad_w_b_chunked(x: &Tensor, g: &Tensor, workers: usize) -> (Tensor, Tensor) {
    let n = x.rows();
    let workers = workers.max(1);
    let chunk = n.div_ceil(workers).max(1);
    let ranges: Vec<(usize, usize)> = (0..n.div_ceil(chunk).max(1))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(n)))
        .collect();
    let partials: Vec<(Tensor, Vec<f64>)> = ranges
        .par_iter()
        .map(|&(r0, r1)| (atb_range(x, g, r0, r1), colsum_range(g, r0, r1)))
        .collect();
    let mut gw = Tensor::zeros(&[x.cols(), g.cols()]);
    let mut gb = vec![0.0; g.cols()];
    for (pw, pb) in partials {
        gw.add_assign(&pw);
        for (o, v) in gb.iter_mut().zip(pb) {
            *o += v;
        }
    }
    let k = gb.len();
    (gw, Tensor::from_vec(&[1, k], gb).unwrap())
}

/// Gradients of `Dropout(ReLU(x·w + b))` given the saved forward artifacts.
pub fn fused_update_backward(
    grad_out: &Tensor,
    mask: &Tensor,
    pre_act: &Tensor,
    x: &Tensor,
    w: &Tensor,
    workers: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = epilogue_backward(grad_out, mask, pre_act);
    let grad_x = matmul_a_bt(&g, w)?;
    let (grad_w, grad_b) = grad_w_b_chunked(x, &g, workers);
    Ok((grad_x, grad_w, grad_b))
}

/// Gradients of the two-matmul fused UPDATE.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn fused_update_sum_backward(
    grad_out: &Tensor,
    mask: &Tensor,
    pre_act: &Tensor,
    x_n: &Tensor,
    w_n: &Tensor,
    x_s: &Tensor,
    w_s: &Tensor,
    workers: usize,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let g = epilogue_backward(grad_out, mask, pre_act);
    let grad_xn = matmul_a_bt(&g, w_n)?;
    let grad_xs = matmul_a_bt(&g, w_s)?;
    let (grad_wn, grad_b) = grad_w_b_chunked(x_n, &g, workers);
    let (grad_ws, _) = grad_w_b_chunked(x_s, &g, workers);
    Ok((grad_xn, grad_wn, grad_xs, grad_ws, grad_b))
}

/// `x_n·w_n + x_s·w_s + b` with no activation or dropout — the output-layer
/// UPDATE that feeds logits straight to the loss.
pub fn affine_sum_forward(
    x_n: &Tensor,
    w_n: &Tensor,
    x_s: &Tensor,
    w_s: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let mut pre = matmul(x_n, w_n)?;
    let second = matmul(x_s, w_s)?;
    if pre.shape() != second.shape() {
        return Err(Error::shape(format!(
            "affine sum: term shapes {:?} vs {:?}",
            pre.shape(),
            second.shape()
        )));
    }
    pre.add_assign(&second);
    check_bias(b, pre.cols())?;
    add_bias(&mut pre, b);
    Ok(pre)
}

#[allow(clippy::type_complexity)]
pub fn affine_sum_backward(
    grad_out: &Tensor,
    x_n: &Tensor,
    w_n: &Tensor,
    x_s: &Tensor,
    w_s: &Tensor,
    workers: usize,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let grad_xn = matmul_a_bt(grad_out, w_n)?;
    let grad_xs = matmul_a_bt(grad_out, w_s)?;
    let (grad_wn, grad_b) = grad_w_b_chunked(x_n, grad_out, workers);
    let (grad_ws, _) = grad_w_b_chunked(x_s, grad_out, workers);
    Ok((grad_xn, grad_wn, grad_xs, grad_ws, grad_b))
}

/// `ReLU(x·w + b)`; returns (activation, pre-activation). The GAT projection
/// path (bias and non-linearity applied before attention).
pub fn affine_relu_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut pre = matmul(x, w)?;
    check_bias(b, pre.cols())?;
    add_bias(&mut pre, b);
    let act = super::relu(&pre);
    Ok((act, pre))
}

pub fn affine_relu_backward(
    grad_act: &Tensor,
    pre_act: &Tensor,
    x: &Tensor,
    w: &Tensor,
    workers: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = super::relu_backward(grad_act, pre_act);
    let grad_x = matmul_a_bt(&g, w)?;
    let (grad_w, grad_b) = grad_w_b_chunked(x, &g, workers);
    Ok((grad_x, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relu;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[r, c], data).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn relu_clamps_negative() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]);
        let key = DropoutKey::new(0, 0, 0, 0);
        let f = fused_update_forward(&x, &identity(2), &Tensor::zeros(&[1, 2]), 0.0, &key).unwrap();
        assert_eq!(f.out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn bias_only() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let key = DropoutKey::new(0, 0, 0, 0);
        let f = fused_update_forward(&x, &identity(2), &b, 0.0, &key).unwrap();
        assert_eq!(f.out.data(), &[1.0, 1.0]);
    }

    #[test]
    fn fused_equals_unfused_composition_exactly() {
        let mut rng = crate::rng::stream(&[31]);
        let x = rand_tensor(&mut rng, 6, 4);
        let w = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 1, 3);
        let key = DropoutKey::new(9, 3, 1, 0);
        let fused = fused_update_forward(&x, &w, &b, 0.5, &key).unwrap();

        // Unfused oracle: separate matmul, bias add, ReLU, then dropout with
        // the same counter-based draws.
        let mut pre = matmul(&x, &w).unwrap();
        add_bias(&mut pre, &b);
        let act = relu(&pre);
        let mut want = act.clone();
        for idx in 0..want.len() {
            let m = if key.draw(idx as u64) < 0.5 { 0.0 } else { 2.0 };
            want.data_mut()[idx] *= m;
        }
        assert_eq!(fused.out, want);
        assert_eq!(fused.pre_act, pre);
    }

    #[test]
    fn zero_upstream_grad_gives_zero_grads() {
        let mut rng = crate::rng::stream(&[32]);
        let x = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 3, 2);
        let b = rand_tensor(&mut rng, 1, 2);
        let key = DropoutKey::new(1, 0, 0, 0);
        let f = fused_update_forward(&x, &w, &b, 0.25, &key).unwrap();
        let zero = Tensor::zeros(f.out.shape());
        let (gx, gw, gb) = fused_update_backward(&zero, &f.mask, &f.pre_act, &x, &w, 2).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn worker_counts_agree_on_weight_grads() {
        let mut rng = crate::rng::stream(&[33]);
        let x = rand_tensor(&mut rng, 64, 8);
        let g = rand_tensor(&mut rng, 64, 5);
        let (gw1, gb1) = grad_w_b_chunked(&x, &g, 1);
        let (gw4, gb4) = grad_w_b_chunked(&x, &g, 4);
        let diff = gw1
            .data()
            .iter()
            .zip(gw4.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "grad_w worker mismatch {diff}");
        let diff_b = gb1
            .data()
            .iter()
            .zip(gb4.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff_b < 1e-12);
    }

    #[test]
    fn finite_difference_on_fused_update() {
        // Small relative-error check here; the acceptance suite runs the wide
        // sweep. Scalar loss = sum(out).
        let mut rng = crate::rng::stream(&[34]);
        let x = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 1, 4);
        let key = DropoutKey::new(2, 0, 0, 0);
        let p = 0.5;

        let f = fused_update_forward(&x, &w, &b, p, &key).unwrap();
        let ones = Tensor::from_vec(f.out.shape(), vec![1.0; f.out.len()]).unwrap();
        let (gx, gw, gb) = fused_update_backward(&ones, &f.mask, &f.pre_act, &x, &w, 3).unwrap();

        let eps = 1e-6;
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            fused_update_forward(x, w, b, p, &key)
                .unwrap()
                .out
                .data()
                .iter()
                .sum()
        };
        let mut check = |analytic: &Tensor, mut perturb: Box<dyn FnMut(usize, f64) -> f64>| {
            for i in 0..analytic.len() {
                let up = perturb(i, eps);
                let down = perturb(i, -2.0 * eps); // relative to up state
                let num = (up - down) / (2.0 * eps);
                perturb(i, eps); // restore
                let a = analytic.data()[i];
                let denom = a.abs().max(num.abs()).max(1e-8);
                assert!(
                    ((a - num) / denom).abs() < 1e-5,
                    "elem {i}: analytic {a} vs numeric {num}"
                );
            }
        };
        let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
        check(
            &gx,
            Box::new({
                let (w, b) = (w.clone(), b.clone());
                move |i, d| {
                    xm.data_mut()[i] += d;
                    loss(&xm, &w, &b)
                }
            }),
        );
        check(
            &gw,
            Box::new({
                let (x, b) = (x.clone(), b.clone());
                move |i, d| {
                    wm.data_mut()[i] += d;
                    loss(&x, &wm, &b)
                }
            }),
        );
        check(
            &gb,
            Box::new({
                let (x, w) = (x.clone(), w.clone());
                move |i, d| {
                    bm.data_mut()[i] += d;
                    loss(&x, &w, &bm)
                }
            }),
        );
    }
}
