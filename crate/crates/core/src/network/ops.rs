//! Layer kernels with hand-written backward passes.

use super::{Activation, Mode};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` for row-major matrices, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is logically [m, k]; stored [k, m] when transposed.
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let ohw = self.col_cols();
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let row = &mut cols[r * ohw..(r + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            row[oy * self.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let ohw = self.col_cols();
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let row = &cols[r * ohw..(r + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            img[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                row[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-sample column buffers for backward.
pub(crate) fn conv_forward(
    g: &ConvGeom,
    input: &[f64],
    n: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.oh * g.ow;
    let col_len = g.col_rows() * g.col_cols();
    let mut cols = vec![0.0; n * col_len];
    let mut out = vec![0.0; n * out_len];
    for s in 0..n {
        let col = &mut cols[s * col_len..(s + 1) * col_len];
        g.im2col(&input[s * in_len..(s + 1) * in_len], col);
        let o = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                o[co * g.col_cols()..(co + 1) * g.col_cols()].fill(bv);
            }
        }
        gemm(
            g.cout,
            g.col_rows(),
            g.col_cols(),
            weight,
            false,
            col,
            false,
            o,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
    }
    (out, cols)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    cols: &[f64],
    grad_out: &[f64],
    n: usize,
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.oh * g.ow;
    let col_len = g.col_rows() * g.col_cols();
    let mut grad_in = vec![0.0; n * in_len];
    let mut dcol = vec![0.0; col_len];
    for s in 0..n {
        let go = &grad_out[s * out_len..(s + 1) * out_len];
        let col = &cols[s * col_len..(s + 1) * col_len];
        gemm(
            g.cout,
            g.col_cols(),
            g.col_rows(),
            go,
            false,
            col,
            true,
            grad_w,
            1.0,
        );
        gemm(
            g.col_rows(),
            g.cout,
            g.col_cols(),
            weight,
            true,
            go,
            false,
            &mut dcol,
            0.0,
        );
        g.col2im(&dcol, &mut grad_in[s * in_len..(s + 1) * in_len]);
    }
    if let Some(gb) = grad_b {
        for s in 0..n {
            let go = &grad_out[s * out_len..(s + 1) * out_len];
            for (co, b) in gb.iter_mut().enumerate() {
                *b += go[co * g.col_cols()..(co + 1) * g.col_cols()]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    grad_in
}

/// `out[n, fout] = input[n, fin] · weightᵀ + bias`.
pub(crate) fn linear_forward(
    input: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(b);
        }
    }
    gemm(
        n,
        fin,
        fout,
        input,
        false,
        weight,
        true,
        &mut out,
        if bias.is_some() { 1.0 } else { 0.0 },
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    input: &[f64],
    grad_out: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) -> Vec<f64> {
    gemm(fout, n, fin, grad_out, true, input, false, grad_w, 1.0);
    if let Some(gb) = grad_b {
        for row in grad_out.chunks_exact(fout) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    let mut grad_in = vec![0.0; n * fin];
    gemm(
        n,
        fout,
        fin,
        grad_out,
        false,
        weight,
        false,
        &mut grad_in,
        0.0,
    );
    grad_in
}

/// Per-channel batch mean and variance.
pub(crate) type BatchMoments = (Vec<f64>, Vec<f64>);

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Per-channel normalization over `[n, c, spatial]`. Returns output, cache and
/// the batch statistics (mean, biased variance) used in train mode.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_forward(
    input: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    mode: Mode,
) -> (Vec<f64>, NormCache, Option<BatchMoments>) {
    let (mean, var, batch_stats) = match mode {
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        Mode::Train => {
            let m = (n * spatial) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let base = (s * c + ch) * spatial;
                    *m += input[base..base + spatial].iter().sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    var[ch] += input[base..base + spatial]
                        .iter()
                        .map(|x| (x - mean[ch]) * (x - mean[ch]))
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let xh = (input[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
            mode,
        },
        batch_stats,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward(
    cache: &NormCache,
    grad_out: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Vec<f64> {
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let span = base..base + spatial;
            for (g, x) in grad_out[span.clone()].iter().zip(&cache.xhat[span]) {
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * x;
            }
        }
    }
    for ch in 0..c {
        grad_gamma[ch] += sum_dy_xhat[ch];
        grad_beta[ch] += sum_dy[ch];
    }
    let mut grad_in = vec![0.0; grad_out.len()];
    let m = (n * spatial) as f64;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let k = gamma[ch] * cache.inv_std[ch];
            for i in base..base + spatial {
                grad_in[i] = match cache.mode {
                    Mode::Eval => k * grad_out[i],
                    Mode::Train => {
                        k * (grad_out[i] - sum_dy[ch] / m - cache.xhat[i] * sum_dy_xhat[ch] / m)
                    }
                };
            }
        }
    }
    grad_in
}

pub(crate) fn activation_forward(act: Activation, input: &[f64]) -> Vec<f64> {
    match act {
        Activation::Smooth => input.iter().map(|x| x.tanh()).collect(),
        Activation::Relu => input.iter().map(|x| x.max(0.0)).collect(),
        Activation::Identity => input.to_vec(),
    }
}

/// `pre` is the activation input, `post` its output.
pub(crate) fn activation_backward(
    act: Activation,
    pre: &[f64],
    post: &[f64],
    grad_out: &[f64],
) -> Vec<f64> {
    match act {
        Activation::Smooth => post
            .iter()
            .zip(grad_out)
            .map(|(t, g)| g * (1.0 - t * t))
            .collect(),
        Activation::Relu => pre
            .iter()
            .zip(grad_out)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
        Activation::Identity => grad_out.to_vec(),
    }
}

pub(crate) fn pool_forward(input: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for (o, chunk) in out.iter_mut().zip(input.chunks_exact(hw)) {
        *o = chunk.iter().sum::<f64>() / hw as f64;
    }
    debug_assert_eq!(input.len(), n * c * hw);
    out
}

pub(crate) fn pool_backward(grad_out: &[f64], hw: usize) -> Vec<f64> {
    let mut grad_in = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out {
        grad_in.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    grad_in
}
