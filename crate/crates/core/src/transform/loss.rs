//! Losses and their closed-form gradients for the linear encoder/decoder.
//!
//! Batches are row-major `f64` buffers: `x` is `n×d_in`, `e` is `n×d_out`.

use crate::linalg::dgemm;

/// Forward pass of one batch.
#[derive(Debug, Clone)]
pub struct Forward {
    pub n: usize,
    /// Encoded batch, `n×d_out`.
    pub e: Vec<f64>,
    /// Reconstruction, `n×d_in`.
    pub x_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
}

/// Gradients in the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

/// Parameters as flat row-major slices.
#[derive(Debug, Clone, Copy)]
pub struct Params<'a> {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_out×d_in`
    pub w_enc: &'a [f64],
    pub b_enc: &'a [f64],
    /// `d_in×d_out`
    pub w_dec: &'a [f64],
    pub b_dec: &'a [f64],
}

/// `out = x·Wᵀ + b` for `x` `n×k` and `w` `m×k`.
pub(crate) fn affine(n: usize, k: usize, m: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
    dgemm(n, k, m, 1.0, x, false, w, true, 1.0, &mut out);
    out
}

pub fn forward(p: &Params<'_>, x: &[f64]) -> Forward {
    let n = x.len() / p.d_in;
    let e = affine(n, p.d_in, p.d_out, x, p.w_enc, p.b_enc);
    let x_hat = affine(n, p.d_out, p.d_in, &e, p.w_dec, p.b_dec);
    Forward { n, e, x_hat }
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over all `n²` ordered pairs (including `i == j`) of `D²` for
/// same-label pairs and `max(0, m − D)²` otherwise.
pub fn contrastive_loss(e: &[f64], dim: usize, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    assert_eq!(e.len(), n * dim);
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = pair_distance(&e[i * dim..(i + 1) * dim], &e[j * dim..(j + 1) * dim]);
            sum += if labels[i] == labels[j] {
                d * d
            } else {
                let h = (margin - d).max(0.0);
                h * h
            };
        }
    }
    // each unordered pair stands for (i, j) and (j, i)
    2.0 * sum / (n * n) as f64
}

/// Mean over samples of the squared Euclidean reconstruction error.
pub fn reconstruction_loss(x_hat: &[f64], x: &[f64], n: usize) -> f64 {
    assert_eq!(x_hat.len(), x.len());
    let s: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    s / n as f64
}

pub fn total_loss(p: &Params<'_>, x: &[f64], labels: &[usize], margin: f64, beta1: f64, beta2: f64) -> LossParts {
    let f = forward(p, x);
    parts(&f, p, x, labels, margin, beta1, beta2)
}

fn parts(f: &Forward, p: &Params<'_>, x: &[f64], labels: &[usize], margin: f64, beta1: f64, beta2: f64) -> LossParts {
    let contrastive = contrastive_loss(&f.e, p.d_out, labels, margin);
    let reconstruction = reconstruction_loss(&f.x_hat, x, f.n);
    LossParts {
        total: beta1 * contrastive + beta2 * reconstruction,
        contrastive,
        reconstruction,
    }
}

/// Gradient of the contrastive loss with respect to each row of `e`.
///
/// For a same-label pair the ordered-pair double sum contributes
/// `4(eᵢ − eⱼ)/n²` to `eᵢ`; for a different-label pair inside the margin it
/// contributes `−4(m − D)(eᵢ − eⱼ)/(D·n²)`. Coincident different-label
/// points (D = 0) take the zero subgradient.
pub fn contrastive_grad(e: &[f64], dim: usize, labels: &[usize], margin: f64) -> Vec<f64> {
    let n = labels.len();
    let scale = 4.0 / (n * n) as f64;
    // coefficient matrix c with grad_i = Σⱼ cᵢⱼ (eᵢ − eⱼ)
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let w = if labels[i] == labels[j] {
                scale
            } else {
                let d = pair_distance(&e[i * dim..(i + 1) * dim], &e[j * dim..(j + 1) * dim]);
                if d > 0.0 && d < margin {
                    -scale * (margin - d) / d
                } else {
                    0.0
                }
            };
            c[i * n + j] = w;
            c[j * n + i] = w;
        }
    }
    // grad = diag(rowsum(c))·e − c·e
    let mut g = vec![0.0; n * dim];
    dgemm(n, n, dim, -1.0, &c, false, e, false, 0.0, &mut g);
    for i in 0..n {
        let rs: f64 = c[i * n..(i + 1) * n].iter().sum();
        for (gv, ev) in g[i * dim..(i + 1) * dim].iter_mut().zip(&e[i * dim..(i + 1) * dim]) {
            *gv += rs * ev;
        }
    }
    g
}

/// Loss and exact gradients of `β₁·L_contr + β₂·L_recon` for one batch.
pub fn loss_gradients(
    p: &Params<'_>,
    x: &[f64],
    labels: &[usize],
    margin: f64,
    beta1: f64,
    beta2: f64,
) -> (LossParts, Gradients) {
    let f = forward(p, x);
    let loss = parts(&f, p, x, labels, margin, beta1, beta2);
    let n = f.n;
    let (d_in, d_out) = (p.d_in, p.d_out);

    let mut g_e = if beta1 != 0.0 {
        let mut g = contrastive_grad(&f.e, d_out, labels, margin);
        g.iter_mut().for_each(|v| *v *= beta1);
        g
    } else {
        vec![0.0; n * d_out]
    };
    // dL/dx̂
    let r_scale = 2.0 * beta2 / n as f64;
    let r: Vec<f64> = f.x_hat.iter().zip(x).map(|(a, b)| r_scale * (a - b)).collect();

    let mut w_dec = vec![0.0; d_in * d_out];
    dgemm(d_in, n, d_out, 1.0, &r, true, &f.e, false, 0.0, &mut w_dec);
    let b_dec = column_sums(&r, n, d_in);
    dgemm(n, d_in, d_out, 1.0, &r, false, p.w_dec, false, 1.0, &mut g_e);
    let mut w_enc = vec![0.0; d_out * d_in];
    dgemm(d_out, n, d_in, 1.0, &g_e, true, x, false, 0.0, &mut w_enc);
    let b_enc = column_sums(&g_e, n, d_out);
    (
        loss,
        Gradients {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        },
    )
}

fn column_sums(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in s.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    s
}
