//! Straight-line reference implementations used as test oracles. They are
//! written with plain loops and share no code with the library kernels.

#![allow(dead_code)]

use structgen_core::backbone::BlockWeights;
use structgen_core::lora::{AdapterSet, Projection};
use structgen_core::ImageGrid;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &ndarray::Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i][l] * b[l][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn add_into(a: &mut Mat, b: &Mat, scale: f64) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += scale * y;
        }
    }
}

/// `x·W + (alpha/r)·x·A·B` when the adapter has this site.
fn proj(x: &Mat, w: &ndarray::Array2<f64>, adapter: Option<&AdapterSet>, block: usize, p: Projection) -> Mat {
    let mut y = matmul(x, &to_mat(w));
    if let Some(pair) = adapter.and_then(|a| a.pair(block, p)) {
        let xab = matmul(&matmul(x, &to_mat(&pair.a)), &to_mat(&pair.b));
        add_into(&mut y, &xab, pair.alpha / pair.a.ncols() as f64);
    }
    y
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// One block on latent rows `z` with condition rows `c` (positions already
/// added). Layer-norm epsilon 1e-6.
pub fn naive_block(
    block: &BlockWeights,
    heads: usize,
    z: &Mat,
    c: &Mat,
    adapter: Option<&AdapterSet>,
    index: usize,
) -> Mat {
    let n = z.len();
    let d = z[0].len();
    let hd = d / heads;
    let all: Mat = z.iter().chain(c.iter()).cloned().collect();
    let h: Mat = all
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            (0..d)
                .map(|j| (row[j] - mean) * inv * block.ln_gamma[j] + block.ln_beta[j])
                .collect()
        })
        .collect();
    let hz: Mat = h[..n].to_vec();
    let q = proj(&hz, &block.q, adapter, index, Projection::Q);
    let k = proj(&h, &block.k, adapter, index, Projection::K);
    let v = proj(&h, &block.v, adapter, index, Projection::V);
    let mut o = vec![vec![0.0; d]; n];
    for head in 0..heads {
        let off = head * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..h.len())
                .map(|j| (0..hd).map(|l| q[i][off + l] * k[j][off + l]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for l in 0..hd {
                o[i][off + l] = (0..h.len()).map(|j| e[j] / s * v[j][off + l]).sum();
            }
        }
    }
    let y = proj(&o, &block.attn_out, adapter, index, Projection::AttnOut);
    let p = proj(&y, &block.mlp_in, adapter, index, Projection::MlpIn);
    let m: Mat = p.iter().map(|r| r.iter().map(|&x| gelu_tanh(x)).collect()).collect();
    let delta = proj(&m, &block.mlp_out, adapter, index, Projection::MlpOut);
    let mut out = z.clone();
    add_into(&mut out, &delta, 1.0);
    out
}

fn ge_tol(a: f64, b: f64) -> bool {
    a >= b - 1e-9 * a.abs().max(b.abs())
}

fn mirror(i: i64, n: i64) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Canny with a direct 2-D Gaussian, explicit Sobel kernels, slope-based
/// direction bins and fixed-point hysteresis.
pub fn naive_canny(img: &ImageGrid, sigma: f64, low: f64, high: f64) -> Vec<Vec<bool>> {
    let (h, w, _) = img.dim();
    let gray: Mat = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| 0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2))
                .collect()
        })
        .collect();
    let r = (3.0 * sigma).ceil() as i64;
    let g1: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let mut blur = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let wgt = g1[(dy + r) as usize] * g1[(dx + r) as usize] / norm;
                    acc += wgt * gray[mirror(y as i64 + dy, h as i64)][mirror(x as i64 + dx, w as i64)];
                }
            }
            blur[y][x] = acc;
        }
    }
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut gx = vec![vec![0.0; w]; h];
    let mut gy = vec![vec![0.0; w]; h];
    let mut mag = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = blur[mirror(y as i64 + i as i64 - 1, h as i64)][mirror(x as i64 + j as i64 - 1, w as i64)];
                    sx += kx[i][j] * v;
                    sy += ky[i][j] * v;
                }
            }
            gx[y][x] = sx;
            gy[y][x] = sy;
            mag[y][x] = (sx * sx + sy * sy).sqrt();
        }
    }
    let t1 = (22.5f64).to_radians().tan();
    let t2 = (67.5f64).to_radians().tan();
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[y as usize][x as usize]
        }
    };
    let mut thin = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let m = mag[y][x];
            if m <= 0.0 {
                continue;
            }
            let (sx, sy) = (gx[y][x], gy[y][x]);
            let (ax, ay) = (sx.abs(), sy.abs());
            let (dy, dx): (i64, i64) = if ay <= t1 * ax {
                (0, 1)
            } else if ay >= t2 * ax {
                (1, 0)
            } else if (sx > 0.0) == (sy > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as i64, x as i64);
            if ge_tol(m, at(yi + dy, xi + dx)) && ge_tol(m, at(yi - dy, xi - dx)) {
                thin[y][x] = m;
            }
        }
    }
    let max = mag.iter().flatten().cloned().fold(0.0, f64::max);
    let mut edges = vec![vec![false; w]; h];
    if max <= 0.0 {
        return edges;
    }
    let (lo, hi) = (low * max, high * max);
    for y in 0..h {
        for x in 0..w {
            edges[y][x] = thin[y][x] > 0.0 && ge_tol(thin[y][x], hi);
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if edges[y][x] || !(thin[y][x] > 0.0 && ge_tol(thin[y][x], lo)) {
                    continue;
                }
                let mut touch = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 && edges[ny as usize][nx as usize] {
                            touch = true;
                        }
                    }
                }
                if touch {
                    edges[y][x] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return edges;
        }
    }
}

pub fn naive_psnr(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let (h, w, c) = a.dim();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let e = a.get(y, x, ch) - b.get(y, x, ch);
                s += e * e;
            }
        }
    }
    let mse = s / (h * w * c) as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// Two-pass (mean first, then centered moments) windowed SSIM.
pub fn naive_ssim(a: &ImageGrid, b: &ImageGrid, win: usize) -> f64 {
    let (h, w, c) = a.dim();
    let (c1, c2) = (1e-4, 9e-4);
    let mut vals = Vec::new();
    for ch in 0..c {
        for y0 in (0..=h - win).step_by(win) {
            for x0 in (0..=w - win).step_by(win) {
                let px: Vec<(f64, f64)> = (y0..y0 + win)
                    .flat_map(|y| (x0..x0 + win).map(move |x| (y, x)))
                    .map(|(y, x)| (a.get(y, x, ch), b.get(y, x, ch)))
                    .collect();
                let n = px.len() as f64;
                let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
                let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                vals.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Brute-force edge matching: every pair of edge pixels is compared.
pub fn brute_edge_f1(pred: &[Vec<bool>], gt: &[Vec<bool>], tol: i64) -> (f64, f64, f64) {
    let pts = |m: &[Vec<bool>]| -> Vec<(i64, i64)> {
        let mut v = Vec::new();
        for (y, row) in m.iter().enumerate() {
            for (x, &e) in row.iter().enumerate() {
                if e {
                    v.push((y as i64, x as i64));
                }
            }
        }
        v
    };
    let (p, g) = (pts(pred), pts(gt));
    if p.is_empty() && g.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let near = |a: (i64, i64), set: &[(i64, i64)]| set.iter().any(|b| (a.0 - b.0).abs().max((a.1 - b.1).abs()) <= tol);
    let precision = if p.is_empty() {
        0.0
    } else {
        p.iter().filter(|&&a| near(a, &g)).count() as f64 / p.len() as f64
    };
    let recall = if g.is_empty() {
        0.0
    } else {
        g.iter().filter(|&&a| near(a, &p)).count() as f64 / g.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageGrid {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ImageGrid::from_fn(h, w, 3, |_| rng.random::<f64>())
}
