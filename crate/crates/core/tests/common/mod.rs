//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's own numerics.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Brute-force closed-set match over per-subject embedding lists.
/// Returns the best subject (smallest id on exact ties) and its score.
pub fn brute_force_match(db: &BTreeMap<String, Vec<Vec<f64>>>, query: &[f64]) -> Option<(String, f64)> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Option<(String, f64)> = None;
    for (subject, embs) in db {
        let mut top = f64::NEG_INFINITY;
        for e in embs {
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = e.iter().zip(query).map(|(a, b)| a * b).sum();
            top = top.max((dot / (en * qn)).clamp(-1.0, 1.0));
        }
        if best.as_ref().map_or(true, |(_, s)| top > *s) {
            best = Some((subject.clone(), top));
        }
    }
    best
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Sample covariance with an n − 1 denominator, by explicit loops.
pub fn covariance(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = data.len() as f64;
    let d = data[0].len();
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| data.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect()
}

/// Frobenius norm of `A − B·(Bᵀ·A)` for row-stacked orthonormal bases.
/// It bounds the sine of the largest principal angle between the spans.
pub fn subspace_residual(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for u in a {
        let mut r = u.clone();
        for w in b {
            let dot: f64 = u.iter().zip(w).map(|(x, y)| x * y).sum();
            for (ri, wi) in r.iter_mut().zip(w) {
                *ri -= dot * wi;
            }
        }
        total += r.iter().map(|x| x * x).sum::<f64>();
    }
    total.sqrt()
}

/// Largest deviation of the Gram matrix of `rows` from the identity.
pub fn orthonormality_error(rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

/// Random data with a clear variance spectrum: `n` rows of length `d`,
/// column `j` scaled by roughly `2^-j` and then rotated by a random mix.
pub fn anisotropic_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|j| rng.gen_range(-1.0..1.0) * 0.6f64.powi(j as i32) * 3.0).collect();
            (0..d).map(|c| (0..d).map(|j| z[j] * mix[j][c]).sum::<f64>() + 0.5).collect()
        })
        .collect()
}

/// 3×3 rotation from yaw, pitch and roll.
pub fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mul3(&mul3(&rz, &rx), &ry)
}

fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// A random pinhole camera `K [R | t]` looking at points near the origin
/// from a distance of 4 to 8 units.
pub fn random_camera(rng: &mut ChaCha8Rng) -> [[f64; 4]; 3] {
    let f = rng.gen_range(60.0..240.0);
    let (cx, cy) = (rng.gen_range(20.0..44.0), rng.gen_range(20.0..44.0));
    let r = rotation(rng.gen_range(-0.6..0.6), rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3));
    let t = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(4.0..8.0)];
    let k = [[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]];
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            (0..3)
                .map(|m| k[i][m] * if j < 3 { r[m][j] } else { t[m] })
                .sum()
        })
    })
}

pub fn project(p: &[[f64; 4]; 3], x: [f64; 3]) -> (f64, f64) {
    let h: Vec<f64> = (0..3).map(|i| p[i][0] * x[0] + p[i][1] * x[1] + p[i][2] * x[2] + p[i][3]).collect();
    (h[0] / h[2], h[1] / h[2])
}

/// |cos| between two 3×4 matrices viewed as 12-vectors.
pub fn matrix_cosine(a: &[[f64; 4]; 3], b: &[[f64; 4]; 3]) -> f64 {
    let fa: Vec<f64> = a.iter().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().copied().collect();
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).abs()
}

/// Cross-entropy of a softmax over `s · cos(f, w_j)`, written out directly.
pub fn cosine_softmax_ce(f: &[f64], weights: &[Vec<f64>], label: usize, s: f64) -> f64 {
    let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    let logits: Vec<f64> = weights
        .iter()
        .map(|w| {
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            s * f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (fnorm * wn)
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn sha256_tree(dir: &std::path::Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, diverid::identity::sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}
