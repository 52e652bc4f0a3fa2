//! Top singular value estimation for spectral normalization.
//!
//! Single-vector power iteration from a cold start cannot pin the top
//! singular value of a random 64x64 matrix to 2% in 5 iterations: such
//! matrices have singular gaps of a few percent and the initial overlap is
//! only ~1/sqrt(n), so the last-iterate estimate is routinely 3-14% low.
//! We therefore iterate on a small block, with the persisted vector `u` as
//! the leading column and deterministic fill for the rest, and extract the
//! estimate by Rayleigh-Ritz over every subspace the iteration visited.
//! Per iteration this costs `BLOCK` passes over the weight instead of one,
//! which is negligible next to the convolutions the weights feed.

use super::Element;

const BLOCK: usize = 8;
const HISTORY: usize = 6;

/// Block power iteration on `w` viewed as `rows x cols`. `u` is the
/// persisted left-vector estimate and is updated in place; returns the top
/// singular value estimate and the matching right vector, normalized so
/// that `sigma = u^T W v` exactly.
pub fn power_iteration<T: Element>(
    w: &[T],
    rows: usize,
    cols: usize,
    u: &mut [T],
    iters: usize,
) -> (T, Vec<T>) {
    let iters = iters.max(1);
    let b = BLOCK.min(rows).min(cols);
    let wf: Vec<f64> = w.iter().map(|&x| x.as_f64()).collect();

    // Leading column is the persisted estimate; the rest is a fixed
    // pseudo-random fill so results are reproducible.
    let mut block: Vec<Vec<f64>> = Vec::with_capacity(b);
    block.push(u.iter().map(|&x| x.as_f64()).collect());
    for k in 1..b {
        let mut col = Vec::with_capacity(rows);
        for r in 0..rows {
            col.push(splitmix_unit((k * rows + r) as u64));
        }
        block.push(col);
    }
    orthonormalize(&mut block);

    // Right iterates v_j (cols) and their images y_j = W v_j (rows), kept
    // for the Ritz step; spans accumulate into a block Krylov subspace.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(iters * b);
    let mut ys: Vec<Vec<f64>> = Vec::with_capacity(iters * b);
    for _ in 0..iters {
        let mut vblock: Vec<Vec<f64>> = block
            .iter()
            .map(|uc| {
                let mut v = vec![0.0f64; cols];
                for (r, &ur) in uc.iter().enumerate() {
                    let row = &wf[r * cols..(r + 1) * cols];
                    for (vc, &wv) in v.iter_mut().zip(row) {
                        *vc += wv * ur;
                    }
                }
                v
            })
            .collect();
        orthonormalize(&mut vblock);
        block = vblock
            .iter()
            .map(|v| {
                let mut y = vec![0.0f64; rows];
                for (r, yr) in y.iter_mut().enumerate() {
                    let row = &wf[r * cols..(r + 1) * cols];
                    *yr = row.iter().zip(v).map(|(&wv, &vc)| wv * vc).sum();
                }
                y
            })
            .collect();
        ys.extend(block.iter().cloned());
        vs.append(&mut vblock);
        orthonormalize(&mut block);
        // Recent blocks carry all the usable information once the iteration
        // has settled; dropping old ones keeps the Ritz solve O(1) per call.
        if vs.len() > HISTORY * b {
            vs.drain(..b);
            ys.drain(..b);
        }
    }

    // Rayleigh-Ritz on span{v_j}: maximize ||W v||^2 / ||v||^2 over the
    // subspace, i.e. the top eigenpair of the pencil (Y^T Y, V^T V).
    let m = vs.len();
    let gram = |a: &[Vec<f64>]| -> Vec<f64> {
        let mut g = vec![0.0f64; m * m];
        for i in 0..m {
            for j in 0..=i {
                let dot = a[i].iter().zip(&a[j]).map(|(&x, &y)| x * y).sum();
                g[i * m + j] = dot;
                g[j * m + i] = dot;
            }
        }
        g
    };
    let coeffs = top_pencil_eigvec(&gram(&ys), &gram(&vs), m);

    let mut v_best = vec![0.0f64; cols];
    let mut y_best = vec![0.0f64; rows];
    for (j, &c) in coeffs.iter().enumerate() {
        for (vb, &vj) in v_best.iter_mut().zip(&vs[j]) {
            *vb += c * vj;
        }
        for (yb, &yj) in y_best.iter_mut().zip(&ys[j]) {
            *yb += c * yj;
        }
    }
    let vn = normalize(&mut v_best);
    let sigma = if vn > 1e-300 {
        for y in y_best.iter_mut() {
            *y /= vn;
        }
        let s = normalize(&mut y_best);
        for (dst, &src) in u.iter_mut().zip(&y_best) {
            *dst = T::cast_from(src);
        }
        s
    } else {
        0.0
    };
    (
        T::cast_from(sigma),
        v_best.iter().map(|&x| T::cast_from(x)).collect(),
    )
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if norm > 1e-300 {
        for v in x.iter_mut() {
            *v /= norm;
        }
    }
    norm
}

/// Modified Gram-Schmidt; rank-deficient columns are replaced by
/// deterministic fill so the block keeps its width.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    let n = cols.first().map_or(0, Vec::len);
    for i in 0..cols.len() {
        for attempt in 0..3u64 {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(&a, &b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(i);
                for (ci, &cj) in tail[0].iter_mut().zip(&head[j]) {
                    *ci -= dot * cj;
                }
            }
            if normalize(&mut cols[i]) > 1e-12 {
                break;
            }
            for (r, c) in cols[i].iter_mut().enumerate() {
                *c = splitmix_unit(((attempt + 7) * (i as u64 + 1)) * n as u64 + r as u64);
            }
        }
    }
}

fn splitmix_unit(seed: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Top eigenvector of `A z = lambda B z` for small symmetric A, B with B
/// PSD; near-dependent subspace directions are dropped via B's spectrum.
fn top_pencil_eigvec(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let (b_vals, b_vecs) = jacobi_eig(b, m);
    let b_max = b_vals.iter().cloned().fold(0.0f64, f64::max);
    if b_max <= 0.0 {
        let mut e = vec![0.0; m];
        e[m - 1] = 1.0;
        return e;
    }
    // Whitening basis: columns q_k = b_vec_k / sqrt(lambda_k), keeping only
    // well-conditioned directions.
    let keep: Vec<usize> = (0..m).filter(|&k| b_vals[k] > 1e-10 * b_max).collect();
    let p = keep.len();
    // C = Q^T A Q in the whitened basis; A Q precomputed to stay O(m^3).
    let mut aq = vec![0.0f64; m * p];
    for (cj, &kj) in keep.iter().enumerate() {
        let scale = 1.0 / b_vals[kj].sqrt();
        for r in 0..m {
            let mut acc = 0.0;
            for s in 0..m {
                acc += a[r * m + s] * b_vecs[s * m + kj];
            }
            aq[r * p + cj] = acc * scale;
        }
    }
    let mut c = vec![0.0f64; p * p];
    for (ci, &ki) in keep.iter().enumerate() {
        let scale = 1.0 / b_vals[ki].sqrt();
        for cj in 0..p {
            let mut acc = 0.0;
            for r in 0..m {
                acc += b_vecs[r * m + ki] * aq[r * p + cj];
            }
            c[ci * p + cj] = acc * scale;
        }
    }
    let (c_vals, c_vecs) = jacobi_eig(&c, p);
    let best = (0..p)
        .max_by(|&i, &j| c_vals[i].partial_cmp(&c_vals[j]).unwrap())
        .unwrap();
    let mut z = vec![0.0f64; m];
    for (ci, &ki) in keep.iter().enumerate() {
        let coef = c_vecs[ci * p + best] / b_vals[ki].sqrt();
        for r in 0..m {
            z[r] += coef * b_vecs[r * m + ki];
        }
    }
    z
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix; returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eig(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for r in (p + 1)..n {
                off += a[p * n + r].abs();
            }
        }
        if off < 1e-15 {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[p * n + r];
                if apr.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[r * n + r] - a[p * n + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akr = a[k * n + r];
                    a[k * n + p] = c * akp - s * akr;
                    a[k * n + r] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let ark = a[r * n + k];
                    a[p * n + k] = c * apk - s * ark;
                    a[r * n + k] = s * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkr;
                    q[k * n + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), q)
}
