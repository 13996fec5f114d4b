//! Direct-formula reference implementations shared by the integration
//! tests. They are written for clarity, not speed, and deliberately avoid
//! the library's code paths.
#![allow(dead_code)]

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s / a.len() as f64
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        60.0
    } else {
        (10.0 * (1.0 / m).log10()).min(60.0)
    }
}

/// Pads one plane by mirroring (edge sample not repeated) and returns the
/// padded plane with its width.
fn mirror_pad(p: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, usize) {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let src = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
        j as usize
    };
    let mut out = vec![0.0; ph * pw];
    for i in 0..ph {
        for j in 0..pw {
            let si = src(i as isize - r as isize, h);
            let sj = src(j as isize - r as isize, w);
            out[i * pw + j] = p[si * w + sj];
        }
    }
    (out, pw)
}

fn stats(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
    let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
    let cxy = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let (c1, c2) = (1e-4, 9e-4);
    (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 3]) -> f64 {
    let [c, h, w] = shape;
    let plane = h * w;
    let mut total = 0.0;
    for k in 0..c {
        let pa = &a[k * plane..(k + 1) * plane];
        let pb = &b[k * plane..(k + 1) * plane];
        if h < 7 || w < 7 {
            total += stats(pa, pb);
            continue;
        }
        let (qa, pw) = mirror_pad(pa, h, w, 3);
        let (qb, _) = mirror_pad(pb, h, w, 3);
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let mut xs = Vec::with_capacity(49);
                let mut ys = Vec::with_capacity(49);
                for di in 0..7 {
                    for dj in 0..7 {
                        xs.push(qa[(i + di) * pw + j + dj]);
                        ys.push(qb[(i + di) * pw + j + dj]);
                    }
                }
                acc += stats(&xs, &ys);
            }
        }
        total += acc / plane as f64;
    }
    total / c as f64
}

pub fn tv(a: &[f64], shape: [usize; 3]) -> f64 {
    let [c, h, w] = shape;
    let at = |k: usize, i: usize, j: usize| a[(k * h + i) * w + j];
    let mut diffs = Vec::new();
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    diffs.push((at(k, i + 1, j) - at(k, i, j)).abs());
                }
                if j + 1 < w {
                    diffs.push((at(k, i, j + 1) - at(k, i, j)).abs());
                }
            }
        }
    }
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Spearman rank correlation without ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
