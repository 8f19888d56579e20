//! Independent reference implementations shared by the integration tests and
//! the acceptance runner.

#![allow(dead_code)]

pub mod gradcheck;

use gahcda::dataset::SegMask;
use rand::Rng;

/// Dense single-head attention written out element by element.
pub fn brute_attention(q: &[f64], kv: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut attn = vec![0.0; n * n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|k| q[i * d + k] * kv[j * d + k]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..n {
            attn[i * n + j] = scores[j].exp() / z;
        }
    }
    let mut attended = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            attended[i * d + k] = (0..n).map(|j| attn[i * n + j] * kv[j * d + k]).sum();
        }
    }
    (attn, attended)
}

pub fn brute_dsc(a: &SegMask, b: &SegMask) -> f64 {
    let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (pa, pb) = (a.get(y, x), b.get(y, x));
            if pa && pb {
                inter += 1.0;
            }
            if pa {
                na += 1.0;
            }
            if pb {
                nb += 1.0;
            }
        }
    }
    if na + nb == 0.0 {
        100.0
    } else {
        200.0 * inter / (na + nb)
    }
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn brute_surface(m: &SegMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs average symmetric surface distance; `None` if either surface is empty.
pub fn brute_assd(a: &SegMask, b: &SegMask) -> Option<f64> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>() + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    Some(total / (sa.len() + sb.len()) as f64)
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> SegMask {
    SegMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// Random rectangle-union mask, smoother than i.i.d. pixels.
pub fn blob_mask(rng: &mut impl Rng, h: usize, w: usize) -> SegMask {
    let rects: Vec<(usize, usize, usize, usize)> = (0..rng.gen_range(1..4))
        .map(|_| {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            (y0, x0, rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1)
        })
        .collect();
    SegMask::from_fn(h, w, |y, x| rects.iter().any(|&(y0, x0, y1, x1)| y >= y0 && y < y1 && x >= x0 && x < x1))
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}
