//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use clickseg::Mask;
use rand::Rng;

/// Nearest-unset-pixel distance by exhaustive search; the one-pixel ring
/// around the image counts as unset.
pub fn brute_edt(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut background: Vec<(i64, i64)> = Vec::new();
    for i in -1..=h as i64 {
        for j in -1..=w as i64 {
            let inside = i >= 0 && j >= 0 && i < h as i64 && j < w as i64;
            if !inside || !mask.get(i as usize, j as usize) {
                background.push((i, j));
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            if !mask.get(i as usize, j as usize) {
                out.push(0.0);
                continue;
            }
            let best = background
                .iter()
                .map(|&(a, b)| (a - i).pow(2) + (b - j).pow(2))
                .min()
                .unwrap();
            out.push((best as f64).sqrt());
        }
    }
    out
}

/// Expected simulator click: `(row, col, positive)`.
pub fn brute_next_click(pred: &Mask, gt: &Mask) -> Option<(usize, usize, bool)> {
    let (h, w) = gt.dims();
    let fnm = Mask::from_fn(h, w, |i, j| gt.get(i, j) && !pred.get(i, j));
    let fpm = Mask::from_fn(h, w, |i, j| pred.get(i, j) && !gt.get(i, j));
    if fnm.is_empty() && fpm.is_empty() {
        return None;
    }
    let peak = |m: &Mask| {
        let d = brute_edt(m);
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, &v) in d.iter().enumerate() {
            if v > best.0 {
                best = (v, k);
            }
        }
        (best.0, best.1 / w, best.1 % w)
    };
    let (a, ai, aj) = peak(&fnm);
    let (b, bi, bj) = peak(&fpm);
    Some(if a >= b { (ai, aj, true) } else { (bi, bj, false) })
}

pub fn brute_iou(pred: &Mask, gt: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

/// Random mask with a random fill density, so both sparse and solid
/// masks (deep interiors) show up.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> Mask {
    let style = rng.random_range(0..3);
    match style {
        0 => {
            let p = rng.random_range(0.0..1.0);
            Mask::from_fn(h, w, |_, _| rng.random_bool(p))
        }
        1 => {
            // union of a few rectangles
            let mut m = Mask::zeros(h, w);
            for _ in 0..rng.random_range(1..5) {
                let (i0, j0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (i1, j1) = (rng.random_range(i0..h), rng.random_range(j0..w));
                for i in i0..=i1 {
                    for j in j0..=j1 {
                        m.set(i, j, true);
                    }
                }
            }
            m
        }
        _ => {
            // solid with random holes
            let p = rng.random_range(0.0..0.05);
            Mask::from_fn(h, w, |_, _| !rng.random_bool(p))
        }
    }
}
