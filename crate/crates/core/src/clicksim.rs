//! Simulated user: error masks, exact Euclidean distance transform and the
//! click-placement rules used for evaluation and training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Click, Label, Mask};

/// False-positive and false-negative regions of a prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorMasks {
    pub false_positive: Mask,
    pub false_negative: Mask,
}

impl ErrorMasks {
    pub fn is_empty(&self) -> bool {
        self.false_positive.is_empty() && self.false_negative.is_empty()
    }
}

pub fn error_masks(pred: &Mask, gt: &Mask) -> Result<ErrorMasks> {
    pred.check_same_dims(gt, "error_masks")?;
    Ok(ErrorMasks {
        false_positive: pred.and_not(gt)?,
        false_negative: gt.and_not(pred)?,
    })
}

/// Per-pixel Euclidean distance to the nearest pixel outside a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest value and its first position in row-major order.
    pub fn argmax(&self) -> (f64, usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (idx, &v) in self.values.iter().enumerate() {
            if v > best.0 {
                best = (v, idx);
            }
        }
        (best.0, best.1 / self.width, best.1 % self.width)
    }
}

/// One-dimensional squared-distance transform of a sampled function `f`
/// (lower envelope of parabolas rooted at each finite sample).
fn distance_1d(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    let n = f.len();
    sites.clear();
    bounds.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&v) = sites.last() else {
                sites.push(q);
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[v] + (v * v) as f64)) / (2.0 * (q as f64 - v as f64));
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - sites[k] as f64;
        *o = d * d + f[sites[k]];
    }
}

/// Exact Euclidean distance transform: for every set pixel, the distance to
/// the nearest unset pixel, where everything beyond the image border counts
/// as unset. Unset pixels get 0.
///
/// Separable two-pass algorithm (columns, then rows) over the one-pixel
/// padded grid; squared distances are integers, so the result is exact.
pub fn edt(mask: &Mask) -> DistanceField {
    let (h, w) = mask.dims();
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0.0f64; ph * pw];
    for (i, j) in mask.positions() {
        grid[(i + 1) * pw + (j + 1)] = f64::INFINITY;
    }
    let mut col_in = vec![0.0; ph];
    let mut col_out = vec![0.0; ph];
    let mut sites = Vec::with_capacity(ph.max(pw));
    let mut bounds = Vec::with_capacity(ph.max(pw));
    for j in 0..pw {
        for i in 0..ph {
            col_in[i] = grid[i * pw + j];
        }
        distance_1d(&col_in, &mut col_out, &mut sites, &mut bounds);
        for i in 0..ph {
            grid[i * pw + j] = col_out[i];
        }
    }
    let mut row_out = vec![0.0; pw];
    for i in 0..ph {
        distance_1d(&grid[i * pw..(i + 1) * pw], &mut row_out, &mut sites, &mut bounds);
        grid[i * pw..(i + 1) * pw].copy_from_slice(&row_out);
    }
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            values.push(grid[(i + 1) * pw + (j + 1)].sqrt());
        }
    }
    DistanceField {
        height: h,
        width: w,
        values,
    }
}

/// Places the next click at the most interior erroneous pixel.
///
/// The larger of the false-negative and false-positive distance maxima wins;
/// a false-negative peak yields a `+` click, a false-positive peak a `-`
/// click. Ties go to the false-negative side, then to the first pixel in
/// row-major order.
pub fn next_click(pred: &Mask, gt: &Mask) -> Result<Click> {
    let errors = error_masks(pred, gt)?;
    if errors.is_empty() {
        return Err(Error::NoErrorRegion);
    }
    let (fn_max, fn_i, fn_j) = edt(&errors.false_negative).argmax();
    let (fp_max, fp_i, fp_j) = edt(&errors.false_positive).argmax();
    Ok(if fn_max >= fp_max {
        Click::positive(fn_i, fn_j)
    } else {
        Click::negative(fp_i, fp_j)
    })
}

/// Spatial distribution of the random clicks drawn for a training sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingClickStrategy {
    /// First click uniform over the foreground, the rest uniform over the
    /// image and labelled by ground-truth membership.
    #[default]
    Uniform,
}

/// Draws between 1 and `max_initial` random clicks for a training sample.
pub fn sample_training_clicks<R: Rng>(
    gt: &Mask,
    rng: &mut R,
    max_initial: usize,
    strategy: TrainingClickStrategy,
) -> Result<Vec<Click>> {
    let fg: Vec<(usize, usize)> = gt.positions().collect();
    if fg.is_empty() {
        return Err(Error::Contract(
            "training clicks need a non-empty foreground".into(),
        ));
    }
    if max_initial == 0 {
        return Err(Error::Contract("max_initial must be at least 1".into()));
    }
    match strategy {
        TrainingClickStrategy::Uniform => {
            let k = rng.random_range(1..=max_initial);
            let (r, c) = fg[rng.random_range(0..fg.len())];
            let mut clicks = Vec::with_capacity(k);
            clicks.push(Click::positive(r, c));
            for _ in 1..k {
                let r = rng.random_range(0..gt.height());
                let c = rng.random_range(0..gt.width());
                clicks.push(Click::new(r, c, Label::from_membership(gt.get(r, c))));
            }
            Ok(clicks)
        }
    }
}

/// Corrective click used in the iterative training rounds: the metric
/// simulator's click with probability `metric_prob`, otherwise a uniformly
/// random erroneous pixel. `None` when the prediction is already exact.
pub fn training_correction<R: Rng>(
    pred: &Mask,
    gt: &Mask,
    rng: &mut R,
    metric_prob: f64,
) -> Result<Option<Click>> {
    let errors = error_masks(pred, gt)?;
    if errors.is_empty() {
        return Ok(None);
    }
    if rng.random_bool(metric_prob.clamp(0.0, 1.0)) {
        return next_click(pred, gt).map(Some);
    }
    let wrong: Vec<(usize, usize)> = errors
        .false_negative
        .positions()
        .chain(errors.false_positive.positions())
        .collect();
    let (r, c) = wrong[rng.random_range(0..wrong.len())];
    Ok(Some(Click::new(r, c, Label::from_membership(gt.get(r, c)))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize, top: usize, left: usize, side: usize) -> Mask {
        Mask::from_fn(n, n, |i, j| {
            (top..top + side).contains(&i) && (left..left + side).contains(&j)
        })
    }

    #[test]
    fn identical_masks_have_no_errors() {
        let m = square(9, 2, 2, 5);
        let e = error_masks(&m, &m).unwrap();
        assert!(e.is_empty());
        assert!(matches!(next_click(&m, &m), Err(Error::NoErrorRegion)));
    }

    #[test]
    fn over_and_under_segmentation() {
        let full = Mask::from_fn(6, 6, |_, _| true);
        let empty = Mask::zeros(6, 6);
        let e = error_masks(&full, &empty).unwrap();
        assert_eq!(e.false_positive, full);
        assert!(e.false_negative.is_empty());

        let gt = square(9, 2, 2, 5);
        let e = error_masks(&Mask::zeros(9, 9), &gt).unwrap();
        assert_eq!(e.false_negative, gt);
        assert!(e.false_positive.is_empty());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(error_masks(&Mask::zeros(3, 4), &Mask::zeros(4, 3)).is_err());
    }

    #[test]
    fn edt_of_empty_mask_is_zero() {
        let d = edt(&Mask::zeros(7, 5));
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edt_single_pixel_is_one() {
        let mut m = Mask::zeros(3, 3);
        m.set(1, 1, true);
        let d = edt(&m);
        assert_eq!(d.get(1, 1), 1.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn full_mask_is_bounded_by_padding() {
        let m = Mask::from_fn(5, 5, |_, _| true);
        let d = edt(&m);
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(d.get(2, 2), 3.0);
    }

    #[test]
    fn click_lands_on_square_centre() {
        let gt = square(9, 2, 2, 5);
        let c = next_click(&Mask::zeros(9, 9), &gt).unwrap();
        assert_eq!(c, Click::positive(4, 4));
    }

    #[test]
    fn false_positive_disk_gets_negative_click_at_centre() {
        let pred = Mask::from_fn(15, 15, |i, j| {
            let (di, dj) = (i as i64 - 7, j as i64 - 7);
            di * di + dj * dj <= 16
        });
        let c = next_click(&pred, &Mask::zeros(15, 15)).unwrap();
        assert_eq!(c, Click::negative(7, 7));
    }

    #[test]
    fn equal_depth_prefers_false_negative() {
        // one FP pixel and one FN pixel, both at distance 1
        let mut pred = Mask::zeros(5, 5);
        pred.set(0, 0, true);
        let mut gt = Mask::zeros(5, 5);
        gt.set(4, 4, true);
        assert_eq!(next_click(&pred, &gt).unwrap(), Click::positive(4, 4));
    }

    #[test]
    fn training_clicks_respect_bounds_and_labels() {
        let gt = Mask::from_fn(20, 20, |_, _| true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let clicks = sample_training_clicks(&gt, &mut rng, 24, Default::default()).unwrap();
            assert!((1..=24).contains(&clicks.len()));
            assert!(clicks.iter().all(|c| c.label == Label::Positive));
        }
    }

    #[test]
    fn training_clicks_are_seed_deterministic() {
        let gt = square(16, 3, 4, 6);
        let a = sample_training_clicks(&gt, &mut ChaCha8Rng::seed_from_u64(9), 24, Default::default());
        let b = sample_training_clicks(&gt, &mut ChaCha8Rng::seed_from_u64(9), 24, Default::default());
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn training_clicks_need_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_clicks(&Mask::zeros(4, 4), &mut rng, 24, Default::default()).is_err());
    }

    #[test]
    fn training_correction_hits_an_error_pixel() {
        let gt = square(12, 2, 2, 6);
        let pred = square(12, 4, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = training_correction(&pred, &gt, &mut rng, 0.5).unwrap().unwrap();
            assert_ne!(pred.get(c.row, c.col), gt.get(c.row, c.col));
            assert_eq!(c.label.is_positive(), gt.get(c.row, c.col));
        }
        assert!(training_correction(&gt, &gt, &mut rng, 0.5).unwrap().is_none());
    }
}
