use std::fs;

use clickseg::data::{
    decode_mask, encode_mask_png, load_dataset, random_crop, synth_generate, synth_sample, write_dataset, Sample,
    ShapeKind, ShapeMix, SynthConfig, MANIFEST_FILE,
};
use clickseg::{Error, ImageTensor, Mask};
use image::{GrayImage, Luma, RgbImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 4-connected components by flood fill.
fn components(mask: &Mask) -> usize {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            let (i, j) = (k / w, k % w);
            let mut visit = |ni: usize, nj: usize| {
                let nk = ni * w + nj;
                if mask.bits()[nk] && !seen[nk] {
                    seen[nk] = true;
                    stack.push(nk);
                }
            };
            if i > 0 { visit(i - 1, j) }
            if i + 1 < h { visit(i + 1, j) }
            if j > 0 { visit(i, j - 1) }
            if j + 1 < w { visit(i, j + 1) }
        }
    }
    count
}

/// Minimum width of the pixel centres: the smallest hull-edge-to-farthest-
/// vertex distance over the convex hull (the minimum is always attained
/// perpendicular to a hull edge).
fn min_oriented_width(mask: &Mask) -> f64 {
    let mut pts: Vec<(i64, i64)> = mask.positions().map(|(i, j)| (i as i64, j as i64)).collect();
    pts.sort();
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(i64, i64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        return 0.0;
    }
    (0..hull.len())
        .map(|k| {
            let (a, b) = (hull[k], hull[(k + 1) % hull.len()]);
            let len = (((b.0 - a.0).pow(2) + (b.1 - a.1).pow(2)) as f64).sqrt();
            hull.iter().map(|&p| cross(a, b, p).abs() as f64 / len).fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

fn gradient_image(h: u32, w: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, ((x + y) % 256) as u8]))
}

#[test]
fn synth_is_deterministic_and_sized() {
    let config = SynthConfig { seed: 7, count: 100, ..Default::default() };
    let a = synth_generate(&config);
    let b = synth_generate(&config);
    assert_eq!(a.len(), 100);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.rgb, y.rgb);
        assert_eq!(x.mask, y.mask);
        assert!(!x.mask.is_empty());
        assert_eq!(x.mask.dims(), (112, 112));
    }
    let other = synth_generate(&SynthConfig { seed: 8, count: 5, ..Default::default() });
    assert_ne!(a[0].mask, other[0].mask);
}

#[test]
fn bars_are_thin() {
    let band = Mask::from_fn(20, 40, |i, j| (5..8).contains(&i) && (3..30).contains(&j));
    assert_eq!(min_oriented_width(&band), 2.0);
    let config = SynthConfig { seed: 3, count: 60, mix: ShapeMix::only(ShapeKind::Bar), ..Default::default() };
    for index in 0..config.count as u64 {
        let (raw, plan) = synth_sample(&config, index);
        assert_eq!(plan.kind, ShapeKind::Bar);
        let width = min_oriented_width(&raw.mask);
        assert!(width <= 6.0, "sample {index}: width {width}");
    }
}

#[test]
fn component_count_matches_the_plan() {
    let config = SynthConfig { seed: 11, count: 200, ..Default::default() };
    let mut kinds = std::collections::HashSet::new();
    for index in 0..config.count as u64 {
        let (raw, plan) = synth_sample(&config, index);
        kinds.insert(plan.kind);
        assert_eq!(components(&raw.mask), plan.parts, "sample {index} {plan:?}");
    }
    assert_eq!(kinds.len(), 4);
}

#[test]
fn disjoint_splits_share_a_seed() {
    let train = SynthConfig { seed: 1, count: 3, ..Default::default() };
    let held_out = SynthConfig { first_index: 100_000, ..train.clone() };
    let a = synth_generate(&train);
    let b = synth_generate(&held_out);
    assert!(a.iter().all(|x| b.iter().all(|y| x.mask != y.mask)));
}

#[test]
fn synth_config_validation() {
    assert!(SynthConfig { height: 100, ..Default::default() }.validate(14).is_err());
    let zero = ShapeMix { ellipse: 0.0, polygon: 0.0, bar: 0.0, multi_part: 0.0 };
    assert!(SynthConfig { mix: zero, ..Default::default() }.validate(14).is_err());
    assert!(SynthConfig::default().validate(14).is_ok());
}

#[test]
fn write_then_load_roundtrips_masks() {
    let raws = synth_generate(&SynthConfig { seed: 2, count: 6, ..Default::default() });
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &raws).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.skipped.is_empty());
    assert_eq!(ds.samples.len(), 6);
    for (s, r) in ds.samples.iter().zip(&raws) {
        assert_eq!(s.mask, r.mask);
        assert_eq!(s.id, r.id);
        assert_eq!(s.class_label, r.class_label);
        assert_eq!(s.image.dims(), (112, 112));
    }
    // the manifest path works as well as the directory
    let again = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(again.samples.len(), 6);
    // second save of the loaded masks is byte-identical
    let first = fs::read(dir.path().join("masks/000000.png")).unwrap();
    assert_eq!(encode_mask_png(&ds.samples[0].mask).unwrap(), first);
}

#[test]
fn dimension_mismatch_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("img")).unwrap();
    gradient_image(64, 64).save(dir.path().join("img/a.png")).unwrap();
    GrayImage::from_pixel(63, 64, Luma([255])).save(dir.path().join("img/a_mask.png")).unwrap();
    gradient_image(64, 64).save(dir.path().join("img/b.png")).unwrap();
    GrayImage::from_fn(64, 64, |x, _| Luma([if x < 10 { 255 } else { 0 }])).save(dir.path().join("img/b_mask.png")).unwrap();
    let manifest = "# clickseg-manifest v1\n# mean=0.5,0.5,0.5 std=0.25,0.25,0.25\n\
                    img/a.png\timg/a_mask.png\tthing\tcase-a\n\
                    img/b.png\timg/b_mask.png\tthing\tcase-b\n\
                    img/missing.png\timg/b_mask.png\tthing\tcase-c\n";
    fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.samples.len(), 1);
    assert_eq!(ds.samples[0].image.dims(), (64, 64));
    assert_eq!(ds.samples[0].mask.count(), 640);
    let ids: Vec<&str> = ds.skipped.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["case-a", "case-c"]);
    assert!(ds.skipped[0].reason.contains("case-a"));
}

#[test]
fn mask_binarization_at_half_gray() {
    let gray = GrayImage::from_fn(4, 1, |x, _| Luma([[0, 127, 128, 255][x as usize]]));
    let mut bytes = Vec::new();
    gray.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
    assert_eq!(decode_mask(&bytes).unwrap().bits(), &[false, false, true, true]);
}

#[test]
fn sample_rejects_mismatched_dims() {
    let err = Sample::new(ImageTensor::zeros(64, 64), Mask::zeros(64, 63), "c".into(), "id-9".into()).unwrap_err();
    assert!(matches!(err, Error::Sample { ref id, .. } if id == "id-9"), "{err}");
}

fn crop_sample(h: usize, w: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let (ci, cj) = (rng.random_range(0..h), rng.random_range(0..w));
    let mask = Mask::from_fn(h, w, |i, j| i.abs_diff(ci) < 6 && j.abs_diff(cj) < 9);
    let tensor = clickseg::numeric::Tensor::from_fn([h, w, 3], |k| k as f32);
    Sample::new(ImageTensor::new(tensor).unwrap(), mask, "c".into(), "s".into()).unwrap()
}

#[test]
fn crop_examples() {
    let s = crop_sample(480, 640, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = random_crop(&s, 448, 14, &mut rng).unwrap();
    assert_eq!(c.image.dims(), (448, 448));
    assert!(!c.mask.is_empty());
    let small = crop_sample(112, 112, 2);
    assert_eq!(random_crop(&small, 112, 14, &mut rng).unwrap(), small);
    assert!(matches!(random_crop(&s, 450, 14, &mut rng), Err(Error::Divisibility { .. })));
    // smaller than the crop: reflect-padded
    let padded = random_crop(&crop_sample(50, 60, 3), 112, 14, &mut rng).unwrap();
    assert_eq!(padded.image.dims(), (112, 112));
    assert!(!padded.mask.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn crop_keeps_image_and_mask_aligned(h in 40usize..90, w in 40usize..90, seed in any::<u64>()) {
        let s = crop_sample(h, w, seed);
        let c = random_crop(&s, 28, 14, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(!c.mask.is_empty());
        // the image encodes its own coordinates, which locates the window
        let first = c.image.pixel(0, 0)[0] as usize;
        let (top, left) = (first / 3 / w, first / 3 % w);
        prop_assert_eq!(&c.mask, &s.mask.crop(top, left, 28, 28).unwrap());
        prop_assert_eq!(&c.image, &s.image.crop(top, left, 28, 28).unwrap());
    }
}
