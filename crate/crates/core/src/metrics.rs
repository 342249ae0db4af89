//! Slice-wise SSIM, PSNR and Otsu-thresholded DICE.
//!
//! Images in `[0, 1]` are scaled by 255 without quantisation; only Otsu
//! bins the values into 256 levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Plane, Volume};

const L: f64 = 255.0;
const C1: f64 = (0.01 * L) * (0.01 * L);
const C2: f64 = (0.03 * L) * (0.03 * L);
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(x: &Plane, y: &Plane) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", x.height, x.width, y.height, y.width)));
    }
    if x.data.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

fn scaled(p: &Plane) -> Vec<f64> {
    p.data.iter().map(|&v| v as f64 * L).collect()
}

/// Valid-mode separable correlation of an `h x w` image with `kernel`.
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = kernel.iter().enumerate().map(|(i, kv)| kv * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = kernel.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Windowed SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over all
/// valid window positions. Smaller images use the largest odd window that fits.
pub fn ssim(x: &Plane, y: &Plane) -> Result<f64> {
    check_shapes(x, y)?;
    let (h, w) = (x.height, x.width);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let kernel = gaussian_kernel(size, SSIM_SIGMA);
    let (a, b) = (scaled(x), scaled(y));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, ho, wo) = filter_valid(&a, h, w, &kernel);
    let (my, ..) = filter_valid(&b, h, w, &kernel);
    let (mxx, ..) = filter_valid(&prod(&a, &a), h, w, &kernel);
    let (myy, ..) = filter_valid(&prod(&b, &b), h, w, &kernel);
    let (mxy, ..) = filter_valid(&prod(&a, &b), h, w, &kernel);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cov + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    Ok(total / (ho * wo) as f64)
}

/// Single-window SSIM over the whole image from global luminance, contrast
/// and structure terms. Reference only; reports use [`ssim`].
pub fn ssim_global(x: &Plane, y: &Plane) -> Result<f64> {
    check_shapes(x, y)?;
    let (a, b) = (scaled(x), scaled(y));
    let n = a.len() as f64;
    let (ux, uy) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let vx = a.iter().map(|v| (v - ux).powi(2)).sum::<f64>() / n;
    let vy = b.iter().map(|v| (v - uy).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(&b).map(|(p, q)| (p - ux) * (q - uy)).sum::<f64>() / n;
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    let c3 = C2 / 2.0;
    let l = (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
    let c = (2.0 * sx * sy + C2) / (vx + vy + C2);
    let s = (cov + c3) / (sx * sy + c3);
    Ok(l * c * s)
}

/// `10 log10(255^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(x: &Plane, y: &Plane) -> Result<f64> {
    check_shapes(x, y)?;
    let (a, b) = (scaled(x), scaled(y));
    let mse = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (L * L / mse).log10() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Otsu {
    /// Bin value in `0..=255`; foreground is strictly above it.
    pub threshold: u8,
    /// The image holds a single grey level.
    pub degenerate: bool,
}

pub fn quantize(v: f32) -> u8 {
    (v as f64 * L).round().clamp(0.0, L) as u8
}

pub fn histogram(img: &[f32]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in img {
        hist[quantize(v) as usize] += 1;
    }
    hist
}

/// Threshold maximising between-class variance; ties resolve to the lowest bin.
pub fn otsu_threshold(img: &Plane) -> Result<Otsu> {
    if img.data.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    let hist = histogram(&img.data);
    let occupied: Vec<usize> = (0..256).filter(|&b| hist[b] > 0).collect();
    if occupied.len() == 1 {
        return Ok(Otsu { threshold: occupied[0] as u8, degenerate: true });
    }
    let total = img.data.len() as f64;
    let sum_all: f64 = (0..256).map(|b| b as f64 * hist[b] as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (f64::NEG_INFINITY, 0usize);
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    Ok(Otsu { threshold: best_t as u8, degenerate: false })
}

pub fn foreground_mask(img: &Plane, threshold: u8) -> Vec<bool> {
    img.data.iter().map(|&v| quantize(v) > threshold).collect()
}

/// `(2 |X & Y| + C) / (|X| + |Y| + C)`.
pub fn dice(x: &[bool], y: &[bool], c: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("mask sizes {} vs {}", x.len(), y.len())));
    }
    if c < 0.0 {
        return Err(Error::InvalidArgument(format!("dice smoothing {c} must be >= 0")));
    }
    let inter = x.iter().zip(y).filter(|(a, b)| **a && **b).count() as f64;
    let (nx, ny) = (x.iter().filter(|v| **v).count() as f64, y.iter().filter(|v| **v).count() as f64);
    let denom = nx + ny + c;
    Ok(if denom == 0.0 { 1.0 } else { (2.0 * inter + c) / denom })
}

pub const DICE_SMOOTHING: f64 = 1.0;

mod infinite_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(_) => Ok(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub ssim: f64,
    #[serde(with = "infinite_as_string")]
    pub psnr: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_slice: Vec<SliceMetrics>,
    pub mean_ssim: f64,
    /// Mean over slices with finite PSNR; infinite when every slice is exact.
    #[serde(with = "infinite_as_string")]
    pub mean_psnr: f64,
    pub infinite_psnr_slices: usize,
    pub mean_dice: f64,
    /// DICE over the whole stack of per-slice masks.
    pub volume_dice: f64,
}

impl MetricReport {
    /// One-line summary in `SSIM | PSNR | DICE` order.
    pub fn summary_row(&self) -> String {
        format!("{:.4} | {:.2} | {:.4}", self.mean_ssim, self.mean_psnr, self.mean_dice)
    }
}

pub fn evaluate(recon: &Volume, truth: &Volume) -> Result<MetricReport> {
    if recon.dims() != truth.dims() {
        return Err(Error::Shape(format!("recon {:?} vs truth {:?}", recon.dims(), truth.dims())));
    }
    let mut per_slice = Vec::with_capacity(truth.depth());
    let (mut all_r, mut all_t) = (Vec::new(), Vec::new());
    for k in 0..truth.depth() {
        let (r, t) = (recon.plane(k), truth.plane(k));
        let mr = foreground_mask(&r, otsu_threshold(&r)?.threshold);
        let mt = foreground_mask(&t, otsu_threshold(&t)?.threshold);
        per_slice.push(SliceMetrics { ssim: ssim(&r, &t)?, psnr: psnr(&r, &t)?, dice: dice(&mr, &mt, DICE_SMOOTHING)? });
        all_r.extend(mr);
        all_t.extend(mt);
    }
    let n = per_slice.len() as f64;
    let finite: Vec<f64> = per_slice.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
    let mean_psnr =
        if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    Ok(MetricReport {
        mean_ssim: per_slice.iter().map(|s| s.ssim).sum::<f64>() / n,
        mean_dice: per_slice.iter().map(|s| s.dice).sum::<f64>() / n,
        infinite_psnr_slices: per_slice.len() - finite.len(),
        mean_psnr,
        volume_dice: dice(&all_r, &all_t, DICE_SMOOTHING)?,
        per_slice,
    })
}

/// PSNR of the whole volume as one signal.
pub fn volume_psnr(recon: &Volume, truth: &Volume) -> Result<f64> {
    if recon.dims() != truth.dims() {
        return Err(Error::Shape(format!("recon {:?} vs truth {:?}", recon.dims(), truth.dims())));
    }
    let [d, h, w] = truth.dims();
    psnr(&Plane::new(d * h, w, recon.data().to_vec())?, &Plane::new(d * h, w, truth.data().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn ssim_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_plane(&mut rng, 20, 24);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let (zero, full) = (Plane::filled(16, 16, 0.0), Plane::filled(16, 16, 1.0));
        let expect = C1 / (255.0 * 255.0 + C1);
        assert!((ssim(&zero, &full).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1e-4).abs() < 1e-6);
        let small = random_plane(&mut rng, 6, 9);
        assert_eq!(ssim(&small, &small).unwrap(), 1.0);
        assert!(ssim(&x, &small).is_err());
    }

    #[test]
    fn ssim_global_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 8, 8);
        assert!((ssim_global(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_fixtures() {
        let x = Plane::filled(4, 4, 0.2);
        let y = Plane::new(4, 4, vec![(0.2 * 255.0 + 1.0) / 255.0; 16]).unwrap();
        assert!((psnr(&x, &y).unwrap() - 10.0 * 65025f64.log10()).abs() < 1e-4);
        assert!((psnr(&x, &y).unwrap() - 48.13).abs() < 0.005);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&Plane::filled(3, 3, 0.0), &Plane::filled(3, 3, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn dice_fixtures() {
        let a = vec![true; 100];
        assert_eq!(dice(&a, &a, 1.0).unwrap(), 1.0);
        let mut x = vec![false; 20];
        let mut y = vec![false; 20];
        x[..10].iter_mut().for_each(|v| *v = true);
        y[5..15].iter_mut().for_each(|v| *v = true);
        assert_eq!(dice(&x, &y, 0.0).unwrap(), 0.5);
        assert_eq!(dice(&[false; 5], &[false; 5], 1.0).unwrap(), 1.0);
        assert!(dice(&x, &y[..3], 1.0).is_err());
    }

    #[test]
    fn otsu_two_levels() {
        let mut data = vec![0.0; 32];
        data[16..].iter_mut().for_each(|v| *v = 1.0);
        let img = Plane::new(4, 8, data).unwrap();
        let o = otsu_threshold(&img).unwrap();
        assert_eq!(o, Otsu { threshold: 0, degenerate: false });
        assert_eq!(foreground_mask(&img, o.threshold).iter().filter(|&&b| b).count(), 16);
        let flat = otsu_threshold(&Plane::filled(3, 3, 0.4)).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.threshold, quantize(0.4));
    }

    /// Exhaustive minimiser of the weighted within-class variance.
    fn otsu_oracle(img: &Plane) -> u8 {
        let q: Vec<f64> = img.data.iter().map(|&v| quantize(v) as f64).collect();
        let mut best = (f64::INFINITY, 0u8);
        for t in 0..=255u8 {
            let (fg, bg): (Vec<f64>, Vec<f64>) = q.iter().partition(|&&v| v > t as f64);
            if fg.is_empty() || bg.is_empty() {
                continue;
            }
            let var = |s: &[f64]| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            };
            let within = var(&fg) + var(&bg);
            if best.0.is_infinite() || within < best.0 - 1e-9 * best.0 {
                best = (within, t);
            }
        }
        best.1
    }

    #[test]
    fn otsu_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let img = random_plane(&mut rng, 12, 12);
            assert_eq!(otsu_threshold(&img).unwrap().threshold, otsu_oracle(&img), "{:?}", histogram(&img.data));
        }
    }

    #[test]
    fn evaluate_identity_and_json() {
        let v = Volume::from_fn("v", [3, 12, 12], |d, h, w| ((d + h * w) % 7) as f32 / 6.0).unwrap();
        let r = evaluate(&v, &v).unwrap();
        assert_eq!(r.mean_ssim, 1.0);
        assert_eq!(r.infinite_psnr_slices, 3);
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert_eq!((r.mean_dice, r.volume_dice), (1.0, 1.0));
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&text).unwrap(), r);
        let other = Volume::zeros("z", [3, 12, 12]).unwrap();
        let r2 = evaluate(&other, &v).unwrap();
        assert!(r2.mean_psnr.is_finite());
        assert_eq!(serde_json::from_str::<MetricReport>(&serde_json::to_string(&r2).unwrap()).unwrap(), r2);
        assert!(evaluate(&Volume::zeros("s", [2, 12, 12]).unwrap(), &v).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random_plane(&mut rng, 14, 13), random_plane(&mut rng, 14, 13));
            let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn ssim_shift_invariance(seed in any::<u64>(), shift in -0.1f32..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f32> = (0..256).map(|_| 0.4 + 0.2 * rng.gen::<f32>()).collect();
            // checkerboard detail leaves local means (almost) untouched
            let other: Vec<f32> = base.iter().enumerate().map(|(i, v)| v + if (i / 16 + i % 16) % 2 == 0 { 0.03 } else { -0.03 }).collect();
            let (x, y) = (Plane::new(16, 16, base.clone()).unwrap(), Plane::new(16, 16, other.clone()).unwrap());
            let xs = Plane::new(16, 16, base.iter().map(|v| v + shift).collect()).unwrap();
            let ys = Plane::new(16, 16, other.iter().map(|v| v + shift).collect()).unwrap();
            let (a, b) = (ssim(&x, &y).unwrap(), ssim(&xs, &ys).unwrap());
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }

        #[test]
        fn psnr_decreases_with_error(e1 in 1u32..100, e2 in 1u32..100) {
            prop_assume!(e1 != e2);
            let x = Plane::filled(4, 4, 0.0);
            let y1 = Plane::filled(4, 4, e1 as f32 / 255.0);
            let y2 = Plane::filled(4, 4, e2 as f32 / 255.0);
            let (p1, p2) = (psnr(&x, &y1).unwrap(), psnr(&x, &y2).unwrap());
            prop_assert_eq!(e1 < e2, p1 > p2);
        }

        #[test]
        fn dice_symmetric_and_monotone(bits in prop::collection::vec(any::<bool>(), 40)) {
            let (x, y) = (bits[..20].to_vec(), bits[20..].to_vec());
            prop_assert_eq!(dice(&x, &y, 1.0).unwrap(), dice(&y, &x, 1.0).unwrap());
            let d = dice(&x, &y, 0.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn dice_grows_with_overlap(size in 1usize..20, shift in 0usize..20) {
            let mask = |off: usize| (0..60).map(|i| i >= off && i < off + size).collect::<Vec<bool>>();
            let base = mask(20);
            let (near, far) = (mask(20 + shift), mask(20 + shift + 1));
            prop_assert!(dice(&base, &near, 1.0).unwrap() >= dice(&base, &far, 1.0).unwrap());
        }
    }
}
