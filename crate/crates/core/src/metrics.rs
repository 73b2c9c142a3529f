//! PSNR and SSIM with an explicit extended-real policy.
//!
//! Policy:
//! - PSNR uses peak 1.0. Exact reconstruction gives `+inf`; a reconstruction
//!   containing any NaN/inf value gives `-inf`, as does an MSE that overflows.
//!   Images are single precision, so the MSE overflows when the sum of
//!   squared errors exceeds `f32::MAX`; below that it is computed in `f64`.
//! - SSIM uses an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03 and
//!   dynamic range 1.0, evaluated at every window position fully inside the
//!   image, per channel, then averaged. A non-finite reconstruction scores 0.
//!
//! Reports serialize infinities as the strings `"inf"` and `"-inf"`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::ImageTensor;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(recon: &ImageTensor, gt: &ImageTensor) -> Result<()> {
    if recon.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs ground truth {:?}",
            recon.shape(),
            gt.shape()
        )));
    }
    if !gt.is_finite() {
        return Err(Error::InvalidValue("ground truth contains non-finite values".into()));
    }
    Ok(())
}

/// Largest sum of squared errors representable in the images' precision.
pub const MSE_OVERFLOW: f64 = f32::MAX as f64;

/// Mean squared error in double precision; `None` if `recon` is not finite
/// or the sum of squared errors overflows single precision.
pub fn mse(recon: &ImageTensor, gt: &ImageTensor) -> Result<Option<f64>> {
    check_pair(recon, gt)?;
    if !recon.is_finite() {
        return Ok(None);
    }
    let sum: f64 = recon
        .values
        .iter()
        .zip(&gt.values)
        .map(|(&r, &g)| {
            let d = r as f64 - g as f64;
            d * d
        })
        .sum();
    if sum > MSE_OVERFLOW {
        return Ok(None);
    }
    Ok(Some(sum / recon.len() as f64))
}

pub fn psnr(recon: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    Ok(match mse(recon, gt)? {
        None => f64::NEG_INFINITY,
        Some(m) if m == 0.0 => f64::INFINITY,
        Some(m) => -10.0 * m.log10(),
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, wi) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *wi = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of an h×w plane with the SSIM window.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = src[c..c + SSIM_WINDOW].iter().zip(win).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| rows[(r + k) * ow + c] * win[k]).sum();
        }
    }
    out
}

pub fn ssim(recon: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_pair(recon, gt)?;
    let (h, w, ch) = gt.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if !recon.is_finite() {
        return Ok(0.0);
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = recon.values.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let y: Vec<f64> = gt.values.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_x = filter_valid(&x, h, w, &win);
        let mu_y = filter_valid(&y, h, w, &win);
        let xx = filter_valid(&prod(&x, &x), h, w, &win);
        let yy = filter_valid(&prod(&y, &y), h, w, &win);
        let xy = filter_valid(&prod(&x, &y), h, w, &win);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
            let den = (mx * mx + my * my + c1) * (sx + sy + c2);
            acc += num / den;
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / ch as f64)
}

/// An `f64` that serializes `±inf` as `"inf"`/`"-inf"` and NaN as `"nan"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtReal(pub f64);

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            v if v == f64::INFINITY => f.write_str("inf"),
            v if v == f64::NEG_INFINITY => f.write_str("-inf"),
            v if v.is_nan() => f.write_str("nan"),
            v => write!(f, "{v}"),
        }
    }
}

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = ExtReal;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<ExtReal, E> {
                Ok(ExtReal(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<ExtReal, E> {
                Ok(ExtReal(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<ExtReal, E> {
                Ok(ExtReal(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<ExtReal, E> {
                match v {
                    "inf" => Ok(ExtReal(f64::INFINITY)),
                    "-inf" => Ok(ExtReal(f64::NEG_INFINITY)),
                    "nan" => Ok(ExtReal(f64::NAN)),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub sample_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Whether the reconstruction was entirely finite.
    pub finite: bool,
}

pub fn evaluate(sample_id: usize, recon: &ImageTensor, gt: &ImageTensor) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        sample_id,
        psnr: psnr(recon, gt)?,
        ssim: ssim(recon, gt)?,
        finite: recon.is_finite(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_samples: usize,
    pub mean_psnr: ExtReal,
    pub mean_ssim: f64,
    pub n_pos_inf: usize,
    pub n_neg_inf: usize,
    pub n_non_finite_recon: usize,
    /// False when the PSNR sample mixes `+inf` and `-inf`.
    pub valid: bool,
}

// Summing in sorted order makes the result independent of input order.
fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Extended-real mean of PSNR values: any `+inf` (or `-inf`) dominates,
/// a mix of both is NaN. NaN for an empty slice.
pub fn mean_psnr(values: &[f64]) -> f64 {
    let pos = values.iter().any(|&v| v == f64::INFINITY);
    let neg = values.iter().any(|&v| v == f64::NEG_INFINITY);
    match (pos, neg) {
        _ if values.is_empty() => f64::NAN,
        (true, true) => f64::NAN,
        (true, false) => f64::INFINITY,
        (false, true) => f64::NEG_INFINITY,
        (false, false) => sorted_mean(values.to_vec()),
    }
}

/// Extended-real means over a split.
pub fn aggregate(records: &[MetricsRecord]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero records".into()));
    }
    let n_pos_inf = records.iter().filter(|r| r.psnr == f64::INFINITY).count();
    let n_neg_inf = records.iter().filter(|r| r.psnr == f64::NEG_INFINITY).count();
    let valid = !(n_pos_inf > 0 && n_neg_inf > 0);
    let mean_psnr = mean_psnr(&records.iter().map(|r| r.psnr).collect::<Vec<_>>());
    Ok(AggregateReport {
        n_samples: records.len(),
        mean_psnr: ExtReal(mean_psnr),
        mean_ssim: sorted_mean(records.iter().map(|r| r.ssim).collect()),
        n_pos_inf,
        n_neg_inf,
        n_non_finite_recon: records.iter().filter(|r| !r.finite).count(),
        valid,
    })
}

pub const CSV_HEADER: &str = "sample_id,psnr,ssim,finite";

pub fn write_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.sample_id, ExtReal(r.psnr), r.ssim, r.finite)?;
    }
    Ok(())
}

pub fn save_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_csv(&mut w, records).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn save_json(path: &Path, report: &AggregateReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let gt = ImageTensor::filled(4, 4, 3, 0.25);
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        let off = ImageTensor::filled(4, 4, 3, 0.35);
        assert!((psnr(&off, &gt).unwrap() - 20.0).abs() < 1e-5);
        let mut nan = gt.clone();
        nan.values[5] = f32::NAN;
        assert_eq!(psnr(&nan, &gt).unwrap(), f64::NEG_INFINITY);
        assert!(psnr(&ImageTensor::zeros(4, 4, 1), &gt).is_err());
    }

    #[test]
    fn mse_overflow_threshold() {
        let gt = ImageTensor::zeros(2, 2, 1);
        // 4 · (1.8e19)² ≈ 1.3e39 > f32::MAX
        let big = ImageTensor::filled(2, 2, 1, 1.8e19);
        assert_eq!(mse(&big, &gt).unwrap(), None);
        assert_eq!(psnr(&big, &gt).unwrap(), f64::NEG_INFINITY);
        assert!(big.is_finite());
        // 4 · (9e18)² ≈ 3.2e38 < f32::MAX
        let large = ImageTensor::filled(2, 2, 1, 9e18);
        let p = psnr(&large, &gt).unwrap();
        assert!(p.is_finite() && p < -375.0, "{p}");
    }

    #[test]
    fn ssim_identity_exact_and_nonfinite_zero() {
        let x = random_image(20, 17, 3, 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let mut bad = x.clone();
        bad.values[0] = f32::INFINITY;
        assert_eq!(ssim(&bad, &x).unwrap(), 0.0);
        assert!(ssim(&random_image(10, 20, 1, 2), &random_image(10, 20, 1, 3)).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (a, b) = (0.2f64, 0.7f64);
        let x = ImageTensor::filled(16, 16, 1, a as f32);
        let y = ImageTensor::filled(16, 16, 1, b as f32);
        let (af, bf) = (a as f32 as f64, b as f32 as f64);
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * af * bf + c1) / (af * af + bf * bf + c1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric() {
        let x = random_image(16, 16, 2, 4);
        let y = random_image(16, 16, 2, 5);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!(ssim(&x, &y).unwrap() < 0.2);
    }

    #[test]
    fn psnr_monotone_and_sign_symmetric() {
        let gt = ImageTensor::filled(8, 8, 1, 0.5);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let e = k as f32 * 0.01;
            let up = ImageTensor::filled(8, 8, 1, 0.5 + e);
            let down = ImageTensor::filled(8, 8, 1, 0.5 - e);
            let p = psnr(&up, &gt).unwrap();
            assert!((p - psnr(&down, &gt).unwrap()).abs() < 1e-4);
            assert!(p < last);
            last = p;
        }
    }

    fn rec(id: usize, psnr: f64) -> MetricsRecord {
        MetricsRecord {
            sample_id: id,
            psnr,
            ssim: 0.5,
            finite: psnr != f64::NEG_INFINITY,
        }
    }

    #[test]
    fn aggregate_extended_means() {
        let r = aggregate(&[rec(0, 10.0), rec(1, 20.0)]).unwrap();
        assert_eq!(r.mean_psnr, ExtReal(15.0));
        let r = aggregate(&[rec(0, f64::INFINITY), rec(1, f64::INFINITY)]).unwrap();
        assert_eq!(r.mean_psnr.0, f64::INFINITY);
        let r = aggregate(&[rec(0, 10.0), rec(1, f64::NEG_INFINITY), rec(2, 30.0)]).unwrap();
        assert_eq!(r.mean_psnr.0, f64::NEG_INFINITY);
        assert_eq!((r.n_neg_inf, r.n_non_finite_recon), (1, 1));
        let r = aggregate(&[rec(0, f64::INFINITY), rec(1, f64::NEG_INFINITY)]).unwrap();
        assert!(!r.valid && r.mean_psnr.0.is_nan());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_json_uses_inf_strings() {
        let r = aggregate(&[rec(0, f64::INFINITY)]).unwrap();
        let js = serde_json::to_string(&r).unwrap();
        assert!(js.contains("\"mean_psnr\":\"inf\""), "{js}");
        let back: AggregateReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
        let r = aggregate(&[rec(0, f64::NEG_INFINITY)]).unwrap();
        assert!(serde_json::to_string(&r).unwrap().contains("\"-inf\""));
    }

    #[test]
    fn csv_format() {
        let mut out = Vec::new();
        write_csv(&mut out, &[rec(3, f64::NEG_INFINITY), rec(4, 12.5)]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "sample_id,psnr,ssim,finite\n3,-inf,0.5,false\n4,12.5,0.5,true\n"
        );
    }

    proptest::proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(xs in proptest::collection::vec(-50.0f64..80.0, 1..40), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let recs: Vec<_> = xs.iter().enumerate().map(|(i, &p)| rec(i, p)).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert_eq!(aggregate(&recs).unwrap(), aggregate(&shuffled).unwrap());
        }

        #[test]
        fn ssim_self_similarity_is_one(seed in 0u64..1000) {
            let x = random_image(12, 13, 1, seed);
            proptest::prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        }
    }
}
