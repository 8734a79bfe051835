//! Reconstruction and codebook metrics: per-pixel MSE, SSIM over Gaussian
//! windows, usage histograms, and report assembly.

use serde::{Deserialize, Serialize};

use crate::data::corpus::{Corpus, Split};
use crate::data::epoch::build_epoch;
use crate::error::{Error, Result};
use crate::model::ssim::{C1, C2, SIGMA, WINDOW};
use crate::model::vqvae::{EncodingGrid, VqVae};
use crate::tensor::Tensor;

/// Mean squared difference over all pixels, channels, and images.
pub fn mse_metric(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(0, format!("mse shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut s = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y) as f64;
        s += d * d;
    }
    Ok(s / a.numel() as f64)
}

fn gaussian_1d(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window - 1) as f64 / 2.0;
    let mut v: Vec<f64> = (0..window)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Valid-mode separable Gaussian filter over one [H, W] plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // horizontal
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// SSIM between two [C, H, W] images in [0, 1]: 11x11 Gaussian window,
/// sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, computed per channel over valid
/// windows and averaged.
pub fn ssim_metric(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(0, format!("ssim shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::dim(0, format!("ssim expects [C, H, W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < WINDOW || w < WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let kernel = gaussian_1d(WINDOW, SIGMA);
    let plane = |t: &Tensor<f32>, ci: usize| -> Vec<f64> {
        t.data()[ci * h * w..(ci + 1) * h * w].iter().map(|&v| v as f64).collect()
    };
    let mut total = 0.0;
    for ci in 0..c {
        let pa = plane(a, ci);
        let pb = plane(b, ci);
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &kernel);
        let mu_b = filter_valid(&pb, h, w, &kernel);
        let e_aa = filter_valid(&paa, h, w, &kernel);
        let e_bb = filter_valid(&pbb, h, w, &kernel);
        let e_ab = filter_valid(&pab, h, w, &kernel);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Mean SSIM over a [N, C, H, W] batch, image by image.
pub fn ssim_batch_mean(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(0, format!("ssim shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a.shape().to_vec();
    let (n, rest) = (s[0], &s[1..]);
    let stride: usize = rest.iter().product();
    let mut total = 0.0;
    for i in 0..n {
        let ia = Tensor::from_vec(rest, a.data()[i * stride..(i + 1) * stride].to_vec())?;
        let ib = Tensor::from_vec(rest, b.data()[i * stride..(i + 1) * stride].to_vec())?;
        total += ssim_metric(&ia, &ib)?;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    pub perplexity: f64,
    pub dead_codes: usize,
}

/// Histogram over K, perplexity = exp(entropy), dead codes = unused rows.
pub fn codebook_stats(grids: &[EncodingGrid], k: usize) -> Result<CodebookStats> {
    let mut histogram = vec![0u64; k];
    for grid in grids {
        for &i in &grid.indices {
            if i as usize >= k {
                return Err(Error::IndexRange { index: i as usize, limit: k });
            }
            histogram[i as usize] += 1;
        }
    }
    let total: u64 = histogram.iter().sum();
    let perplexity = if total == 0 {
        1.0
    } else {
        let mut entropy = 0.0;
        for &c in &histogram {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        entropy.exp()
    };
    let dead_codes = histogram.iter().filter(|&&c| c == 0).count();
    Ok(CodebookStats { histogram, perplexity, dead_codes })
}

/// One row of the reconstruction-metrics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconReport {
    pub model_tag: String,
    pub mse: f64,
    pub ssim: f64,
    pub perplexity: f64,
    pub dead_codes: usize,
    pub n_images: usize,
}

impl ReconReport {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.mse < 0.0 {
            return Err(Error::invalid(format!("mse {} < 0", self.mse)));
        }
        if !(0.0..=1.0).contains(&self.ssim) {
            return Err(Error::invalid(format!("ssim {} outside [0, 1]", self.ssim)));
        }
        if !(1.0..=k as f64 + 1e-9).contains(&self.perplexity) {
            return Err(Error::invalid(format!("perplexity {} outside [1, {k}]", self.perplexity)));
        }
        Ok(())
    }
}

/// Streams a split through eval-mode encode/decode and aggregates metrics.
pub fn evaluate_model(
    model: &VqVae<f32>,
    model_tag: &str,
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<ReconReport> {
    let plan = build_epoch(corpus, split, model.hyper.input_size, batch_size, seed, 0)?;
    let mut mse_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut n_images = 0usize;
    let mut all_grids = Vec::new();
    for b in 0..plan.n_batches() {
        let batch = plan.batch(corpus, b)?;
        let (x_hat, grids) = model.reconstruct(&batch.pixels)?;
        let n = batch.pixels.shape()[0];
        mse_sum += mse_metric(&x_hat, &batch.pixels)? * n as f64;
        ssim_sum += ssim_batch_mean(&x_hat, &batch.pixels)? * n as f64;
        n_images += n;
        all_grids.extend(grids);
    }
    let stats = codebook_stats(&all_grids, model.hyper.codebook_size)?;
    Ok(ReconReport {
        model_tag: model_tag.to_string(),
        mse: mse_sum / n_images as f64,
        ssim: ssim_sum / n_images as f64,
        perplexity: stats.perplexity,
        dead_codes: stats.dead_codes,
        n_images,
    })
}

/// Aligned plain-text table with Model | MSE | SSIM columns.
pub fn format_report_table(reports: &[ReconReport]) -> String {
    let name_w = reports.iter().map(|r| r.model_tag.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$} | {:>9} | {:>9}\n", "Model", "MSE", "SSIM"));
    out.push_str(&format!("{:-<name_w$}-+-{:->9}-+-{:->9}\n", "", "", ""));
    for r in reports {
        out.push_str(&format!("{:<name_w$} | {:>9.5} | {:>9.5}\n", r.model_tag, r.mse, r.ssim));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn mse_identical_is_zero_and_extremes_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit_random(&[2, 3, 4, 4], &mut rng);
        assert_eq!(mse_metric(&a, &a).unwrap(), 0.0);
        let zeros = Tensor::zeros(&[3, 4, 4]);
        let ones = Tensor::full(&[3, 4, 4], 1.0);
        assert_eq!(mse_metric(&zeros, &ones).unwrap(), 1.0);
    }

    #[test]
    fn mse_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = unit_random(&[2, 3, 5, 5], &mut rng);
        let b = unit_random(&[2, 3, 5, 5], &mut rng);
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            acc += ((x - y) as f64) * ((x - y) as f64);
            count += 1;
        }
        let oracle = acc / count as f64;
        assert!((mse_metric(&a, &b).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = unit_random(&[3, 16, 16], &mut rng);
        let s = ssim_metric(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "ssim(x,x) = {s}");
    }

    #[test]
    fn inverted_checkerboard_has_low_ssim() {
        // binary 16x16 checkerboard vs its inverse: strongly negative
        // covariance drives SSIM near its floor
        let mut data = vec![0f32; 3 * 16 * 16];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    data[c * 256 + y * 16 + x] = ((x + y) % 2) as f32;
                }
            }
        }
        let a = Tensor::from_vec(&[3, 16, 16], data.clone()).unwrap();
        let inv = Tensor::from_vec(&[3, 16, 16], data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim_metric(&a, &inv).unwrap();
        assert!(s < 0.1, "ssim = {s}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let a = unit_random(&[3, 14, 14], &mut rng);
            let b = unit_random(&[3, 14, 14], &mut rng);
            let ab = ssim_metric(&a, &b).unwrap();
            let ba = ssim_metric(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = Tensor::zeros(&[3, 8, 8]);
        assert!(ssim_metric(&a, &a).is_err());
    }

    /// Direct per-window implementation: explicit 11x11 weighted sums with
    /// variance computed from centered squares, a different route than the
    /// separable E[x^2] - mu^2 path.
    fn ssim_direct_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let s = a.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let k1d = gaussian_1d(WINDOW, SIGMA);
        let mut window2d = vec![0.0f64; WINDOW * WINDOW];
        for y in 0..WINDOW {
            for x in 0..WINDOW {
                window2d[y * WINDOW + x] = k1d[y] * k1d[x];
            }
        }
        let mut total = 0.0;
        for ci in 0..c {
            let mut acc = 0.0;
            let mut count = 0usize;
            for oy in 0..=(h - WINDOW) {
                for ox in 0..=(w - WINDOW) {
                    let (mut ma, mut mb) = (0.0f64, 0.0f64);
                    for wy in 0..WINDOW {
                        for wx in 0..WINDOW {
                            let wv = window2d[wy * WINDOW + wx];
                            ma += wv * a.data()[ci * h * w + (oy + wy) * w + ox + wx] as f64;
                            mb += wv * b.data()[ci * h * w + (oy + wy) * w + ox + wx] as f64;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                    for wy in 0..WINDOW {
                        for wx in 0..WINDOW {
                            let wv = window2d[wy * WINDOW + wx];
                            let xa = a.data()[ci * h * w + (oy + wy) * w + ox + wx] as f64 - ma;
                            let xb = b.data()[ci * h * w + (oy + wy) * w + ox + wx] as f64 - mb;
                            va += wv * xa * xa;
                            vb += wv * xb * xb;
                            cov += wv * xa * xb;
                        }
                    }
                    let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
                    let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
                    acc += num / den;
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_direct_formula_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let a = unit_random(&[3, 13, 15], &mut rng);
            let b = unit_random(&[3, 13, 15], &mut rng);
            let fast = ssim_metric(&a, &b).unwrap();
            let slow = ssim_direct_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn noise_ladder_moves_mse_up_and_ssim_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // a structured base image so SSIM has signal to lose
        let mut data = vec![0f32; 3 * 16 * 16];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    data[c * 256 + y * 16 + x] = ((x / 4 + y / 4) % 2) as f32 * 0.8 + 0.1;
                }
            }
        }
        let a = Tensor::from_vec(&[3, 16, 16], data).unwrap();
        let mut last_mse = -1.0;
        let mut last_ssim = 2.0;
        for level in 1..=5 {
            let sigma = level as f32 * 0.04;
            let noisy = Tensor::from_vec(
                &[3, 16, 16],
                a.data()
                    .iter()
                    .map(|&v| (v + rng.random_range(-sigma..sigma)).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            let m = mse_metric(&a, &noisy).unwrap();
            let s = ssim_metric(&a, &noisy).unwrap();
            assert!(m > last_mse, "mse must increase along the ladder");
            assert!(s < last_ssim, "ssim must decrease along the ladder");
            last_mse = m;
            last_ssim = s;
        }
    }

    #[test]
    fn codebook_stats_collapse_and_uniform() {
        let all_zero = EncodingGrid::new(vec![0; 16], 4).unwrap();
        let stats = codebook_stats(&[all_zero], 8).unwrap();
        assert_eq!(stats.perplexity, 1.0);
        assert_eq!(stats.dead_codes, 7);
        assert_eq!(stats.histogram[0], 16);

        let uniform = EncodingGrid::new((0..256u32).collect(), 16).unwrap();
        let stats = codebook_stats(&[uniform], 256).unwrap();
        assert!((stats.perplexity - 256.0).abs() < 1e-9);
        assert_eq!(stats.dead_codes, 0);
    }

    #[test]
    fn codebook_entropy_matches_hand_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grids: Vec<EncodingGrid> = (0..3)
            .map(|_| {
                EncodingGrid::new((0..16).map(|_| rng.random_range(0..6u32)).collect(), 4).unwrap()
            })
            .collect();
        let stats = codebook_stats(&grids, 6).unwrap();
        // recompute entropy from the histogram with plain loops
        let total: u64 = stats.histogram.iter().sum();
        let mut entropy = 0.0f64;
        for &c in &stats.histogram {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        assert!((stats.perplexity - entropy.exp()).abs() < 1e-12);
    }

    #[test]
    fn report_table_is_aligned() {
        let reports = vec![ReconReport {
            model_tag: "pixel-vqvae-medres".into(),
            mse: 0.00421,
            ssim: 0.9121,
            perplexity: 17.0,
            dead_codes: 3,
            n_images: 100,
        }];
        let table = format_report_table(&reports);
        assert!(table.contains("Model"));
        assert!(table.contains("pixel-vqvae-medres"));
        assert!(table.contains("0.00421"));
    }
}
