//! Image-space quality metrics on the 0-255 display range and the
//! evaluation harness that scores translation directions over a test set.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::error::{Error, Result};
use crate::nn::derive_rng;
use crate::registry::ModalityId;
use crate::sampling::{translate, SampleConfig};
use crate::tensor::{Scalar, Tensor};
use crate::training::nth_example;

pub const DATA_RANGE: f64 = 255.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * DATA_RANGE) * (0.01 * DATA_RANGE);
const SSIM_C2: f64 = (0.03 * DATA_RANGE) * (0.03 * DATA_RANGE);

/// Maps model-space images in `[-1, 1]` onto the 0-255 display range.
/// Purely linear — no rounding, quantization or clamping — so sub-level
/// differences survive into the metrics.
pub fn to_display_range<T: Scalar>(img: &Tensor<T>) -> Tensor<f64> {
    Tensor::new(
        img.shape().to_vec(),
        img.data().iter().map(|v| (v.as_f64() + 1.0) * 127.5).collect(),
    )
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let n = a.data().len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB against a 255 peak. Identical inputs
/// return `f64::INFINITY`; aggregation layers treat that as an exact match
/// rather than folding it into a mean.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * DATA_RANGE.log10() - 10.0 * m.log10())
}

/// Root-mean-square error on the 0-255 display range.
pub fn rmse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            let v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity over `[c, h, w]` images on the display range,
/// using an 11x11 Gaussian window (sigma 1.5) and averaging the per-window
/// scores over all fully covered positions, then over channels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "(channels, h, w)".into(),
            got: format!("{shape:?}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmallForSsim);
    }
    let win = gaussian_window();
    let mut channel_sum = 0.0;
    for ch in 0..c {
        let xa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let xb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut mu_x, mut mu_y) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let g = win[u * SSIM_WINDOW + v];
                        let x = xa[(i + u) * w + (j + v)];
                        let y = xb[(i + u) * w + (j + v)];
                        mu_x += g * x;
                        mu_y += g * y;
                        sxx += g * x * x;
                        syy += g * y * y;
                        sxy += g * x * y;
                    }
                }
                let var_x = sxx - mu_x * mu_x;
                let var_y = syy - mu_y * mu_y;
                let cov = sxy - mu_x * mu_y;
                let num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2);
                acc += num / den;
            }
        }
        channel_sum += acc / positions as f64;
    }
    Ok(channel_sum / c as f64)
}

/// Aggregate quality of one translation direction over a test set.
/// Pairs whose prediction matches the target exactly are counted in
/// `exact_matches` and excluded from the PSNR mean/std (their PSNR is
/// infinite); SSIM and RMSE stay finite and are always included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: String,
    pub status: String,
    pub n_pairs: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub exact_matches: usize,
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::INFINITY, 0.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn squeeze_batch(t: &Tensor<f64>) -> Tensor<f64> {
    let shape = t.shape();
    Tensor::new(shape[1..].to_vec(), t.data().to_vec())
}

/// Translates every source in the test set and scores the results against
/// the paired targets. Pair order fixes the aggregation, so two calls with
/// the same inputs and seed produce identical reports.
pub fn evaluate_direction<T: Scalar>(
    model: &ModelState<T>,
    sources: &Tensor<T>,
    targets: &Tensor<T>,
    src: ModalityId,
    tgt: ModalityId,
    config: &SampleConfig,
) -> Result<MetricsReport> {
    let direction = format!("{}:{}", model.registry.name(src)?, model.registry.name(tgt)?);
    if sources.shape().len() != 4 || targets.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: "(pairs, channels, h, w)".into(),
            got: format!("{:?} / {:?}", sources.shape(), targets.shape()),
        });
    }
    let m = sources.shape()[0];
    if m == 0 || targets.shape()[0] == 0 {
        return Err(Error::EmptyTestSet(direction));
    }
    if targets.shape()[0] != m {
        return Err(Error::ShapeMismatch {
            expected: format!("{m} target images"),
            got: format!("{}", targets.shape()[0]),
        });
    }
    let predicted = translate(model, sources, src, tgt, config)?;
    if predicted.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", predicted.shape()),
            got: format!("{:?}", targets.shape()),
        });
    }

    let mut psnrs = Vec::new();
    let mut ssims = Vec::with_capacity(m);
    let mut rmses = Vec::with_capacity(m);
    let mut exact = 0usize;
    for i in 0..m {
        let p = to_display_range(&nth_example(&predicted, i));
        let g = to_display_range(&nth_example(targets, i));
        let pv = psnr(&p, &g)?;
        if pv.is_infinite() {
            exact += 1;
        } else {
            psnrs.push(pv);
        }
        ssims.push(ssim(&squeeze_batch(&p), &squeeze_batch(&g))?);
        rmses.push(rmse(&p, &g)?);
    }
    let (psnr_mean, psnr_std) = mean_std(&psnrs);
    let (ssim_mean, ssim_std) = mean_std(&ssims);
    let (rmse_mean, rmse_std) = mean_std(&rmses);
    let status = if model.trained_directions.contains(&(src, tgt)) {
        "TRAINED"
    } else {
        "ZERO_SHOT"
    };
    Ok(MetricsReport {
        direction,
        status: status.into(),
        n_pairs: m,
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        rmse_mean,
        rmse_std,
        exact_matches: exact,
    })
}

/// Scores every ordered (src, tgt) pair. `per_modality[i]` holds the test
/// images of modality `i`, row-aligned across modalities so row `j` always
/// depicts the same scene.
pub fn evaluate_all_directions<T: Scalar>(
    model: &ModelState<T>,
    per_modality: &[Tensor<T>],
    config: &SampleConfig,
) -> Result<Vec<MetricsReport>> {
    let n = model.registry.len();
    if per_modality.len() != n {
        return Err(Error::InvalidSpec(format!(
            "expected one test tensor per modality ({n}), got {}",
            per_modality.len()
        )));
    }
    let mut reports = Vec::with_capacity(n * (n - 1));
    for s in 0..n {
        for t in 0..n {
            if s == t {
                continue;
            }
            reports.push(evaluate_direction(
                model,
                &per_modality[s],
                &per_modality[t],
                ModalityId(s),
                ModalityId(t),
                config,
            )?);
        }
    }
    Ok(reports)
}

fn fmt_stat(mean: f64, std: f64) -> String {
    if mean.is_infinite() {
        "inf".into()
    } else {
        format!("{mean:.3} ± {std:.3}")
    }
}

/// Renders reports as an aligned text table, one direction per row.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = ["DIRECTION", "STATUS", "N", "PSNR(dB)", "SSIM", "RMSE", "EXACT"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        rows.push(vec![
            r.direction.clone(),
            r.status.clone(),
            r.n_pairs.to_string(),
            fmt_stat(r.psnr_mean, r.psnr_std),
            fmt_stat(r.ssim_mean, r.ssim_std),
            fmt_stat(r.rmse_mean, r.rmse_std),
            r.exact_matches.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Serializes reports as a pretty-printed JSON array. Infinite means (all
/// pairs exact) serialize as `null`, matching standard JSON.
pub fn reports_json(reports: &[MetricsReport]) -> String {
    serde_json::to_string_pretty(reports).expect("metrics reports serialize")
}

/// Per-pixel mean of the target test images: the strongest constant
/// predictor, used as the floor that trained directions must clear.
pub fn constant_mean_image<T: Scalar>(targets: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = targets.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: "(pairs, channels, h, w)".into(),
            got: format!("{shape:?}"),
        });
    }
    let m = shape[0];
    if m == 0 {
        return Err(Error::EmptyTestSet("constant-mean baseline".into()));
    }
    let stride: usize = shape[1..].iter().product();
    let mut acc = vec![0.0f64; stride];
    for i in 0..m {
        for (a, v) in acc.iter_mut().zip(&targets.data()[i * stride..(i + 1) * stride]) {
            *a += v.as_f64();
        }
    }
    let data = acc.iter().map(|&a| T::of_f64(a / m as f64)).collect();
    Ok(Tensor::new(shape[1..].to_vec(), data))
}

/// Mean PSNR of predicting the per-pixel mean image for every pair.
pub fn constant_mean_psnr<T: Scalar>(targets: &Tensor<T>) -> Result<f64> {
    let mean_img = constant_mean_image(targets)?;
    let mut shape = vec![1];
    shape.extend_from_slice(mean_img.shape());
    let pred = to_display_range(&Tensor::new(shape, mean_img.data().to_vec()));
    let m = targets.shape()[0];
    let mut vals = Vec::with_capacity(m);
    for i in 0..m {
        let g = to_display_range(&nth_example(targets, i));
        vals.push(psnr(&pred, &g)?);
    }
    Ok(mean_std(&vals).0)
}

const NOISE_BASELINE_TAG: u64 = 0xBA5E;

/// Mean PSNR of predicting an independent uniform `[-1, 1]` image for
/// every pair: the floor that zero-shot directions must clear.
pub fn random_noise_psnr<T: Scalar>(targets: &Tensor<T>, seed: u64) -> Result<f64> {
    let shape = targets.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: "(pairs, channels, h, w)".into(),
            got: format!("{shape:?}"),
        });
    }
    let m = shape[0];
    if m == 0 {
        return Err(Error::EmptyTestSet("random-noise baseline".into()));
    }
    let stride: usize = shape[1..].iter().product();
    let mut ex_shape = vec![1];
    ex_shape.extend_from_slice(&shape[1..]);
    let mut vals = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = derive_rng(seed, &[NOISE_BASELINE_TAG, i as u64]);
        let noise: Vec<T> = (0..stride)
            .map(|_| T::of_f64(rand::Rng::random_range(&mut rng, -1.0..1.0)))
            .collect();
        let pred = to_display_range(&Tensor::new(ex_shape.clone(), noise));
        let g = to_display_range(&nth_example(targets, i));
        vals.push(psnr(&pred, &g)?);
    }
    Ok(mean_std(&vals).0)
}
