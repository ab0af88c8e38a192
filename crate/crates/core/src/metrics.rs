//! Restoration quality metrics on the luma channel, plus the
//! texture-vs-degradation profile used to audit where quality is lost.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// BT.601 studio-swing luma from RGB in [0, 1]: Y in [16, 235].
pub fn rgb_to_y(img: &Tensor) -> Result<Vec<Scalar>> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(Error::Shape(format!(
            "rgb_to_y: {:?} should be [3, H, W]",
            img.shape
        )));
    }
    let n = img.shape[1] * img.shape[2];
    let (r, g, b) = (&img.data[..n], &img.data[n..2 * n], &img.data[2 * n..]);
    Ok((0..n)
        .map(|i| 16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i])
        .collect())
}

fn shave(y: &[Scalar], h: usize, w: usize, border: usize) -> Result<(Vec<Scalar>, usize, usize)> {
    if h <= 2 * border || w <= 2 * border {
        return Err(Error::Shape(format!(
            "shave: border {border} leaves nothing of {h}x{w}"
        )));
    }
    let (sh, sw) = (h - 2 * border, w - 2 * border);
    let mut out = Vec::with_capacity(sh * sw);
    for yy in border..h - border {
        out.extend_from_slice(&y[yy * w + border..yy * w + w - border]);
    }
    Ok((out, sh, sw))
}

/// PSNR over values on the 0-255 scale, capped at 99 dB.
pub fn psnr_gray(a: &[Scalar], b: &[Scalar]) -> Result<Scalar> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Scalar>()
        / a.len() as Scalar;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(99.0))
}

/// Y-channel PSNR between RGB images, shaving `border` pixels per side.
pub fn psnr_y(a: &Tensor, b: &Tensor, border: usize) -> Result<Scalar> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "psnr_y: shapes {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (h, w) = (a.shape[1], a.shape[2]);
    let (ya, ..) = shave(&rgb_to_y(a)?, h, w, border)?;
    let (yb, ..) = shave(&rgb_to_y(b)?, h, w, border)?;
    psnr_gray(&ya, &yb)
}

/// 11x11 Gaussian window, sigma 1.5, normalized to sum 1.
fn gaussian_window() -> Vec<Scalar> {
    let sigma = 1.5;
    let mut w = Vec::with_capacity(121);
    for y in 0..11 {
        for x in 0..11 {
            let (dy, dx) = (y as Scalar - 5.0, x as Scalar - 5.0);
            w.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: Scalar = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn window_filter(y: &[Scalar], h: usize, w: usize, win: &[Scalar]) -> Vec<Scalar> {
    let (oh, ow) = (h - 10, w - 10);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for ky in 0..11 {
                for kx in 0..11 {
                    s += win[ky * 11 + kx] * y[(oy + ky) * w + ox + kx];
                }
            }
            out[oy * ow + ox] = s;
        }
    }
    out
}

/// Mean structural similarity on the 0-255 scale: Gaussian-weighted local
/// means/variances over the valid region, K1 = 0.01, K2 = 0.03.
pub fn ssim_gray(a: &[Scalar], b: &[Scalar], h: usize, w: usize) -> Result<Scalar> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape("ssim: length does not match h*w".into()));
    }
    if h < 11 || w < 11 {
        return Err(Error::Shape(format!(
            "ssim: image {h}x{w} smaller than the 11x11 window"
        )));
    }
    let win = gaussian_window();
    let aa: Vec<Scalar> = a.iter().map(|v| v * v).collect();
    let bb: Vec<Scalar> = b.iter().map(|v| v * v).collect();
    let ab: Vec<Scalar> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = window_filter(a, h, w, &win);
    let mu_b = window_filter(b, h, w, &win);
    let m_aa = window_filter(&aa, h, w, &win);
    let m_bb = window_filter(&bb, h, w, &win);
    let m_ab = window_filter(&ab, h, w, &win);
    let c1 = (0.01 * 255.0) * (0.01 * 255.0);
    let c2 = (0.03 * 255.0) * (0.03 * 255.0);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as Scalar)
}

/// Y-channel SSIM between RGB images, shaving `border` pixels per side.
pub fn ssim_y(a: &Tensor, b: &Tensor, border: usize) -> Result<Scalar> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "ssim_y: shapes {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (h, w) = (a.shape[1], a.shape[2]);
    let (ya, sh, sw) = shave(&rgb_to_y(a)?, h, w, border)?;
    let (yb, ..) = shave(&rgb_to_y(b)?, h, w, border)?;
    ssim_gray(&ya, &yb, sh, sw)
}

fn population_variance(xs: &[Scalar]) -> Scalar {
    let mean = xs.iter().sum::<Scalar>() / xs.len() as Scalar;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<Scalar>() / xs.len() as Scalar
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStat {
    pub mean_variance: Scalar,
    pub mean_psnr: Scalar,
    pub count: usize,
}

/// Per-patch (degraded-luma variance, patch PSNR) stats over the
/// non-overlapping `patch`-sized grid of one image pair.
fn patch_stats(reference: &Tensor, degraded: &Tensor, patch: usize) -> Result<Vec<(Scalar, Scalar)>> {
    if reference.shape != degraded.shape {
        return Err(Error::Shape(format!(
            "degradation_profile: shapes {:?} vs {:?}",
            reference.shape, degraded.shape
        )));
    }
    let (h, w) = (reference.shape[1], reference.shape[2]);
    let (gh, gw) = (h / patch, w / patch);
    let y_ref = rgb_to_y(reference)?;
    let y_deg = rgb_to_y(degraded)?;
    let grab = |y: &[Scalar], gy: usize, gx: usize| -> Vec<Scalar> {
        let mut p = Vec::with_capacity(patch * patch);
        for dy in 0..patch {
            for dx in 0..patch {
                p.push(y[(gy * patch + dy) * w + gx * patch + dx]);
            }
        }
        p
    };
    let mut stats = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let pd = grab(&y_deg, gy, gx);
            let pr = grab(&y_ref, gy, gx);
            stats.push((population_variance(&pd), psnr_gray(&pr, &pd)?));
        }
    }
    Ok(stats)
}

/// Buckets non-overlapping patches by ascending degraded-luma variance and
/// reports per-bucket mean variance and mean patch PSNR against the
/// reference. Buckets are equal-size by rank; the remainder joins the last.
pub fn degradation_profile(
    reference: &Tensor,
    degraded: &Tensor,
    patch: usize,
    n_buckets: usize,
) -> Result<Vec<BucketStat>> {
    if patch == 0 || n_buckets == 0 {
        return Err(Error::Config(
            "degradation_profile: patch and n_buckets must be positive".into(),
        ));
    }
    bucket_by_variance(patch_stats(reference, degraded, patch)?, n_buckets)
}

/// Same statistic pooled over a whole corpus: every image contributes its
/// patches to one shared variance ranking.
pub fn degradation_profile_corpus(
    pairs: &[(Tensor, Tensor)],
    patch: usize,
    n_buckets: usize,
) -> Result<Vec<BucketStat>> {
    if patch == 0 || n_buckets == 0 {
        return Err(Error::Config(
            "degradation_profile: patch and n_buckets must be positive".into(),
        ));
    }
    let mut stats: Vec<(Scalar, Scalar)> = Vec::new();
    for (reference, degraded) in pairs {
        stats.extend(patch_stats(reference, degraded, patch)?);
    }
    bucket_by_variance(stats, n_buckets)
}

fn bucket_by_variance(stats: Vec<(Scalar, Scalar)>, n_buckets: usize) -> Result<Vec<BucketStat>> {
    let n = stats.len();
    if n < n_buckets {
        return Err(Error::Data(format!(
            "degradation_profile: {n} patches cannot fill {n_buckets} buckets"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        stats[i]
            .0
            .partial_cmp(&stats[j].0)
            .expect("variances are finite")
            .then(i.cmp(&j))
    });
    let base = n / n_buckets;
    let mut out = Vec::with_capacity(n_buckets);
    let mut pos = 0;
    for b in 0..n_buckets {
        let size = if b + 1 == n_buckets { n - pos } else { base };
        let slice = &order[pos..pos + size];
        pos += size;
        let mv = slice.iter().map(|&i| stats[i].0).sum::<Scalar>() / size as Scalar;
        let mp = slice.iter().map(|&i| stats[i].1).sum::<Scalar>() / size as Scalar;
        out.push(BucketStat {
            mean_variance: mv,
            mean_psnr: mp,
            count: size,
        });
    }
    Ok(out)
}

fn average_ranks(xs: &[Scalar]) -> Vec<Scalar> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite").then(i.cmp(&j)));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as Scalar / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks, so ties
/// are handled exactly.
pub fn spearman(xs: &[Scalar], ys: &[Scalar]) -> Result<Scalar> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data(format!(
            "spearman: need two equal-length series, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as Scalar;
    let mx = rx.iter().sum::<Scalar>() / n;
    let my = ry.iter().sum::<Scalar>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("spearman: a series is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
