//! Image I/O and dataset plumbing: PNG read/write, Catmull-Rom bicubic
//! resampling, the blur/downscale/noise degradation used to build training
//! pairs, a deterministic synthetic texture corpus, and aligned crop /
//! dihedral augmentation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Decodes an 8-bit PNG into a [3, H, W] tensor scaled to [0, 1].
/// Grayscale replicates into three channels; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png {path:?}: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        Error::Format(format!("png {path:?}: output size overflow"))
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png {path:?}: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "png {path:?}: only 8-bit images are supported, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Data(format!(
                "png {path:?}: unsupported color type {other:?}"
            )))
        }
    };
    let mut out = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = &bytes[(y * w + x) * channels..];
            let (r, g, b) = match channels {
                1 | 2 => (px[0], px[0], px[0]),
                _ => (px[0], px[1], px[2]),
            };
            out.data[y * w + x] = r as Scalar / 255.0;
            out.data[(h + y) * w + x] = g as Scalar / 255.0;
            out.data[(2 * h + y) * w + x] = b as Scalar / 255.0;
        }
    }
    Ok(out)
}

/// Writes a [3, H, W] tensor as an 8-bit RGB PNG, clamping to [0, 1] and
/// rounding to the nearest code.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(Error::Shape(format!(
            "write_png: {:?} should be [3, H, W]",
            img.shape
        )));
    }
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data[(c * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = &mut BufWriter::new(file);
    let mut encoder = png::Encoder::new(writer, w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut png_writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png {path:?}: {e}")))?;
    png_writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("png {path:?}: {e}")))
}

/// Catmull-Rom weights for the four taps around a sample at fractional
/// offset t in [0, 1) from the second tap. The weights sum to 1 exactly in
/// exact arithmetic.
fn catmull_rom_weights(t: Scalar) -> [Scalar; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn resample_axis(n_in: usize, n_out: usize) -> Vec<(isize, [Scalar; 4])> {
    let ratio = n_in as Scalar / n_out as Scalar;
    (0..n_out)
        .map(|d| {
            let center = (d as Scalar + 0.5) * ratio - 0.5;
            let base = center.floor();
            (base as isize, catmull_rom_weights(center - base))
        })
        .collect()
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Catmull-Rom bicubic resampling with clamp-to-edge borders and
/// center-aligned coordinates. Same-size output reproduces the input.
pub fn resize_bicubic(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    if img.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "resize_bicubic: {:?} should be [C, H, W]",
            img.shape
        )));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::Shape("resize_bicubic: empty output".into()));
    }
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let taps_x = resample_axis(w, ow);
    let taps_y = resample_axis(h, oh);

    // Horizontal pass to [c, h, ow], then vertical to [c, oh, ow].
    let mut mid = vec![0.0; c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            let row = &img.data[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, (base, ws)) in taps_x.iter().enumerate() {
                let mut s = 0.0;
                for (k, wk) in ws.iter().enumerate() {
                    s += wk * row[clamp_idx(base - 1 + k as isize, w)];
                }
                mid[(ch * h + y) * ow + x] = s;
            }
        }
    }
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for (y, (base, ws)) in taps_y.iter().enumerate() {
            for x in 0..ow {
                let mut s = 0.0;
                for (k, wk) in ws.iter().enumerate() {
                    s += wk * mid[(ch * h + clamp_idx(base - 1 + k as isize, h)) * ow + x];
                }
                out.data[(ch * oh + y) * ow + x] = s;
            }
        }
    }
    Ok(out)
}

/// Separable Gaussian blur with reflect-101 borders; sigma 0 is identity.
/// Kernel radius is ceil(3 sigma).
pub fn gaussian_blur(img: &Tensor, sigma: Scalar) -> Result<Tensor> {
    if img.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "gaussian_blur: {:?} should be [C, H, W]",
            img.shape
        )));
    }
    if sigma < 0.0 {
        return Err(Error::Config(format!("gaussian_blur: sigma {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i * i) as Scalar / (2.0 * sigma * sigma)).exp());
    }
    let norm: Scalar = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= norm);

    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // Reflect-101 around both edges; repeats until inside for small n.
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * n - 2 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut mid = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let xi = reflect(x as isize + k as isize - radius, w);
                    s += wk * img.data[(ch * h + y) * w + xi];
                }
                mid[(ch * h + y) * w + x] = s;
            }
        }
    }
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let yi = reflect(y as isize + k as isize - radius, h);
                    s += wk * mid[(ch * h + yi) * w + x];
                }
                out.data[(ch * h + y) * w + x] = s;
            }
        }
    }
    Ok(out)
}

/// One standard normal draw via Box-Muller.
fn standard_normal(rng: &mut ChaCha8Rng) -> Scalar {
    let u1: Scalar = loop {
        let v = rng.gen_range(0.0..1.0);
        if v > 0.0 {
            break v;
        }
    };
    let u2: Scalar = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI as Scalar * u2).cos()
}

/// Adds clamped Gaussian noise in place.
pub fn add_gaussian_noise(img: &mut Tensor, sigma: Scalar, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    for v in img.data.iter_mut() {
        *v = (*v + sigma * standard_normal(rng)).clamp(0.0, 1.0);
    }
}

/// Standard degradation: Gaussian blur, bicubic downscale by `scale`, then
/// additive Gaussian noise. Requires dimensions divisible by the scale.
pub fn degrade(
    hr: &Tensor,
    scale: usize,
    blur_sigma: Scalar,
    noise_sigma: Scalar,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if hr.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "degrade: {:?} should be [C, H, W]",
            hr.shape
        )));
    }
    let (h, w) = (hr.shape[1], hr.shape[2]);
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Data(format!(
            "degrade: {h}x{w} not divisible by scale {scale}"
        )));
    }
    let blurred = gaussian_blur(hr, blur_sigma)?;
    let mut lr = resize_bicubic(&blurred, h / scale, w / scale)?;
    lr.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    add_gaussian_noise(&mut lr, noise_sigma, rng);
    Ok(lr)
}

/// The eight dihedral symmetries of the square grid. Encoding: bit 2 flips
/// horizontally first, the low two bits then rotate 90 degrees
/// counterclockwise that many times.
pub fn dihedral(img: &Tensor, k: u8) -> Result<Tensor> {
    if img.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "dihedral: {:?} should be [C, H, W]",
            img.shape
        )));
    }
    if k >= 8 {
        return Err(Error::Config(format!("dihedral: element {k} outside 0..8")));
    }
    let mut cur = img.clone();
    if k & 4 != 0 {
        let (c, h, w) = (cur.shape[0], cur.shape[1], cur.shape[2]);
        let mut out = Tensor::zeros(vec![c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data[(ch * h + y) * w + x] = cur.data[(ch * h + y) * w + (w - 1 - x)];
                }
            }
        }
        cur = out;
    }
    for _ in 0..(k & 3) {
        let (c, h, w) = (cur.shape[0], cur.shape[1], cur.shape[2]);
        let mut out = Tensor::zeros(vec![c, w, h]);
        for ch in 0..c {
            for y in 0..w {
                for x in 0..h {
                    out.data[(ch * w + y) * h + x] = cur.data[(ch * h + x) * w + (w - 1 - y)];
                }
            }
        }
        cur = out;
    }
    Ok(cur)
}

/// Group inverse under the `dihedral` encoding: reflections (bit 2 set) are
/// involutions, pure rotations invert to the complementary rotation.
pub fn dihedral_inverse(k: u8) -> u8 {
    if k & 4 != 0 {
        k
    } else {
        (4 - (k & 3)) & 3
    }
}

/// Crops a (LR, HR) pair at an LR-aligned random offset so every LR pixel
/// still corresponds to the same scale x scale HR cell.
pub fn random_aligned_crop(
    lr: &Tensor,
    hr: &Tensor,
    scale: usize,
    crop_lr: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let ok = lr.shape.len() == 3
        && hr.shape.len() == 3
        && hr.shape[0] == lr.shape[0]
        && hr.shape[1] == lr.shape[1] * scale
        && hr.shape[2] == lr.shape[2] * scale;
    if !ok {
        return Err(Error::Shape(format!(
            "random_aligned_crop: {:?} and {:?} are not a x{scale} pair",
            lr.shape, hr.shape
        )));
    }
    let (lh, lw) = (lr.shape[1], lr.shape[2]);
    if crop_lr == 0 || crop_lr > lh || crop_lr > lw {
        return Err(Error::Data(format!(
            "random_aligned_crop: crop {crop_lr} does not fit {lh}x{lw}"
        )));
    }
    let y0 = rng.gen_range(0..=lh - crop_lr);
    let x0 = rng.gen_range(0..=lw - crop_lr);
    Ok((
        crop(lr, y0, x0, crop_lr, crop_lr),
        crop(hr, y0 * scale, x0 * scale, crop_lr * scale, crop_lr * scale),
    ))
}

fn crop(img: &Tensor, y0: usize, x0: usize, ch_h: usize, ch_w: usize) -> Tensor {
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut out = Tensor::zeros(vec![c, ch_h, ch_w]);
    for cc in 0..c {
        for y in 0..ch_h {
            for x in 0..ch_w {
                out.data[(cc * ch_h + y) * ch_w + x] = img.data[(cc * h + y0 + y) * w + x0 + x];
            }
        }
    }
    out
}

/// Deterministic synthetic corpus mixing flat fields, smooth gradients, and
/// periodic textures (checkerboards, stripes, diagonals). Patch variances
/// span several orders of magnitude, which the texture planner relies on.
pub fn synth_corpus(n: usize, side: usize, seed: u64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + i as u64));
        let base: Scalar = rng.gen_range(0.3..0.7);
        let tint: [Scalar; 3] = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        let kind = i % 6;
        let phase: Scalar = rng.gen_range(0.0..std::f64::consts::PI as Scalar);
        let phase2: Scalar = rng.gen_range(0.0..std::f64::consts::PI as Scalar);
        let amp: Scalar = rng.gen_range(0.15..0.45);
        let mut img = Tensor::zeros(vec![3, side, side]);
        const TAU: Scalar = std::f64::consts::TAU as Scalar;
        for y in 0..side {
            for x in 0..side {
                let (fy, fx) = (y as Scalar / side as Scalar, x as Scalar / side as Scalar);
                // Textures are band-limited sinusoids with periods of 6 px or
                // more, so a 2x downsample keeps every component below the
                // coarse-grid Nyquist rate: bicubic resampling attenuates them
                // in proportion to frequency but destroys nothing, which makes
                // the damage recoverable and graded by texture strength.
                let v = match kind {
                    // Near-flat field with a faint ramp.
                    0 => 0.02 * (fy + fx) / 2.0,
                    // Smooth radial gradient.
                    1 => {
                        let (dy, dx) = (fy - 0.5, fx - 0.5);
                        0.25 * (1.0 - (dy * dy + dx * dx).sqrt())
                    }
                    // Soft checkerboard: product of sines, period 8 per axis.
                    2 => {
                        amp * (TAU / 8.0 * y as Scalar + phase).sin()
                            * (TAU / 8.0 * x as Scalar + phase2).sin()
                    }
                    // Horizontal sine stripes, period 6.
                    3 => amp * (TAU / 6.0 * y as Scalar + phase).sin(),
                    // Vertical sine stripes, period 6.
                    4 => amp * (TAU / 6.0 * x as Scalar + phase).sin(),
                    // Diagonal sine texture, period 8 along each axis.
                    _ => amp * (TAU / 8.0 * (y + x) as Scalar + phase).sin(),
                };
                for c in 0..3 {
                    let val = (base + tint[c] + v).clamp(0.02, 0.98);
                    img.data[(c * side + y) * side + x] = val;
                }
            }
        }
        out.push(img);
    }
    out
}

/// Degrades every corpus image into an aligned (LR, HR) pair with a
/// per-image RNG stream derived from the seed.
pub fn make_sr_pairs(
    corpus: &[Tensor],
    scale: usize,
    blur_sigma: Scalar,
    noise_sigma: Scalar,
    seed: u64,
) -> Result<Vec<(Tensor, Tensor)>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, hr)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Ok((degrade(hr, scale, blur_sigma, noise_sigma, &mut rng)?, hr.clone()))
        })
        .collect()
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::metrics::rgb_to_y;

    fn tmp(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("tamb-data-{}-{}.png", tag, std::process::id()))
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut img = Tensor::zeros(vec![3, 5, 7]);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0..=255u32) as Scalar / 255.0;
        }
        let path = tmp("roundtrip");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape, img.shape);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn png_grayscale_replicates_channels() {
        // Hand-written 2x2 grayscale PNG.
        let path = tmp("gray");
        {
            let file = File::create(&path).unwrap();
            let writer = &mut BufWriter::new(file);
            let mut enc = png::Encoder::new(writer, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 85, 170, 255]).unwrap();
        }
        let img = read_png(&path).unwrap();
        assert_eq!(img.shape, vec![3, 2, 2]);
        for c in 0..3 {
            assert_eq!(img.data[c * 4], 0.0);
            assert!((img.data[c * 4 + 3] - 1.0).abs() < 1e-12);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn png_rejects_missing_file_and_non_png() {
        assert!(read_png(Path::new("/nonexistent/x.png")).is_err());
        let path = tmp("notpng");
        std::fs::write(&path, b"plainly not a png").unwrap();
        assert!(matches!(read_png(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn catmull_rom_weights_partition_unity() {
        for i in 0..=20 {
            let t = i as Scalar / 20.0;
            let w = catmull_rom_weights(t);
            assert!((w.iter().sum::<Scalar>() - 1.0).abs() < 1e-12, "t = {t}");
        }
        // At integer offsets the kernel is the identity tap.
        let w0 = catmull_rom_weights(0.0);
        assert_eq!(w0, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn resize_identity_constant_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut img = Tensor::zeros(vec![2, 6, 5]);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let same = resize_bicubic(&img, 6, 5).unwrap();
        for (a, b) in same.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let flat = Tensor::full(vec![1, 4, 4], 0.37);
        let up = resize_bicubic(&flat, 12, 8).unwrap();
        for v in &up.data {
            assert!((v - 0.37).abs() < 1e-12);
        }

        // Catmull-Rom reproduces linear ramps away from the clamped border.
        let mut ramp = Tensor::zeros(vec![1, 4, 8]);
        for y in 0..4 {
            for x in 0..8 {
                ramp.data[y * 8 + x] = x as Scalar;
            }
        }
        let up = resize_bicubic(&ramp, 4, 16).unwrap();
        for y in 0..4 {
            for x in 4..12 {
                let expect = (x as Scalar + 0.5) * 0.5 - 0.5;
                assert!(
                    (up.data[y * 16 + x] - expect).abs() < 1e-12,
                    "x = {x}: {} vs {expect}",
                    up.data[y * 16 + x]
                );
            }
        }
    }

    #[test]
    fn blur_preserves_mean_and_shrinks_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = Tensor::zeros(vec![1, 16, 16]);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let out = gaussian_blur(&img, 1.2).unwrap();
        let mean = |d: &[Scalar]| d.iter().sum::<Scalar>() / d.len() as Scalar;
        let var = |d: &[Scalar]| {
            let m = mean(d);
            d.iter().map(|v| (v - m) * (v - m)).sum::<Scalar>() / d.len() as Scalar
        };
        // Reflect padding keeps the kernel mass 1, so the mean moves only
        // through boundary reuse; variance must drop substantially.
        assert!((mean(&out.data) - mean(&img.data)).abs() < 0.02);
        assert!(var(&out.data) < 0.4 * var(&img.data));
        let same = gaussian_blur(&img, 0.0).unwrap();
        assert_eq!(same.data, img.data);
    }

    #[test]
    fn noise_is_deterministic_and_scaled() {
        let img = Tensor::full(vec![1, 8, 8], 0.5);
        let mut a = img.clone();
        let mut b = img.clone();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        add_gaussian_noise(&mut a, 0.05, &mut r1);
        add_gaussian_noise(&mut b, 0.05, &mut r2);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().any(|&v| v != 0.5));
        let sd = {
            let m = a.data.iter().sum::<Scalar>() / 64.0;
            (a.data.iter().map(|v| (v - m) * (v - m)).sum::<Scalar>() / 64.0).sqrt()
        };
        assert!(sd > 0.02 && sd < 0.09, "sd = {sd}");
    }

    #[test]
    fn degrade_shapes_and_determinism() {
        let hr = synth_corpus(1, 16, 4).remove(0);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = degrade(&hr, 2, 0.8, 0.02, &mut r1).unwrap();
        let b = degrade(&hr, 2, 0.8, 0.02, &mut r2).unwrap();
        assert_eq!(a.shape, vec![3, 8, 8]);
        assert_eq!(a.data, b.data);
        assert!(degrade(&hr, 3, 0.8, 0.02, &mut r1).is_err());
    }

    #[test]
    fn dihedral_group_structure() {
        let img = Tensor::from_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // One counterclockwise rotation of [[1,2,3],[4,5,6]].
        let r = dihedral(&img, 1).unwrap();
        assert_eq!(r.shape, vec![1, 3, 2]);
        assert_eq!(r.data, vec![3.0, 6.0, 2.0, 5.0, 1.0, 4.0]);

        for k in 0..8u8 {
            let once = dihedral(&img, k).unwrap();
            let back = dihedral(&once, dihedral_inverse(k)).unwrap();
            assert_eq!(back.shape, img.shape, "k = {k}");
            assert_eq!(back.data, img.data, "k = {k}");
        }
        // All eight images of an asymmetric input are distinct.
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..8u8 {
            let t = dihedral(&img, k).unwrap();
            let key: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert((t.shape.clone(), key)), "k = {k} repeats");
        }
        assert!(dihedral(&img, 8).is_err());
    }

    #[test]
    fn aligned_crop_offsets_track_scale() {
        let hr = synth_corpus(1, 16, 7).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lr = degrade(&hr, 2, 0.6, 0.0, &mut rng).unwrap();
        let (lc, hc) = random_aligned_crop(&lr, &hr, 2, 4, &mut rng).unwrap();
        assert_eq!(lc.shape, vec![3, 4, 4]);
        assert_eq!(hc.shape, vec![3, 8, 8]);
        // Locate the LR crop offset and confirm the HR crop sits at twice it.
        let mut found = None;
        'outer: for y0 in 0..=4 {
            for x0 in 0..=4 {
                let matches = (0..4).all(|y| {
                    (0..4).all(|x| lc.data[y * 4 + x] == lr.data[(y0 + y) * 8 + x0 + x])
                });
                if matches {
                    found = Some((y0, x0));
                    break 'outer;
                }
            }
        }
        let (y0, x0) = found.expect("LR crop must come from the LR image");
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(
                    hc.data[y * 8 + x],
                    hr.data[(2 * y0 + y) * 16 + 2 * x0 + x]
                );
            }
        }
        assert!(random_aligned_crop(&lr, &hr, 2, 30, &mut rng).is_err());
    }

    #[test]
    fn corpus_is_deterministic_with_wide_variance_span() {
        let a = synth_corpus(12, 32, 11);
        let b = synth_corpus(12, 32, 11);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data, y.data);
        }
        let c = synth_corpus(12, 32, 12);
        assert!(a.iter().zip(&c).any(|(x, y)| x.data != y.data));

        let mut vars: Vec<Scalar> = Vec::new();
        for img in &a {
            let y = rgb_to_y(img).unwrap();
            for gy in 0..8 {
                for gx in 0..8 {
                    let mut patch = Vec::with_capacity(16);
                    for dy in 0..4 {
                        for dx in 0..4 {
                            patch.push(y[(gy * 4 + dy) * 32 + gx * 4 + dx]);
                        }
                    }
                    let m = patch.iter().sum::<Scalar>() / 16.0;
                    vars.push(
                        patch.iter().map(|v| (v - m) * (v - m)).sum::<Scalar>() / 16.0,
                    );
                }
            }
        }
        let max = vars.iter().cloned().fold(0.0, Scalar::max);
        let min_pos = vars
            .iter()
            .cloned()
            .filter(|v| *v > 0.0)
            .fold(Scalar::INFINITY, Scalar::min);
        assert!(
            max / min_pos >= 1000.0,
            "span {max} / {min_pos} = {}",
            max / min_pos
        );
        assert!(a.iter().all(|t| t.data.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn sr_pairs_are_aligned_and_reproducible() {
        let corpus = synth_corpus(3, 16, 13);
        let p1 = make_sr_pairs(&corpus, 2, 0.7, 0.01, 21).unwrap();
        let p2 = make_sr_pairs(&corpus, 2, 0.7, 0.01, 21).unwrap();
        assert_eq!(p1.len(), 3);
        for ((l1, h1), (l2, h2)) in p1.iter().zip(&p2) {
            assert_eq!(l1.shape, vec![3, 8, 8]);
            assert_eq!(h1.shape, vec![3, 16, 16]);
            assert_eq!(l1.data, l2.data);
            assert_eq!(h1.data, h2.data);
        }
    }
}
