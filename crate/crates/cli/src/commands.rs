//! Subcommand bodies. Every artifact is written to a temp sibling and
//! renamed into place, so a failed run never leaves a truncated file.

use std::path::{Path, PathBuf};

use log::info;
use tamir_core::arch::{ensure_init, model_infer};
use tamir_core::checkpoint;
use tamir_core::data::{
    dihedral, make_sr_pairs, random_aligned_crop, read_png, resize_bicubic, write_png,
};
use tamir_core::flops::model_flops;
use tamir_core::metrics::{degradation_profile_corpus, psnr_y, spearman, ssim_y};
use tamir_core::params::ParamStore;
use tamir_core::tensor::{Scalar, Tensor};
use tamir_core::train::train_loop;
use tamir_core::{Error, Result};

use crate::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs `write` against a temp path next to `path`, then renames the result
/// into place. The temp file is removed on failure.
fn atomic_write(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(format!(".{}-", std::process::id()));
    tmp_name.push(name);
    let tmp = path.with_file_name(tmp_name);
    match write(&tmp).and_then(|()| std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))) {
        Ok(()) => Ok(()),
        Err(e) => {
            std::fs::remove_file(&tmp).ok();
            Err(e)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |tmp| {
        std::fs::write(tmp, text).map_err(|e| Error::io(tmp, e))
    })
}

/// PNG files directly under `dir`, sorted by file name for reproducibility.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

fn load_corpus(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, read_png(&p)?))
        })
        .collect()
}

fn clamp01(mut t: Tensor) -> Tensor {
    t.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

/// Bicubic round trip at the given factor, back to the original extents.
fn bicubic_round_trip(img: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w) = (img.shape[1], img.shape[2]);
    let lr = resize_bicubic(img, (h / scale).max(1), (w / scale).max(1))?;
    resize_bicubic(&lr, h, w)
}

/// Profiles how a bicubic round trip damages each variance group of the
/// corpus and writes the group table as CSV.
pub fn cmd_analyze(data: &Path, scale: usize, patch: usize, groups: usize, out: &Path) -> Result<()> {
    if scale == 0 {
        return Err(Error::Config("analyze: --scale must be >= 1".into()));
    }
    let corpus = load_corpus(data)?;
    let pairs: Vec<(Tensor, Tensor)> = corpus
        .iter()
        .map(|(_, hr)| Ok((hr.clone(), bicubic_round_trip(hr, scale)?)))
        .collect::<Result<_>>()?;
    let profile = degradation_profile_corpus(&pairs, patch, groups)?;

    let mut csv = String::from("group,mean_variance,mean_psnr,count\n");
    for (i, b) in profile.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", i, b.mean_variance, b.mean_psnr, b.count));
    }
    write_text(out, &csv)?;

    let n_patches: usize = profile.iter().map(|b| b.count).sum();
    if profile.len() >= 2 {
        let xs: Vec<Scalar> = (0..profile.len()).map(|i| i as Scalar).collect();
        let ys: Vec<Scalar> = profile.iter().map(|b| b.mean_psnr).collect();
        let rho = spearman(&xs, &ys)?;
        println!(
            "analyzed {} images, {} patches, {} groups: spearman rho {:.4}",
            pairs.len(),
            n_patches,
            profile.len(),
            rho
        );
    } else {
        println!(
            "analyzed {} images, {} patches, 1 group: mean PSNR {:.4} dB",
            pairs.len(),
            n_patches,
            profile[0].mean_psnr
        );
    }
    Ok(())
}

/// Degraded (input, target) pairs for every corpus image, plus aligned random
/// crops with dihedral augmentation when cropping is configured.
fn training_pairs(cfg: &RunConfig, corpus: &[(String, Tensor)]) -> Result<Vec<(Tensor, Tensor)>> {
    let images: Vec<Tensor> = corpus.iter().map(|(_, t)| t.clone()).collect();
    let pairs = make_sr_pairs(
        &images,
        cfg.model.scale,
        cfg.data.blur_sigma,
        cfg.data.noise_sigma,
        cfg.train.seed,
    )?;
    if cfg.data.crop == 0 {
        return Ok(pairs);
    }
    if cfg.data.crop % cfg.model.scale != 0 {
        return Err(Error::Config(format!(
            "data: crop {} is not divisible by scale {}",
            cfg.data.crop, cfg.model.scale
        )));
    }
    let crop_in = cfg.data.crop / cfg.model.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xC0FF_EE00);
    let mut out = Vec::with_capacity(pairs.len() * cfg.data.crops_per_image);
    for (lr, hr) in &pairs {
        for _ in 0..cfg.data.crops_per_image {
            let (lc, hc) = random_aligned_crop(lr, hr, cfg.model.scale, crop_in, &mut rng)?;
            let k = rng.gen_range(0..8u8);
            out.push((dihedral(&lc, k)?, dihedral(&hc, k)?));
        }
    }
    Ok(out)
}

/// Trains from a fresh initialization and writes the checkpoint and the
/// per-step loss log. Zero steps still writes the initialized checkpoint.
pub fn cmd_train(cfg: &RunConfig, data: &Path, ckpt: &Path, log: &Path) -> Result<()> {
    let corpus = load_corpus(data)?;
    let pairs = training_pairs(cfg, &corpus)?;
    info!("training on {} pairs from {} images", pairs.len(), corpus.len());

    let mut store = ParamStore::new(cfg.train.seed);
    let report = train_loop(&mut store, &cfg.model, &cfg.train, &pairs)?;
    atomic_write(ckpt, |tmp| checkpoint::save(&store, tmp))?;
    atomic_write(log, |tmp| report.write_csv(tmp))?;
    if let Some(last) = report.steps.last() {
        println!("trained {} steps, final loss {:.6e}", report.steps.len(), last.loss);
    } else {
        println!("trained 0 steps, wrote initialized checkpoint");
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new(0);
    ensure_init(&mut store, &cfg.model)?;
    checkpoint::load(&mut store, ckpt)?;
    Ok(store)
}

/// Degrades every reference image, restores it with the checkpointed model
/// (or plain bicubic with --baseline), and writes per-image and mean
/// Y-channel PSNR/SSIM rows.
pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    ckpt: Option<&Path>,
    baseline: bool,
    out: &Path,
) -> Result<()> {
    let corpus = load_corpus(data)?;
    let mut store = match (baseline, ckpt) {
        (true, _) => None,
        (false, Some(p)) => Some(load_model(cfg, p)?),
        (false, None) => {
            return Err(Error::Config("eval: pass --ckpt FILE or --baseline".into()));
        }
    };
    let images: Vec<Tensor> = corpus.iter().map(|(_, t)| t.clone()).collect();
    let pairs = make_sr_pairs(
        &images,
        cfg.model.scale,
        cfg.data.blur_sigma,
        cfg.data.noise_sigma,
        cfg.train.seed,
    )?;

    let border = cfg.model.scale;
    let mut csv = String::from("image,psnr,ssim\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for ((name, _), (lr, hr)) in corpus.iter().zip(&pairs) {
        let restored = match store.as_mut() {
            Some(s) => model_infer(s, &cfg.model, lr)?,
            None => clamp01(resize_bicubic(lr, hr.shape[1], hr.shape[2])?),
        };
        let p = psnr_y(&restored, hr, border)?;
        let s = ssim_y(&restored, hr, border)?;
        psnr_sum += p;
        ssim_sum += s;
        csv.push_str(&format!("{name},{p},{s}\n"));
    }
    let n = pairs.len() as Scalar;
    csv.push_str(&format!("mean,{},{}\n", psnr_sum / n, ssim_sum / n));
    write_text(out, &csv)?;
    println!(
        "evaluated {} images: mean PSNR {:.4} dB, mean SSIM {:.6}",
        pairs.len(),
        psnr_sum / n,
        ssim_sum / n
    );
    Ok(())
}

/// Restores already-degraded input PNGs and writes one output PNG per input
/// into `out_dir`, keeping file names.
pub fn cmd_infer(cfg: &RunConfig, inputs: &[PathBuf], ckpt: &Path, out_dir: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("infer: no input images given".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut store = load_model(cfg, ckpt)?;
    for input in inputs {
        let img = read_png(input)?;
        let restored = model_infer(&mut store, &cfg.model, &img)?;
        let name = input
            .file_name()
            .ok_or_else(|| Error::Data(format!("{}: not a file", input.display())))?;
        let out = out_dir.join(name);
        atomic_write(&out, |tmp| write_png(tmp, &restored))?;
        info!("wrote {}", out.display());
    }
    println!("restored {} images into {}", inputs.len(), out_dir.display());
    Ok(())
}

/// Sweeps the selection fraction over 0.2..=0.8 and writes one CSV row of
/// per-component FLOP counts per setting.
pub fn cmd_bench(cfg: &RunConfig, side: usize, out: &Path) -> Result<()> {
    let fractions = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
    let mut reports = Vec::new();
    for &p in &fractions {
        let mut mcfg = cfg.model.clone();
        mcfg.top_p = p;
        reports.push(model_flops(&mcfg, side, side)?);
    }
    let keys: Vec<&String> = reports[0].components.keys().collect();
    let mut csv = String::from("top_p");
    for k in &keys {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push_str(",total\n");
    for (p, r) in fractions.iter().zip(&reports) {
        csv.push_str(&format!("{p}"));
        for k in &keys {
            csv.push_str(&format!(",{}", r.get(k)));
        }
        csv.push_str(&format!(",{}\n", r.total()));
    }
    write_text(out, &csv)?;
    let lo = reports[0].get("block.scan");
    let hi = reports.last().unwrap().get("block.scan");
    println!(
        "swept {} settings at {side}x{side}: scan FLOPs {lo} -> {hi} ({:.4}x)",
        fractions.len(),
        hi as f64 / lo as f64
    );
    Ok(())
}
