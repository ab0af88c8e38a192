//! Training: pixel + frequency loss, Adam with milestone halving, and a
//! deterministic loop whose outputs depend only on the seed, the data, and
//! the configs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ensure_init, model_forward, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Scalar,
    pub lambda_pixel: Scalar,
    pub lambda_freq: Scalar,
    /// Fractions of total steps at which the learning rate halves.
    pub milestones: Vec<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 2e-4,
            lambda_pixel: 1.0,
            lambda_freq: 0.05,
            milestones: vec![0.5, 0.75, 0.9],
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.lr > 0.0
            && self.lambda_pixel >= 0.0
            && self.lambda_freq >= 0.0
            && self.log_every >= 1
            && self.milestones.iter().all(|m| (0.0..=1.0).contains(m));
        if !ok {
            return Err(Error::Config(format!("invalid train config: {self:?}")));
        }
        Ok(())
    }

    /// Learning rate at a 0-based step index: the base rate halved once per
    /// milestone already reached.
    pub fn lr_at(&self, step: usize) -> Scalar {
        let halvings = self
            .milestones
            .iter()
            .filter(|&&m| (m * self.steps as f64).floor() as usize <= step)
            .count();
        self.lr * (0.5 as Scalar).powi(halvings as i32)
    }
}

/// Mean absolute pixel error plus the mean absolute real/imaginary spectrum
/// error of the residual, averaged over channels:
/// lambda_p * mean|O - G| + lambda_f * mean_c mean_uv(|Re D_c| + |Im D_c|)
/// where D_c is the 2D DFT of channel c of O - G.
pub fn restoration_loss(
    tape: &mut Tape,
    out: TensorRef,
    gt: TensorRef,
    lambda_pixel: Scalar,
    lambda_freq: Scalar,
) -> Result<TensorRef> {
    let shape = tape.shape(out).to_vec();
    if shape.len() != 3 || tape.shape(gt) != shape.as_slice() {
        return Err(Error::Shape(format!(
            "loss: output {:?} and target {:?} must be matching [C, H, W]",
            shape,
            tape.shape(gt)
        )));
    }
    let diff = tape.sub(out, gt)?;
    let l1 = {
        let a = tape.abs(diff)?;
        tape.mean_all(a)?
    };
    let c = shape[0];
    let mut freq_sum: Option<TensorRef> = None;
    for ch in 0..c {
        let d = tape.slice_outer(diff, ch)?;
        let (re, im) = tape.fft2(d)?;
        let ra = tape.abs(re)?;
        let ia = tape.abs(im)?;
        let s = tape.add(ra, ia)?;
        let m = tape.mean_all(s)?;
        freq_sum = Some(match freq_sum {
            None => m,
            Some(p) => tape.add(p, m)?,
        });
    }
    let freq = tape.scale(freq_sum.expect("c >= 1"), 1.0 / c as Scalar)?;
    let lp = tape.scale(l1, lambda_pixel)?;
    let lf = tape.scale(freq, lambda_freq)?;
    tape.add(lp, lf)
}

/// Adam with decoupled first/second moment state per parameter name.
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct Adam {
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    t: u64,
    m: BTreeMap<String, Vec<Scalar>>,
    v: BTreeMap<String, Vec<Scalar>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients stored on the parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: Scalar) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let t = store
                .get_mut(&name)
                .expect("name came from the store");
            let g = t
                .grad
                .take()
                .ok_or_else(|| Error::Config(format!("parameter `{name}` has no gradient")))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam" });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: Scalar,
    pub lr: Scalar,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = String::from("step,loss,lr\n");
        for s in &self.steps {
            buf.push_str(&format!("{},{},{}\n", s.step, s.loss, s.lr));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic loop over (input, target) pairs: per-epoch shuffle seeded
/// from the config, per-sample forward/backward, batch-averaged gradients,
/// Adam with milestone halving. Identical inputs give bit-identical
/// parameters.
pub fn train_loop(
    store: &mut ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &[(Tensor, Tensor)],
) -> Result<TrainReport> {
    mcfg.validate()?;
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("train_loop: empty dataset".into()));
    }
    for (i, (lr_img, hr_img)) in data.iter().enumerate() {
        let ok = lr_img.shape.len() == 3
            && lr_img.shape[0] == 3
            && hr_img.shape
                == vec![3, lr_img.shape[1] * mcfg.scale, lr_img.shape[2] * mcfg.scale];
        if !ok {
            return Err(Error::Data(format!(
                "train_loop: pair {i} has input {:?} and target {:?}, incompatible with scale {}",
                lr_img.shape, hr_img.shape, mcfg.scale
            )));
        }
    }
    ensure_init(store, mcfg)?;

    let mut report = TrainReport::default();
    let mut opt = Adam::new();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;

    for step in 0..tcfg.steps {
        let mut accum: BTreeMap<String, Vec<Scalar>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..tcfg.batch_size {
            if cursor >= order.len() {
                order = (0..data.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(epoch));
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            let (lr_img, hr_img) = &data[order[cursor]];
            cursor += 1;

            let mut ctx = Ctx::new(store, true);
            let input = ctx.tape.leaf(lr_img)?;
            let target = ctx.tape.leaf(hr_img)?;
            let out = model_forward(&mut ctx, mcfg, input)?;
            let loss = restoration_loss(
                &mut ctx.tape,
                out,
                target,
                tcfg.lambda_pixel,
                tcfg.lambda_freq,
            )?;
            batch_loss += ctx.tape.value(loss)[0];
            let tape = std::mem::replace(&mut ctx.tape, Tape::new());
            let grads = tape.backward(loss)?;
            ctx.harvest(&grads)?;
            for name in store.names().map(String::from).collect::<Vec<_>>() {
                let g = store
                    .get(&name)
                    .and_then(|t| t.grad.clone())
                    .ok_or_else(|| {
                        Error::Config(format!("parameter `{name}` missing from the graph"))
                    })?;
                let acc = accum.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
        }
        let scale = 1.0 / tcfg.batch_size as Scalar;
        for (name, acc) in &accum {
            let t = store.get_mut(name).expect("accumulated name exists");
            t.grad = Some(acc.iter().map(|a| a * scale).collect());
        }
        let lr_now = tcfg.lr_at(step);
        opt.step(store, lr_now)?;
        report.steps.push(StepLog {
            step,
            loss: batch_loss * scale,
            lr: lr_now,
        });
        if step % tcfg.log_every == 0 {
            log::info!(
                "step {step}: loss {:.6e}, lr {:.3e}",
                batch_loss * scale,
                lr_now
            );
        }
    }
    Ok(report)
}
