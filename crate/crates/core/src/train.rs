//! Objective, learning-rate schedule, optimizer and the training loop.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor, Var};
use crate::backbone::Model;
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::Config;
use crate::data::SamplePair;
use crate::embedder::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamStore;
use crate::pipeline::conditioning;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub crop: usize,
    pub iterations: usize,
    pub seed: u64,
    pub flips: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Steps between loss-log lines.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 2e-4,
            lr_final: 1e-6,
            beta1: 0.9,
            beta2: 0.9999,
            weight_decay: 1e-4,
            adam_eps: 1e-8,
            batch: 4,
            crop: 256,
            iterations: 800_000,
            seed: 0,
            flips: true,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return bad("train.lr_final must be positive and at most train.lr_init");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("train.weight_decay must be non-negative and train.adam_eps positive");
        }
        if self.batch == 0 || self.iterations == 0 || self.log_every == 0 {
            return bad("train.batch, train.iterations and train.log_every must be positive");
        }
        if self.crop == 0 || self.crop % crate::backbone::DOWNSCALE != 0 {
            return bad("train.crop must be a positive multiple of 8");
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at `step` in `0..iterations`.
    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(self.lr_init, self.lr_final, step, self.iterations)
    }
}

/// `lr_final + (lr_init - lr_final) (1 + cos(pi t / (T - 1))) / 2`, reaching
/// `lr_final` at the last step `T - 1`.
pub fn cosine_lr(lr_init: f64, lr_final: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr_init;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    // Written as a convex combination so both endpoints are exact.
    let w = (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    lr_init * w + lr_final * (1.0 - w)
}

/// Mean absolute error of both passes against the target, equally weighted.
pub fn loss_total<T: Scalar>(first: &Var<T>, second: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    for v in [first, second] {
        if v.shape() != target.shape() {
            return Err(Error::ShapeMismatch(v.shape().to_vec(), target.shape().to_vec()));
        }
    }
    Ok(first.l1_loss(target).add(&second.l1_loss(target)))
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                w[j] = w[j] * decay - step_size * m[j] / (v[j].sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Where training writes its artifacts. `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.tsv";
pub const DIVERGED_DUMP: &str = "diverged.ckpt";

/// Random crop of side `crop` (or the largest multiple of 8 that fits) with
/// optional random flips, applied identically to both images.
pub fn augment(pair: &SamplePair, crop: usize, flips: bool, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let m = crate::backbone::DOWNSCALE;
    let ch = crop.min(pair.lq.height() / m * m).max(m);
    let cw = crop.min(pair.lq.width() / m * m).max(m);
    let y0 = rng.random_range(0..=pair.lq.height().saturating_sub(ch));
    let x0 = rng.random_range(0..=pair.lq.width().saturating_sub(cw));
    let mut lq = pair.lq.crop(y0, x0, ch, cw);
    let mut hq = pair.hq.crop(y0, x0, ch, cw);
    if flips {
        if rng.random_bool(0.5) {
            lq = lq.flip_horizontal();
            hq = hq.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            lq = lq.flip_vertical();
            hq = hq.flip_vertical();
        }
    }
    (lq, hq)
}

/// Trains a freshly initialized model on `data`. Calls `on_step` after every
/// logged step. With an output directory, writes the loss log, periodic and
/// final checkpoints, and a state dump if the loss becomes non-finite.
pub fn train(
    cfg: &Config,
    data: &[SamplePair],
    embedder: &Embedder,
    out: &TrainOutput,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(Model<f32>, Vec<StepLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tc = &cfg.train;
    let mut model = Model::<f32>::new(cfg)?;
    let mut opt = AdamW::new(tc, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = Vec::new();
    let mut cache: HashMap<String, Embedding> = HashMap::new();
    let mut log = Vec::new();
    let mut log_file = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join(LOSS_LOG))?;
            writeln!(f, "step\tlr\tloss")?;
            Some(f)
        }
        None => None,
    };

    for step in 0..tc.iterations {
        let mut batch = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            batch.push((idx, augment(&data[idx], tc.crop, tc.flips, &mut rng)));
        }
        // Crops of one batch share a size only when every image is large enough.
        let (h0, w0) = (batch[0].1 .0.height(), batch[0].1 .0.width());
        if batch.iter().any(|(_, (lq, _))| (lq.height(), lq.width()) != (h0, w0)) {
            return Err(Error::DimensionMismatch("training images are smaller than the crop and differ in size".into()));
        }
        let lqs: Vec<&Image> = batch.iter().map(|(_, (lq, _))| lq).collect();
        let hqs: Vec<&Image> = batch.iter().map(|(_, (_, hq))| hq).collect();
        let metas: Vec<_> = batch.iter().map(|(i, _)| Some(&data[*i].meta)).collect();
        let cond = conditioning::<f32>(embedder, &lqs, &metas, &mut cache)?;
        let x = Var::constant(Image::batch_tensor::<f32>(&lqs)?);
        let target = Var::constant(Image::batch_tensor::<f32>(&hqs)?);

        let p = model.params.bind(true);
        let result = model.forward_cyclic(&p, &x, &cond, embedder).and_then(|o| loss_total(&o.first, &o.second, &target));
        let loss = match result {
            Ok(l) if l.value().data()[0].is_finite() => l,
            Ok(l) => return Err(diverged(&model, step, l.value().data()[0] as f64, out)),
            Err(Error::NonFinite(_)) => return Err(diverged(&model, step, f64::NAN, out)),
            Err(e) => return Err(e),
        };
        let loss_value = loss.value().data()[0] as f64;
        let grads = p.gradients(&loss.backward());
        drop(p);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(diverged(&model, step, loss_value, out));
        }
        let lr = tc.lr_at(step);
        opt.update(&mut model.params, &grads, lr);

        let entry = StepLog { step, lr, loss: loss_value };
        log.push(entry);
        if step % tc.log_every == 0 || step + 1 == tc.iterations {
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{step}\t{lr:e}\t{loss_value}")?;
            }
            on_step(&entry);
        }
        if let Some(dir) = &out.dir {
            if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.iterations {
                checkpoint::save(&dir.join(format!("step_{:06}.ckpt", step + 1)), &model, CheckpointMeta { step: step + 1 })?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), &model, CheckpointMeta { step: tc.iterations })?;
    }
    Ok((model, log))
}

fn diverged(model: &Model<f32>, step: usize, loss: f64, out: &TrainOutput) -> Error {
    let dump = out.dir.as_ref().map(|d| d.join(DIVERGED_DUMP));
    let dump = dump.filter(|p| checkpoint::save(p, model, CheckpointMeta { step }).is_ok());
    log::error!("non-finite loss at step {step}");
    Error::Diverged { step, loss, dump }
}

/// Reads a loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("{}:{}: bad number {s:?}", path.display(), i + 1)));
        if f.len() != 3 {
            return Err(Error::Config(format!("{}:{}: expected 3 fields", path.display(), i + 1)));
        }
        out.push(StepLog { step: parse(f[0])? as usize, lr: parse(f[1])?, loss: parse(f[2])? });
    }
    Ok(out)
}
