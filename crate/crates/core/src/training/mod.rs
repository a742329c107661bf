//! Alternating discriminator / generator training with cycle consistency.
//!
//! One step is a D update on detached fakes followed by a joint G+F update
//! through the freshly updated D. Both directions of the cycle are used:
//! `F(G(a, b_y)) ≈ a` and `G(F(b_y), G(a, b_y)) ≈ b_y`. Intermediate images
//! reuse the landmarks of the sample they were made from.

mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Var};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::losses::{
    cls_loss, cycle_loss, landmark_loss, lsgan_d_loss, lsgan_g_loss, tv_loss, weighted_sum, LossTerms, LossWeights,
};
use crate::networks::{build_networks, NetConfig, Networks, Variant};
use crate::synthdata::{hflip_augment, Sample};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub alpha: f64,
    pub width: usize,
    pub flow_gain: f64,
    /// Per-module cap on the gradient norm before each Adam step; 0 disables.
    pub grad_clip: f64,
    pub variant: Variant,
    pub hflip: bool,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            batch_size: 8,
            learning_rate: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            total_steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
            alpha: 1.0,
            width: 8,
            flow_gain: 8.0,
            grad_clip: 10.0,
            variant: Variant::Full,
            hflip: true,
            eval_interval: 0,
            checkpoint_interval: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            width: self.width,
            image_size: self.image_size,
            channels: 3,
            alpha: self.alpha,
            flow_gain: self.flow_gain,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip {} must be ≥ 0", self.grad_clip)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// Rejects a checkpoint whose architecture differs from this config.
    pub fn check_compatible(&self, ckpt: &TrainConfig) -> Result<()> {
        let mut diffs = Vec::new();
        if ckpt.image_size != self.image_size {
            diffs.push(format!("image size {} (run wants {})", ckpt.image_size, self.image_size));
        }
        if ckpt.width != self.width {
            diffs.push(format!("width {} (run wants {})", ckpt.width, self.width));
        }
        if ckpt.variant != self.variant {
            diffs.push(format!("variant {} (run wants {})", ckpt.variant.name(), self.variant.name()));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(format!("checkpoint was built with {}", diffs.join(", "))))
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub nets: Networks<f32>,
    pub opt_g: Adam<f32>,
    pub opt_f: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Drives augmentation coin flips.
    pub rng: ChaCha8Rng,
    /// Exponential moving averages (factor 0.98) of the logged terms.
    pub averages: LossTerms,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut nets = build_networks::<f32>(&config.net_config())?;
        nets.transfer.variant = config.variant;
        let adam = config.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainState {
            opt_g: Adam::new(adam, &nets.transfer.params),
            opt_f: Adam::new(adam, &nets.removal.params),
            opt_d: Adam::new(adam, &nets.disc.params),
            config,
            step: 0,
            nets,
            rng,
            averages: LossTerms::default(),
        })
    }
}

/// A stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub landmarks: Vec<LandmarkSet>,
    /// Dataset indices, for diagnostics.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], indices: Vec<usize>) -> Result<Self> {
        let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            landmarks: samples.iter().map(|s| s.landmarks.clone()).collect(),
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub terms: LossTerms,
    /// Discriminator-side adversarial loss.
    pub d_adv: f64,
    /// `full_objective(terms, weights)`.
    pub full: f64,
    pub flow_linf: f64,
    /// Gradient norms of G, F and D before clipping.
    pub grad_norms: [f64; 3],
    pub wall_secs: f64,
}

/// Training log columns (format version 1), tab separated.
pub const LOG_COLUMNS: [&str; 15] = [
    "step", "adv_g", "adv_f", "cls_r", "cls_f", "rec", "lm", "tv", "d_adv", "full", "flow_linf", "gnorm_g", "gnorm_f",
    "gnorm_d", "wall_secs",
];

impl StepLog {
    pub fn tsv_header() -> String {
        LOG_COLUMNS.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(self.terms.as_array().iter().map(|v| format!("{v:.9e}")));
        cols.push(format!("{:.9e}", self.d_adv));
        cols.push(format!("{:.9e}", self.full));
        cols.push(format!("{:.9e}", self.flow_linf));
        cols.extend(self.grad_norms.iter().map(|v| format!("{v:.6e}")));
        cols.push(format!("{:.3}", self.wall_secs));
        cols.join("\t")
    }
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn non_finite(what: impl Into<String>, step: u64, a: &Batch, b: &Batch) -> Error {
    Error::NonFinite {
        what: format!("{} (batch A {:?}, batch B {:?})", what.into(), a.indices, b.indices),
        step,
    }
}

/// One D update followed by one joint G/F update.
pub fn train_step(state: &mut TrainState, batch_a: &Batch, batch_b: &Batch) -> Result<StepLog> {
    let step = state.step + 1;
    let w = state.config.weights;
    let n = batch_a.len();
    if batch_b.len() != n {
        return Err(Error::Dimension {
            op: "train_step",
            axis: "batch",
            expected: n,
            got: batch_b.len(),
        });
    }
    let retag = |e: Error| match e {
        Error::NonFinite { what, .. } => non_finite(what, step, batch_a, batch_b),
        other => other,
    };
    let nets = &mut state.nets;

    // discriminator update on detached fakes
    let clip = state.config.grad_clip;
    let (d_adv, cls_r, norm_d) = {
        let mut g = Graph::<f32>::new();
        let gp = nets.transfer.params.bind(&mut g, false);
        let fp = nets.removal.params.bind(&mut g, false);
        let dp = nets.disc.params.bind(&mut g, true);
        let a = g.input(batch_a.images.clone());
        let b_y = g.input(batch_b.images.clone());
        let a_y = nets.transfer.forward(&mut g, &gp, a, b_y).map_err(retag)?.output;
        let b = nets.removal.forward(&mut g, &fp, b_y).map_err(retag)?;
        let all = g.concat_batch(&[a, b_y, a_y, b])?;
        let (scores, logits) = nets.disc.forward(&mut g, &dp, all)?;
        let part = |g: &mut Graph<f32>, v, k: usize| g.slice_batch(v, k * n, n);
        let (s_a, s_by, s_ay, s_b) = (
            part(&mut g, scores, 0)?,
            part(&mut g, scores, 1)?,
            part(&mut g, scores, 2)?,
            part(&mut g, scores, 3)?,
        );
        let (l_a, l_by) = (part(&mut g, logits, 0)?, part(&mut g, logits, 1)?);
        let d_g = lsgan_d_loss(&mut g, s_by, s_ay)?;
        let d_f = lsgan_d_loss(&mut g, s_a, s_b)?;
        let c0 = cls_loss(&mut g, l_a, 0);
        let c1 = cls_loss(&mut g, l_by, 1);
        let cls_r = g.add(c0, c1)?;
        let loss = weighted_sum(&mut g, &[(d_g, w.adv_g), (d_f, w.adv_f), (cls_r, w.cls_r)])?;
        let d_adv = scalar(&g, d_g) + scalar(&g, d_f);
        let cls_r = scalar(&g, cls_r);
        if !(d_adv.is_finite() && cls_r.is_finite()) {
            return Err(non_finite(format!("discriminator loss (adv {d_adv}, cls {cls_r})"), step, batch_a, batch_b));
        }
        if g.requires_grad(loss) {
            g.backward(loss)?;
        }
        nets.disc.params.collect_grads(&mut g, &dp);
        let norm = nets.disc.params.clip_grad_norm(clip);
        state.opt_d.step(&mut nets.disc.params)?;
        (d_adv, cls_r, norm)
    };

    // transfer and removal update through the updated discriminator
    let mut g = Graph::<f32>::new();
    let gp = nets.transfer.params.bind(&mut g, true);
    let fp = nets.removal.params.bind(&mut g, true);
    let dp = nets.disc.params.bind(&mut g, false);
    let a = g.input(batch_a.images.clone());
    let b_y = g.input(batch_b.images.clone());
    let fwd = nets.transfer.forward(&mut g, &gp, a, b_y).map_err(retag)?;
    let b = nets.removal.forward(&mut g, &fp, b_y).map_err(retag)?;
    let a_rec = nets.removal.forward(&mut g, &fp, fwd.output).map_err(retag)?;
    let back = nets.transfer.forward(&mut g, &gp, b, fwd.output).map_err(retag)?;
    let fakes = g.concat_batch(&[fwd.output, b])?;
    let (scores, logits) = nets.disc.forward(&mut g, &dp, fakes)?;
    let s_ay = g.slice_batch(scores, 0, n)?;
    let s_b = g.slice_batch(scores, n, n)?;
    let l_ay = g.slice_batch(logits, 0, n)?;
    let l_b = g.slice_batch(logits, n, n)?;

    let adv_g = lsgan_g_loss(&mut g, s_ay);
    let adv_f = lsgan_g_loss(&mut g, s_b);
    let c1 = cls_loss(&mut g, l_ay, 1);
    let c0 = cls_loss(&mut g, l_b, 0);
    let cls_f = g.add(c1, c0)?;
    let r1 = cycle_loss(&mut g, a_rec, a)?;
    let r2 = cycle_loss(&mut g, back.output, b_y)?;
    let rec = g.add(r1, r2)?;
    let lm1 = landmark_loss(&mut g, fwd.flow, &batch_a.landmarks, &batch_b.landmarks)?;
    let lm2 = landmark_loss(&mut g, back.flow, &batch_b.landmarks, &batch_a.landmarks)?;
    let lm = g.add(lm1, lm2)?;
    let tv1 = tv_loss(&mut g, fwd.flow);
    let tv2 = tv_loss(&mut g, back.flow);
    let tv = g.add(tv1, tv2)?;
    let loss = weighted_sum(
        &mut g,
        &[
            (adv_g, w.adv_g),
            (adv_f, w.adv_f),
            (cls_f, w.cls_f),
            (rec, w.rec),
            (lm, w.lm),
            (tv, w.tv),
        ],
    )?;
    let terms = LossTerms {
        adv_g: scalar(&g, adv_g),
        adv_f: scalar(&g, adv_f),
        cls_r,
        cls_f: scalar(&g, cls_f),
        rec: scalar(&g, rec),
        lm: scalar(&g, lm),
        tv: scalar(&g, tv),
    };
    if let Some(k) = terms.as_array().iter().position(|v| !v.is_finite()) {
        return Err(non_finite(
            format!("loss term {} = {}", LossTerms::NAMES[k], terms.as_array()[k]),
            step,
            batch_a,
            batch_b,
        ));
    }
    let flow_linf = g.value(fwd.flow).max_abs().max(g.value(back.flow).max_abs()) as f64;
    if g.requires_grad(loss) {
        g.backward(loss)?;
    }
    nets.transfer.params.collect_grads(&mut g, &gp);
    nets.removal.params.collect_grads(&mut g, &fp);
    drop(g);
    let norm_g = nets.transfer.params.clip_grad_norm(clip);
    let norm_f = nets.removal.params.clip_grad_norm(clip);
    state.opt_g.step(&mut nets.transfer.params)?;
    state.opt_f.step(&mut nets.removal.params)?;

    state.step = step;
    state.averages = if step == 1 {
        terms
    } else {
        let (old, new) = (state.averages.as_array(), terms.as_array());
        let mix: Vec<f64> = old.iter().zip(new).map(|(o, v)| 0.98 * o + 0.02 * v).collect();
        LossTerms {
            adv_g: mix[0],
            adv_f: mix[1],
            cls_r: mix[2],
            cls_f: mix[3],
            rec: mix[4],
            lm: mix[5],
            tv: mix[6],
        }
    };
    Ok(StepLog {
        step,
        terms,
        d_adv,
        full: crate::losses::full_objective(&terms, &w),
        flow_linf,
        grad_norms: [norm_g, norm_f, norm_d],
        wall_secs: 0.0,
    })
}

/// Training split of both domains.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub a: &'a [Sample],
    pub b: &'a [Sample],
}

/// Dataset positions visited at `step` (1-based): epochs are independent
/// seeded permutations, so the schedule depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, label: u8, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|i| {
            let pos = (step - 1) * batch as u64 + i as u64;
            let (epoch, k) = (pos / n as u64, (pos % n as u64) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((label as u64 + 2) << 48) | epoch);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just filled").1[k]
        })
        .collect()
}

/// Draws the batches for the next step, flipping each sample with
/// probability 0.5 when augmentation is on.
pub fn next_batches(state: &mut TrainState, data: &TrainData<'_>) -> Result<(Batch, Batch)> {
    if data.a.is_empty() || data.b.is_empty() {
        return Err(Error::Config("training needs at least one sample per domain".into()));
    }
    let step = state.step + 1;
    let bs = state.config.batch_size;
    let mut make = |label: u8, pool: &[Sample]| {
        let idx = batch_indices(state.config.seed, label, step, bs, pool.len());
        let samples: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                if state.config.hflip && state.rng.gen_bool(0.5) {
                    hflip_augment(&pool[i])
                } else {
                    pool[i].clone()
                }
            })
            .collect();
        Batch::from_samples(&samples, idx)
    };
    Ok((make(0, data.a)?, make(1, data.b)?))
}

/// Callbacks of [`train_loop`]; all default to no-ops.
pub trait TrainHooks {
    fn on_step(&mut self, _state: &TrainState, _log: &StepLog) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
    /// Called with the offending batch before a numerical abort propagates.
    fn on_failure(&mut self, _state: &TrainState, _a: &Batch, _b: &Batch, _err: &Error) {}
}

pub struct NoHooks;
impl TrainHooks for NoHooks {}

/// Runs steps until `config.total_steps`, then checkpoints once more.
pub fn train_loop(state: &mut TrainState, data: &TrainData<'_>, hooks: &mut dyn TrainHooks) -> Result<()> {
    let start = Instant::now();
    let (ev, ck) = (state.config.eval_interval, state.config.checkpoint_interval);
    while state.step < state.config.total_steps {
        let (ba, bb) = next_batches(state, data)?;
        let mut log = match train_step(state, &ba, &bb) {
            Ok(log) => log,
            Err(e) => {
                if matches!(e, Error::NonFinite { .. }) {
                    hooks.on_failure(state, &ba, &bb, &e);
                }
                return Err(e);
            }
        };
        log.wall_secs = start.elapsed().as_secs_f64();
        hooks.on_step(state, &log)?;
        if ev > 0 && state.step.is_multiple_of(ev) {
            hooks.on_eval(state)?;
        }
        if ck > 0 && state.step.is_multiple_of(ck) && state.step < state.config.total_steps {
            hooks.on_checkpoint(state)?;
        }
    }
    hooks.on_checkpoint(state)
}

/// Writes `train_log.tsv` and `checkpoints/step_NNNNNNNN.ckpt` +
/// `checkpoints/latest.ckpt` under a run directory.
pub struct DirHooks {
    pub dir: PathBuf,
    log: Option<std::io::BufWriter<std::fs::File>>,
}

impl DirHooks {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        Ok(DirHooks {
            dir: dir.to_path_buf(),
            log: None,
        })
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.tsv")
    }

    pub fn latest_checkpoint(dir: &Path) -> PathBuf {
        dir.join("checkpoints").join("latest.ckpt")
    }

    fn log(&mut self) -> Result<&mut std::io::BufWriter<std::fs::File>> {
        if self.log.is_none() {
            let path = self.log_path();
            let fresh = !path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            if fresh {
                writeln!(w, "# geoflow-train-log v1\n{}", StepLog::tsv_header()).map_err(|e| Error::io(&path, e))?;
            }
            self.log = Some(w);
        }
        Ok(self.log.as_mut().expect("opened above"))
    }
}

impl TrainHooks for DirHooks {
    fn on_step(&mut self, _state: &TrainState, log: &StepLog) -> Result<()> {
        let path = self.log_path();
        let w = self.log()?;
        writeln!(w, "{}", log.tsv_row()).map_err(|e| Error::io(&path, e))
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            w.flush().map_err(|e| Error::io(self.dir.join("train_log.tsv"), e))?;
        }
        let ckdir = self.dir.join("checkpoints");
        save_checkpoint(&ckdir.join(format!("step_{:08}.ckpt", state.step)), state)?;
        save_checkpoint(&ckdir.join("latest.ckpt"), state)
    }

    fn on_failure(&mut self, state: &TrainState, a: &Batch, b: &Batch, err: &Error) {
        let dump = self.dir.join(format!("failure_step_{:08}", state.step + 1));
        if std::fs::create_dir_all(&dump).is_err() {
            return;
        }
        let _ = std::fs::write(dump.join("error.txt"), format!("{err}\n"));
        for (tag, batch) in [("a", a), ("b", b)] {
            for k in 0..batch.len() {
                let img = batch.images.batch_item(k);
                let _ = crate::io::write_png(&dump.join(format!("{tag}_{k}_idx{}.png", batch.indices[k])), &img);
            }
        }
    }
}

impl Drop for DirHooks {
    fn drop(&mut self) {
        if let Some(w) = self.log.as_mut() {
            let _ = w.flush();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn tiny() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            batch_size: 2,
            width: 2,
            total_steps: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_covers_each_epoch_once() {
        let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(3, 0, s, 2, 10)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = generate_dataset(0, 4, 16);
        let mut s = TrainState::new(tiny()).unwrap();
        for opt in [&mut s.opt_g, &mut s.opt_f, &mut s.opt_d] {
            opt.config.lr = 0.0;
        }
        let before = s.nets.clone();
        let data = TrainData { a: &d.a, b: &d.b };
        let (ba, bb) = next_batches(&mut s, &data).unwrap();
        let log = train_step(&mut s, &ba, &bb).unwrap();
        assert_eq!(s.nets, before);
        assert!(log.terms.as_array().iter().all(|v| v.is_finite()));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn logged_full_matches_weighted_terms() {
        let d = generate_dataset(0, 4, 16);
        let mut s = TrainState::new(tiny()).unwrap();
        let data = TrainData { a: &d.a, b: &d.b };
        let (ba, bb) = next_batches(&mut s, &data).unwrap();
        let log = train_step(&mut s, &ba, &bb).unwrap();
        let w = s.config.weights.as_array();
        let sum: f64 = log.terms.as_array().iter().zip(w).map(|(t, w)| t * w).sum();
        assert!((log.full - sum).abs() <= 1e-6 * sum.abs());
    }

    #[test]
    fn rejects_invalid_configs() {
        for bad in [
            TrainConfig { batch_size: 0, ..tiny() },
            TrainConfig { learning_rate: 0.0, ..tiny() },
            TrainConfig { image_size: 24, ..tiny() },
        ] {
            assert!(matches!(TrainState::new(bad), Err(Error::Config(_))));
        }
    }
}
