//! Two-stage training: base pretraining on the target marginal, then
//! adaptation of a frozen base with independently sampled branch timesteps.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach, AdapterOptions, AdapterSet};
use crate::data::PairSpec;
use crate::denoiser::{BranchVar, JointDenoiser};
use crate::error::{Error, Result};
use crate::nn::{to_tokens, Ctx, Geometry, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{randn, substream, StreamRng};
use crate::scalar::Scalar;
use crate::schedule::{add_noise, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Adapt,
}

fn default_lr() -> f64 {
    1e-4
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "yes")]
    pub loss_y_enabled: bool,
    /// Falls back to the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub t_min_train: usize,
    /// Emit an intermediate checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub save_every: usize,
    #[serde(default)]
    pub adapter: AdapterOptions,
    /// Horizontal flip applied identically to both members of a pair.
    #[serde(default = "yes")]
    pub flip: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage, steps: usize, batch_size: usize) -> Self {
        Self {
            stage,
            steps,
            batch_size,
            lr: default_lr(),
            optimizer: AdamWConfig::default(),
            loss_y_enabled: true,
            seed: None,
            t_min_train: 1,
            save_every: 0,
            adapter: AdapterOptions::default(),
            flip: true,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.lr)));
        }
        if self.t_min_train == 0 {
            return Err(Error::Config("train.t_min_train must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent streams for the two timestep draws, the two noise draws and
/// augmentation.
pub struct TrainRngs {
    pub t_x: StreamRng,
    pub t_y: StreamRng,
    pub noise_x: StreamRng,
    pub noise_y: StreamRng,
    pub augment: StreamRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            t_x: substream(seed, "train.t_x"),
            t_y: substream(seed, "train.t_y"),
            noise_x: substream(seed, "noise.x"),
            noise_y: substream(seed, "noise.y"),
            augment: substream(seed, "train.augment"),
        }
    }
}

/// Independent uniform draws over `{t_min..=T}` for each branch.
pub fn sample_timesteps_disentangled<R: Rng + ?Sized>(
    batch_size: usize,
    schedule: &NoiseSchedule,
    t_min: usize,
    rng_x: &mut R,
    rng_y: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let t_max = schedule.max_timestep();
    if t_min == 0 || t_min > t_max {
        return Err(Error::Config(format!("t_min {t_min} outside 1..={t_max}")));
    }
    let tx = (0..batch_size).map(|_| rng_x.random_range(t_min..=t_max)).collect();
    let ty = (0..batch_size).map(|_| rng_y.random_range(t_min..=t_max)).collect();
    Ok((tx, ty))
}

/// Forward-noises each sample of `x0` at its own timestep.
pub fn noise_batch<F: Scalar>(
    x0: &Array4<F>,
    t: &[usize],
    eps: &Array4<F>,
    schedule: &NoiseSchedule,
) -> Result<Array4<F>> {
    if t.len() != x0.dim().0 || x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "noise_batch: {:?} samples, {} timesteps, eps {:?}",
            x0.dim(),
            t.len(),
            eps.dim()
        )));
    }
    let mut out = Array4::zeros(x0.dim());
    for (i, &ti) in t.iter().enumerate() {
        let z = add_noise(
            &x0.index_axis(Axis(0), i).to_owned(),
            ti,
            &eps.index_axis(Axis(0), i).to_owned(),
            schedule,
        )?;
        out.index_axis_mut(Axis(0), i).assign(&z);
    }
    Ok(out)
}

/// One noised branch of a training batch.
#[derive(Clone, Debug)]
pub struct NoisedBranch<F> {
    pub z: Array4<F>,
    pub t: Vec<usize>,
    pub eps: Array4<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_x: f64,
    pub loss_y: f64,
    pub loss_total: f64,
}

/// Per-element MSE of the noise prediction for branch 0, plus that of
/// branch 1 when present and `loss_y` is set. Returns the losses and, unless
/// `trainable` is `Nothing`, gradients of the total keyed by bound name
/// (`@<slot>/<tensor>` for adapter tensors).
pub fn denoising_loss<F: Scalar>(
    model: &JointDenoiser<F>,
    branches: &[NoisedBranch<F>],
    loss_y: bool,
    trainable: Trainable,
) -> Result<(LossReport, BTreeMap<String, Array2<F>>)> {
    let first = branches
        .first()
        .ok_or_else(|| Error::MissingInput("no branches".into()))?;
    let (n, _, h, w) = first.z.dim();
    let geo = Geometry::new(n, h, w);
    let mut cx = Ctx::new(trainable);
    let vars: Vec<BranchVar> = branches
        .iter()
        .map(|b| BranchVar {
            tokens: cx.graph.constant(to_tokens(b.z.view())),
            timesteps: &b.t,
        })
        .collect();
    let outs = model.forward(&mut cx, geo, &vars)?;
    let mut mse = Vec::new();
    for (b, &out) in branches.iter().zip(&outs).take(2) {
        let target = cx.graph.constant(to_tokens(b.eps.view()));
        let d = cx.graph.sub(out, target);
        let sq = cx.graph.mul(d, d);
        let sum = cx.graph.sum_all(sq);
        mse.push(cx.graph.scale(sum, F::one() / F::from_usize(b.eps.len()).unwrap()));
    }
    let total = if mse.len() > 1 && loss_y {
        cx.graph.add(mse[0], mse[1])
    } else {
        mse[0]
    };
    let value = |v| cx.graph.value(v)[[0, 0]].as_f64();
    let report = LossReport {
        loss_x: value(mse[0]),
        loss_y: mse.get(1).map(|&v| value(v)).unwrap_or(0.0),
        loss_total: value(total),
    };
    if !report.loss_total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", report.loss_total)));
    }
    let grads = if trainable == Trainable::Nothing {
        BTreeMap::new()
    } else {
        let mut g = cx.graph.backward(total);
        cx.param_grads(&mut g)
    };
    Ok((report, grads))
}

fn check_finite<F: Scalar>(grads: &BTreeMap<String, Array2<F>>) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
    }
    Ok(())
}

fn draw_noise<F: Scalar>(shape: (usize, usize, usize, usize), rng: &mut StreamRng) -> Array4<F> {
    randn(shape, rng)
}

/// One optimizer step on the base model with the standard objective.
pub fn pretrain_step<F: Scalar>(
    x: &Array4<F>,
    model: &mut JointDenoiser<F>,
    opt: &mut AdamW<F>,
    config: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<LossReport> {
    let n = x.dim().0;
    let (t, _) = sample_timesteps_disentangled(
        n,
        model.schedule(),
        config.t_min_train,
        &mut rngs.t_x,
        &mut rngs.t_y,
    )?;
    let eps = draw_noise(x.dim(), &mut rngs.noise_x);
    let z = noise_batch(x, &t, &eps, model.schedule())?;
    let (report, grads) = denoising_loss(model, &[NoisedBranch { z, t, eps }], false, Trainable::Base)?;
    check_finite(&grads)?;
    opt.begin_step();
    for (name, g) in &grads {
        let p = model
            .base_mut()
            .get_mut(name)
            .ok_or_else(|| Error::Numerical(format!("gradient for unknown parameter {name}")))?;
        opt.update(name, p, g);
    }
    Ok(report)
}

/// One optimizer step on the single attached adapter set; the base is
/// frozen.
pub fn adapt_training_step<F: Scalar>(
    x: &Array4<F>,
    y: &Array4<F>,
    model: &mut JointDenoiser<F>,
    opt: &mut AdamW<F>,
    config: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<LossReport> {
    if model.num_adapters() != 1 {
        return Err(Error::Adapter(format!(
            "adaptation needs exactly one attached adapter set, found {}",
            model.num_adapters()
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("pair batch {:?} vs {:?}", x.dim(), y.dim())));
    }
    let n = x.dim().0;
    let (tx, ty) = sample_timesteps_disentangled(
        n,
        model.schedule(),
        config.t_min_train,
        &mut rngs.t_x,
        &mut rngs.t_y,
    )?;
    let eps_x = draw_noise(x.dim(), &mut rngs.noise_x);
    let eps_y = draw_noise(y.dim(), &mut rngs.noise_y);
    let zx = noise_batch(x, &tx, &eps_x, model.schedule())?;
    let zy = noise_batch(y, &ty, &eps_y, model.schedule())?;
    let branches = [
        NoisedBranch { z: zx, t: tx, eps: eps_x },
        NoisedBranch { z: zy, t: ty, eps: eps_y },
    ];
    let (report, grads) = denoising_loss(model, &branches, config.loss_y_enabled, Trainable::Adapters)?;
    check_finite(&grads)?;
    opt.begin_step();
    let set = model.adapter_mut(0).expect("one adapter attached");
    for (name, g) in &grads {
        let tensor = name
            .strip_prefix("@0/")
            .and_then(|t| set.tensor_mut(t))
            .ok_or_else(|| Error::Numerical(format!("gradient for unknown tensor {name}")))?;
        opt.update(name, tensor, g);
    }
    Ok(report)
}

/// Reverses the width axis of the selected samples in place.
fn flip_samples<F: Scalar>(a: &mut Array4<F>, which: &[bool]) {
    for (i, &f) in which.iter().enumerate() {
        if f {
            let flipped = a.slice(s![i, .., .., ..;-1]).to_owned();
            a.slice_mut(s![i, .., .., ..]).assign(&flipped);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss_x: f64,
    pub loss_y: f64,
    pub loss_total: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "step,loss_x,loss_y,loss_total,wall_ms")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{}",
            r.step, r.loss_x, r.loss_y, r.loss_total, r.wall_ms
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map(|r| r.loss_total).unwrap_or(f64::NAN)
    }

    /// Median total loss over the rows whose step lies in `[lo, hi)` as
    /// fractions of the run length.
    pub fn median_loss(&self, lo: f64, hi: f64) -> f64 {
        let n = self.rows.len() as f64;
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (r.step as f64) >= lo * n && (r.step as f64) < hi * n)
            .map(|r| r.loss_total)
            .collect();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            k if k % 2 == 1 => v[k / 2],
            k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
        }
    }
}

/// Runs `config.steps` steps over an endless stream from `data`. For the
/// adaptation stage a fresh adapter set is attached when none is present.
/// `on_save(step, model)` is called every `save_every` steps.
pub fn train<F: Scalar>(
    config: &TrainConfig,
    data: &PairSpec,
    model: &mut JointDenoiser<F>,
    on_save: &mut dyn FnMut(usize, &JointDenoiser<F>) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    data.validate()?;
    let (c, h, w) = data.dims();
    if c != model.config().channels_in {
        return Err(Error::Shape(format!(
            "data has {c} channels, model expects {}",
            model.config().channels_in
        )));
    }
    let seed = config.seed();
    if config.stage == Stage::Adapt && model.num_adapters() == 0 {
        let opts = AdapterOptions {
            y_lora: config.adapter.y_lora && !data.condition_is_natural(),
            ..config.adapter.clone()
        };
        let set = AdapterSet::new(model, &opts, &mut substream(seed, "init.adapter"))?;
        attach(model, set)?;
    }
    let mut rngs = TrainRngs::new(seed);
    let mut opt = AdamW::new(config.lr, config.optimizer.clone());
    let start = Instant::now();
    let mut rows = Vec::with_capacity(config.steps);
    let flip = config.flip && h > 1 && w > 1;
    for step in 0..config.steps {
        let (mut x, mut y) = data.batch::<F>((step * config.batch_size) as u64, config.batch_size);
        if flip {
            let which: Vec<bool> = (0..config.batch_size)
                .map(|_| rngs.augment.random_bool(0.5))
                .collect();
            flip_samples(&mut x, &which);
            flip_samples(&mut y, &which);
        }
        let report = match config.stage {
            Stage::Pretrain => pretrain_step(&x, model, &mut opt, config, &mut rngs),
            Stage::Adapt => adapt_training_step(&x, &y, model, &mut opt, config, &mut rngs),
        }
        .map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            other => other,
        })?;
        rows.push(MetricRow {
            step,
            loss_x: report.loss_x,
            loss_y: report.loss_y,
            loss_total: report.loss_total,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.5}", report.loss_total);
        }
        if config.save_every > 0 && (step + 1) % config.save_every == 0 && step + 1 < config.steps {
            on_save(step + 1, model)?;
        }
    }
    Ok(TrainReport { rows })
}
