//! Sampling plans: per-branch timestep schedules plus replacement, guidance,
//! combination and condition-guidance directives, and the engine that runs
//! them.
//!
//! Plan steps are stored in level units `0..=S`; level `l` maps to timestep
//! `round(l·T/S)`.

use std::str::FromStr;

use ndarray::{s, Array2, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::denoiser::{
    joint_cross_attention, BranchVar, JointAttnModule, JointDenoiser, JointOverrides,
};
use crate::adapters::LoraAdapter;
use crate::error::{shape_err, Error, Result};
use crate::nn::{from_tokens, to_tokens, Ctx, Geometry};
use crate::rng::{normal, StreamRng};
use crate::scalar::Scalar;
use crate::schedule::{add_noise, predict_x0, reverse_step, NoiseSchedule};

/// Anything that predicts noise for a set of branches on a graph.
pub trait EpsModel<F: Scalar> {
    fn schedule(&self) -> &NoiseSchedule;

    fn eps(
        &self,
        cx: &mut Ctx<F>,
        geo: Geometry,
        branches: &[BranchVar],
        overrides: &JointOverrides,
    ) -> Result<Vec<Var>>;
}

impl<F: Scalar> EpsModel<F> for JointDenoiser<F> {
    fn schedule(&self) -> &NoiseSchedule {
        JointDenoiser::schedule(self)
    }

    fn eps(
        &self,
        cx: &mut Ctx<F>,
        geo: Geometry,
        branches: &[BranchVar],
        overrides: &JointOverrides,
    ) -> Result<Vec<Var>> {
        self.forward_with(cx, geo, branches, overrides)
    }
}

/// `ε̂_b = c·z_b + coupling·Σ_{b'≠b} z_b'`. A closed-form stand-in for the
/// network when checking guidance algebra.
#[derive(Clone, Debug)]
pub struct LinearSurrogate {
    pub schedule: NoiseSchedule,
    pub c: f64,
    pub coupling: f64,
}

impl<F: Scalar> EpsModel<F> for LinearSurrogate {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn eps(
        &self,
        cx: &mut Ctx<F>,
        _geo: Geometry,
        branches: &[BranchVar],
        _overrides: &JointOverrides,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(branches.len());
        for (b, br) in branches.iter().enumerate() {
            let mut e = cx.graph.scale(br.tokens, F::lit(self.c));
            for (o, other) in branches.iter().enumerate() {
                if o != b {
                    let k = cx.graph.scale(other.tokens, F::lit(self.coupling));
                    e = cx.graph.add(e, k);
                }
            }
            out.push(e);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Known part of an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    #[default]
    Nothing,
    All,
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Half {
        side: Side,
    },
}

impl Region {
    /// Binary mask with `1` on free pixels and `0` on known ones.
    pub fn mask<F: Scalar>(&self, h: usize, w: usize) -> Array2<F> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let known = match *self {
                Region::Nothing => false,
                Region::All => true,
                Region::Rect {
                    top,
                    left,
                    height,
                    width,
                } => y >= top && y < top + height && x >= left && x < left + width,
                Region::Half { side } => match side {
                    Side::Left => x < w / 2,
                    Side::Right => x >= w - w / 2,
                    Side::Top => y < h / 2,
                    Side::Bottom => y >= h - h / 2,
                },
            };
            if known {
                F::zero()
            } else {
                F::one()
            }
        })
    }

    pub fn is_nothing(&self) -> bool {
        *self == Region::Nothing
    }
}

/// [`Region::mask`] repeated over samples and channels.
pub fn broadcast_mask<F: Scalar>(region: &Region, dims: (usize, usize, usize, usize)) -> Array4<F> {
    let (n, c, h, w) = dims;
    let m = region.mask::<F>(h, w);
    m.broadcast((n, c, h, w)).expect("mask broadcast").to_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replacement {
    pub branch: Branch,
    pub known: Region,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// One step of size `w_r·ᾱ_t/2`.
    FixedW,
    /// Several optimizer steps of learning rate `lr`.
    Optimizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guidance {
    pub mode: GuidanceMode,
    #[serde(default)]
    pub w_r: f64,
    #[serde(default)]
    pub optimizer: Option<OptimizerSettings>,
    #[serde(default)]
    pub known_x: Region,
    #[serde(default)]
    pub known_y: Region,
    /// Also guide the very first step out of the initial state.
    #[serde(default = "yes")]
    pub from_first_step: bool,
    /// Approximate `∂ẑ_0/∂z_t` by `I/√ᾱ_t` instead of differentiating
    /// through the denoiser. Cheaper, and ignores cross-branch terms.
    #[serde(default)]
    pub identity_jacobian: bool,
    /// Take the update step with `ε̂` evaluated at the guided state rather
    /// than at the state before guidance. Costs one extra forward pass.
    #[serde(default = "yes")]
    pub refresh_eps: bool,
}

fn yes() -> bool {
    true
}

fn one_f() -> f64 {
    1.0
}

/// Reference guidance for the partial-conditioning preset.
pub const DEFAULT_GUIDANCE_LR: f64 = 0.02;
pub const DEFAULT_GUIDANCE_ITERATIONS: usize = 3;

impl Guidance {
    pub fn fixed(w_r: f64, known_x: Region, known_y: Region) -> Self {
        Self {
            mode: GuidanceMode::FixedW,
            w_r,
            optimizer: None,
            known_x,
            known_y,
            from_first_step: true,
            identity_jacobian: false,
            refresh_eps: true,
        }
    }

    pub fn optimizer(settings: OptimizerSettings, known_x: Region, known_y: Region) -> Self {
        Self {
            mode: GuidanceMode::Optimizer,
            w_r: 0.0,
            optimizer: Some(settings),
            known_x,
            known_y,
            from_first_step: true,
            identity_jacobian: false,
            refresh_eps: true,
        }
    }

    /// Adam-driven guidance with the reference settings.
    pub fn reference(known_y: Region) -> Self {
        Self::optimizer(
            OptimizerSettings {
                kind: OptimizerKind::Adam,
                lr: DEFAULT_GUIDANCE_LR,
                iterations: DEFAULT_GUIDANCE_ITERATIONS,
            },
            Region::Nothing,
            known_y,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    #[serde(default)]
    pub preset: Option<String>,
    /// `S`: level count of the schedule.
    pub levels: usize,
    /// `(x level, y level)` pairs from the start state to `(0, 0)`.
    pub steps: Vec<(usize, usize)>,
    #[serde(default = "one_f")]
    pub eta: f64,
    #[serde(default)]
    pub replacement: Option<Replacement>,
    #[serde(default)]
    pub guidance: Option<Guidance>,
    /// `(w_xc, w_cx)` per attached adapter set.
    #[serde(default)]
    pub combination: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub cond_guidance_k: Option<f64>,
    #[serde(default = "one_f")]
    pub joint_weight: f64,
}

impl SamplingPlan {
    fn from_steps(preset: &str, levels: usize, steps: Vec<(usize, usize)>, eta: f64) -> Self {
        Self {
            preset: Some(preset.to_string()),
            levels,
            steps,
            eta,
            replacement: None,
            guidance: None,
            combination: None,
            cond_guidance_k: None,
            joint_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("plan needs at least one level".into()));
        }
        if self.steps.last() != Some(&(0, 0)) {
            return Err(Error::Schedule("plan must end at (0, 0)".into()));
        }
        for (i, &(a, b)) in self.steps.iter().enumerate() {
            if a > self.levels || b > self.levels {
                return Err(Error::Schedule(format!(
                    "step {i} ({a}, {b}) exceeds {} levels",
                    self.levels
                )));
            }
            if i > 0 {
                let (pa, pb) = self.steps[i - 1];
                if a > pa || b > pb {
                    return Err(Error::Schedule(format!(
                        "step {i} increases a timestep: ({pa}, {pb}) -> ({a}, {b})"
                    )));
                }
                if (a, b) == (pa, pb) {
                    return Err(Error::Schedule(format!("step {i} repeats ({a}, {b})")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.joint_weight) {
            return Err(Error::Config(format!(
                "joint weight {} outside [0, 1]",
                self.joint_weight
            )));
        }
        if let Some(k) = self.cond_guidance_k {
            if !k.is_finite() {
                return Err(Error::Config("cond_guidance_k must be finite".into()));
            }
        }
        if let Some(g) = &self.guidance {
            match g.mode {
                GuidanceMode::FixedW if !(g.w_r.is_finite() && g.w_r >= 0.0) => {
                    return Err(Error::Config(format!("w_r {} must be finite and >= 0", g.w_r)));
                }
                GuidanceMode::Optimizer => {
                    let o = g
                        .optimizer
                        .as_ref()
                        .ok_or_else(|| Error::Config("optimizer guidance needs settings".into()))?;
                    if !(o.lr.is_finite() && o.lr >= 0.0) || o.iterations == 0 {
                        return Err(Error::Config("optimizer lr >= 0 and iterations >= 1".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Diffusion timestep of a level under a `T`-step schedule.
    pub fn timestep(&self, level: usize, t_max: usize) -> usize {
        (level * t_max + self.levels / 2) / self.levels
    }

    /// Model evaluations needed to run the plan (one per transition).
    pub fn evaluations(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    fn overrides(&self) -> JointOverrides {
        JointOverrides {
            joint_weight: Some(self.joint_weight),
            combination: self.combination.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `p(x, y)`
    Joint,
    /// `p(x | y_0)`
    XGivenY,
    /// `p(y | x_0)`
    YGivenX,
    /// `p(x | y_t)`: condition supplied at a noise level.
    Coarse,
    /// `p(x, y | y_0^m)`: condition known on a region.
    Partial,
    /// `p(y | x)` with a lightly noised, held `x` and deterministic updates.
    Estimation,
    /// Start `x` at `λS` and `y` at `(1−λ)S`.
    Interpolated,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown preset {s:?}")))
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Joint => "joint",
            Preset::XGivenY => "x_given_y",
            Preset::YGivenX => "y_given_x",
            Preset::Coarse => "coarse",
            Preset::Partial => "partial",
            Preset::Estimation => "estimation",
            Preset::Interpolated => "interpolated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresetParams {
    /// Coarse preset: starting level of `y` (default `S/2`).
    pub t_y_start: Option<usize>,
    /// Interpolated preset.
    pub lambda: f64,
    pub eta: Option<f64>,
    /// Partial preset: region of `y` that is supplied.
    pub known_y: Region,
    /// Partial preset: add reconstruction guidance on top of replacement.
    pub guided: bool,
    /// Partial preset: guidance settings (reference settings when absent).
    pub guidance: Option<Guidance>,
    /// Estimation preset: held level of `x` (default `round(0.1·S)`).
    pub estimation_level: Option<usize>,
    pub cond_guidance_k: Option<f64>,
    pub joint_weight: f64,
    pub combination: Option<Vec<(f64, f64)>>,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            t_y_start: None,
            lambda: 0.5,
            eta: None,
            known_y: Region::Half { side: Side::Left },
            guided: true,
            guidance: None,
            estimation_level: None,
            cond_guidance_k: None,
            joint_weight: 1.0,
            combination: None,
        }
    }
}

/// Steps `(min(i, a), min(i, b))` for `i = max(a, b) .. 0`: each branch holds
/// at its start level until the other catches up, then both descend.
fn hold_then_descend(a: usize, b: usize) -> Vec<(usize, usize)> {
    (0..=a.max(b)).rev().map(|i| (i.min(a), i.min(b))).collect()
}

pub fn build_plan(preset: Preset, s: usize, params: &PresetParams) -> Result<SamplingPlan> {
    if s == 0 {
        return Err(Error::Config("S must be at least 1".into()));
    }
    let eta = params.eta.unwrap_or(match preset {
        Preset::Estimation => 0.0,
        _ => 1.0,
    });
    let name = preset.name();
    let mut plan = match preset {
        Preset::Joint | Preset::Partial => {
            SamplingPlan::from_steps(name, s, (0..=s).rev().map(|i| (i, i)).collect(), eta)
        }
        Preset::XGivenY => SamplingPlan::from_steps(name, s, (0..=s).rev().map(|i| (i, 0)).collect(), eta),
        Preset::YGivenX => SamplingPlan::from_steps(name, s, (0..=s).rev().map(|i| (0, i)).collect(), eta),
        Preset::Coarse => {
            let ty = params.t_y_start.unwrap_or(s / 2);
            if ty > s {
                return Err(Error::Config(format!("t_y_start {ty} exceeds S = {s}")));
            }
            // y descends in proportion to x, rounded up: (S, ty), ..., (1, 1), (0, 0).
            let steps = (0..=s).rev().map(|i| (i, (i * ty).div_ceil(s))).collect();
            SamplingPlan::from_steps(name, s, steps, eta)
        }
        Preset::Estimation => {
            let hold = params
                .estimation_level
                .unwrap_or(((s as f64) * 0.1).round() as usize);
            if hold > s {
                return Err(Error::Config(format!("estimation level {hold} exceeds S = {s}")));
            }
            let mut steps: Vec<(usize, usize)> = (1..=s).rev().map(|i| (hold, i)).collect();
            steps.push((0, 0));
            SamplingPlan::from_steps(name, s, steps, eta)
        }
        Preset::Interpolated => {
            let mut p = build_interpolated_plan(s, params.lambda)?;
            p.eta = eta;
            p
        }
    };
    if preset == Preset::Partial {
        plan.replacement = Some(Replacement {
            branch: Branch::Y,
            known: params.known_y.clone(),
        });
        if params.guided {
            plan.guidance = Some(
                params
                    .guidance
                    .clone()
                    .unwrap_or_else(|| Guidance::reference(params.known_y.clone())),
            );
        }
    }
    plan.cond_guidance_k = params.cond_guidance_k;
    plan.joint_weight = params.joint_weight;
    plan.combination = params.combination.clone();
    plan.validate()?;
    Ok(plan)
}

/// `x` starts at level `round(λS)`, `y` at `S − round(λS)`; both then
/// descend to 0.
pub fn build_interpolated_plan(s: usize, lambda: f64) -> Result<SamplingPlan> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    if s == 0 {
        return Err(Error::Config("S must be at least 1".into()));
    }
    let lx = (lambda * s as f64).round() as usize;
    let ly = s - lx;
    Ok(SamplingPlan::from_steps(
        "interpolated",
        s,
        hold_then_descend(lx, ly),
        1.0,
    ))
}

/// A plan given either by preset name and parameters or as an explicit
/// document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanDocument {
    Preset(PresetRequest),
    Explicit(SamplingPlan),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRequest {
    pub preset: Preset,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(default)]
    pub params: PresetParams,
}

impl PlanDocument {
    pub fn resolve(&self) -> Result<SamplingPlan> {
        match self {
            PlanDocument::Preset(r) => build_plan(r.preset, r.s, &r.params),
            PlanDocument::Explicit(p) => {
                p.validate()?;
                Ok(p.clone())
            }
        }
    }
}

/// `(1−m)·add_noise(clean, t, eps) + m·z_t`, with `m = 1` on free pixels.
pub fn latent_replacement<F: Scalar>(
    z_t: &Array4<F>,
    clean: &Array4<F>,
    mask: &Array4<F>,
    t: usize,
    eps: &Array4<F>,
    schedule: &NoiseSchedule,
) -> Result<Array4<F>> {
    if z_t.dim() != clean.dim() || z_t.dim() != mask.dim() || z_t.dim() != eps.dim() {
        return shape_err(format!(
            "replacement shapes z {:?}, clean {:?}, mask {:?}, eps {:?}",
            z_t.dim(),
            clean.dim(),
            mask.dim(),
            eps.dim()
        ));
    }
    if mask.iter().any(|&m| m != F::zero() && m != F::one()) {
        return Err(Error::Config("mask must be binary".into()));
    }
    let noised = add_noise(clean, t, eps, schedule)?;
    let mut out = z_t.clone();
    Zip::from(&mut out)
        .and(&noised)
        .and(mask)
        .for_each(|o, &n, &m| {
            if m == F::zero() {
                *o = n;
            }
        });
    Ok(out)
}

/// `ε_sep + k·(ε_joint − ε_sep)`, evaluated as `(1 − k)·ε_sep + k·ε_joint`
/// so that `k = 0` and `k = 1` return their endpoint exactly.
pub fn condition_guidance<F: Scalar>(eps_joint: &Array4<F>, eps_sep: &Array4<F>, k: f64) -> Result<Array4<F>> {
    if eps_joint.dim() != eps_sep.dim() {
        return shape_err(format!("{:?} vs {:?}", eps_joint.dim(), eps_sep.dim()));
    }
    let (k, rest) = (F::lit(k), F::lit(1.0 - k));
    Ok(Zip::from(eps_joint)
        .and(eps_sep)
        .map_collect(|&j, &s| rest * s + k * j))
}

/// Features and adapters of one condition model at a joint site.
#[derive(Clone, Copy, Debug)]
pub struct PairModel<'a, F> {
    pub module: &'a JointAttnModule<F>,
    pub xy_lora: &'a [LoraAdapter<F>],
    pub yx_lora: &'a [LoraAdapter<F>],
}

/// Multi-condition joint features: `F_x = Σ_c w_xc·F_xc` and `F_c = w_cx·F_cx`.
pub fn multi_model_forward<F: Scalar>(
    f_x: &Array2<F>,
    cond_feats: &[Array2<F>],
    models: &[PairModel<F>],
    weights: &[(f64, f64)],
) -> Result<(Array2<F>, Vec<Array2<F>>)> {
    if cond_feats.len() != models.len() || weights.len() != models.len() {
        return Err(Error::Combination(format!(
            "{} conditions, {} models, {} weight pairs",
            cond_feats.len(),
            models.len(),
            weights.len()
        )));
    }
    let width = f_x.ncols();
    for m in models {
        if m.module.base_weights.w_q.dim() != (width, width) || m.module.aligned != models[0].module.aligned {
            return Err(Error::Combination("models do not share the base architecture".into()));
        }
    }
    let mut fx = Array2::zeros(f_x.dim());
    let mut fc = Vec::with_capacity(models.len());
    for ((feat, m), &(w_xc, w_cx)) in cond_feats.iter().zip(models).zip(weights) {
        if w_xc == 0.0 && w_cx == 0.0 {
            fc.push(Array2::zeros(feat.dim()));
            continue;
        }
        let (a, b) = joint_cross_attention(f_x, feat, m.module, m.xy_lora, m.yx_lora)
            .map_err(|e| Error::Combination(e.to_string()))?;
        fx = fx + a * F::lit(w_xc);
        fc.push(b * F::lit(w_cx));
    }
    Ok((fx, fc))
}

/// Guidance inputs for one branch.
#[derive(Clone, Debug)]
pub struct GuidedBranch<F> {
    pub z: Array4<F>,
    pub t: usize,
    /// Clean values on the known region; `None` when nothing is known.
    pub clean: Option<Array4<F>>,
    /// `1` on coordinates that guidance may move, `0` elsewhere.
    pub free: Array4<F>,
    /// `1` on coordinates where `clean` is known.
    pub known: Array4<F>,
}

impl<F: Scalar> GuidedBranch<F> {
    /// Standard masks: known where `m = 0`, free where `m = 1`.
    pub fn from_mask(z: Array4<F>, t: usize, clean: Option<Array4<F>>, m: Array4<F>) -> Self {
        let known = m.mapv(|v| F::one() - v);
        Self {
            z,
            t,
            clean,
            free: m,
            known,
        }
    }
}

/// Reconstruction loss `Σ_b ‖known_b ⊙ (clean_b − ẑ_0,b)‖²`, its gradient
/// with respect to every `z_b`, and the noise predictions at the given
/// states.
pub fn guidance_loss_and_grad<F: Scalar, M: EpsModel<F>>(
    model: &M,
    branches: &[GuidedBranch<F>],
    overrides: &JointOverrides,
) -> Result<(f64, Vec<Array4<F>>, Vec<Array4<F>>)> {
    let first = branches
        .first()
        .ok_or_else(|| Error::MissingInput("no branches".into()))?;
    let (n, _, h, w) = first.z.dim();
    let geo = Geometry::new(n, h, w);
    let mut cx = Ctx::inference();
    let ts: Vec<Vec<usize>> = branches.iter().map(|b| vec![b.t; n]).collect();
    let leaves: Vec<Var> = branches
        .iter()
        .map(|b| cx.graph.leaf(to_tokens(b.z.view()), true))
        .collect();
    let vars: Vec<BranchVar> = leaves
        .iter()
        .zip(&ts)
        .map(|(&tokens, t)| BranchVar { tokens, timesteps: t })
        .collect();
    let eps = model.eps(&mut cx, geo, &vars, overrides)?;
    let sched = model.schedule();
    let mut terms = Vec::new();
    for ((b, &z), &e) in branches.iter().zip(&leaves).zip(&eps) {
        let Some(clean) = &b.clean else { continue };
        if b.known.iter().all(|&k| k == F::zero()) {
            continue;
        }
        let x0 = if b.t == 0 {
            z
        } else {
            let ab = sched.alpha_bar(b.t);
            let zs = cx.graph.scale(z, F::lit(1.0 / ab.sqrt()));
            let es = cx.graph.scale(e, F::lit((1.0 - ab).sqrt() / ab.sqrt()));
            cx.graph.sub(zs, es)
        };
        let target = cx.graph.constant(to_tokens(clean.view()));
        let known = cx.graph.constant(to_tokens(b.known.view()));
        let d = cx.graph.sub(target, x0);
        let d = cx.graph.mul(d, known);
        let sq = cx.graph.mul(d, d);
        terms.push(cx.graph.sum_all(sq));
    }
    let eps_out: Vec<Array4<F>> = eps.iter().map(|&v| from_tokens(cx.graph.value(v), geo)).collect();
    if terms.is_empty() {
        let zeros = branches.iter().map(|b| Array4::zeros(b.z.dim())).collect();
        return Ok((0.0, zeros, eps_out));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = cx.graph.add(total, t);
    }
    let loss = cx.graph.value(total)[[0, 0]].as_f64();
    let mut grads = cx.graph.backward(total);
    let mut out = Vec::with_capacity(branches.len());
    for (b, &leaf) in branches.iter().zip(&leaves) {
        let g = match grads.take(leaf) {
            Some(g) => from_tokens(&g, geo),
            None => Array4::zeros(b.z.dim()),
        };
        if g.iter().any(|v| !v.is_finite()) || !loss.is_finite() {
            return Err(Error::Numerical("non-finite guidance gradient".into()));
        }
        out.push(g);
    }
    Ok((loss, out, eps_out))
}

/// Same outputs as [`guidance_loss_and_grad`] with `∂ẑ_0/∂z_t ≈ I/√ᾱ_t`.
pub fn guidance_loss_and_grad_identity<F: Scalar, M: EpsModel<F>>(
    model: &M,
    branches: &[GuidedBranch<F>],
    overrides: &JointOverrides,
) -> Result<(f64, Vec<Array4<F>>, Vec<Array4<F>>)> {
    let first = branches
        .first()
        .ok_or_else(|| Error::MissingInput("no branches".into()))?;
    let (n, _, h, w) = first.z.dim();
    let z: Vec<Array4<F>> = branches.iter().map(|b| b.z.clone()).collect();
    let t: Vec<usize> = branches.iter().map(|b| b.t).collect();
    let eps = predict(model, Geometry::new(n, h, w), &z, &t, overrides)?;
    let sched = model.schedule();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(branches.len());
    for (b, e) in branches.iter().zip(&eps) {
        let Some(clean) = &b.clean else {
            grads.push(Array4::zeros(b.z.dim()));
            continue;
        };
        let ab = sched.alpha_bar(b.t);
        let x0 = predict_x0(&b.z, e, b.t, sched)?;
        let scale = F::lit(-2.0 / ab.sqrt());
        let g = Zip::from(clean).and(&x0).and(&b.known).map_collect(|&c, &x, &k| {
            let r = k * (c - x);
            loss += (r * r).as_f64();
            scale * r
        });
        grads.push(g);
    }
    Ok((loss, grads, eps))
}

fn guidance_grads<F: Scalar, M: EpsModel<F>>(
    model: &M,
    branches: &[GuidedBranch<F>],
    overrides: &JointOverrides,
    identity_jacobian: bool,
) -> Result<(f64, Vec<Array4<F>>, Vec<Array4<F>>)> {
    if identity_jacobian {
        guidance_loss_and_grad_identity(model, branches, overrides)
    } else {
        guidance_loss_and_grad(model, branches, overrides)
    }
}

fn fixed_update<F: Scalar>(
    branches: &[GuidedBranch<F>],
    grads: &[Array4<F>],
    w_r: f64,
    schedule: &NoiseSchedule,
) -> Vec<Array4<F>> {
    branches
        .iter()
        .zip(grads)
        .map(|(b, g)| {
            let step = F::lit(w_r * schedule.alpha_bar(b.t) / 2.0);
            Zip::from(&b.z)
                .and(g)
                .and(&b.free)
                .map_collect(|&z, &g, &m| z - step * m * g)
        })
        .collect()
}

/// `z^g = z − w_r·(ᾱ_t/2)·m ⊙ ∇_z‖z^m − ẑ_0^m‖²` per branch.
pub fn reconstruction_guidance<F: Scalar, M: EpsModel<F>>(
    model: &M,
    branches: &[GuidedBranch<F>],
    w_r: f64,
    overrides: &JointOverrides,
) -> Result<Vec<Array4<F>>> {
    if w_r == 0.0 {
        return Ok(branches.iter().map(|b| b.z.clone()).collect());
    }
    let (_, grads, _) = guidance_loss_and_grad(model, branches, overrides)?;
    Ok(fixed_update(branches, &grads, w_r, model.schedule()))
}

/// Iterated guidance steps with an optimizer in place of the fixed weight.
/// `first_grad` reuses a gradient already evaluated at the input states.
fn optimize_guidance<F: Scalar, M: EpsModel<F>>(
    model: &M,
    branches: &[GuidedBranch<F>],
    settings: &OptimizerSettings,
    overrides: &JointOverrides,
    identity_jacobian: bool,
    mut first_grad: Option<Vec<Array4<F>>>,
) -> Result<Vec<Array4<F>>> {
    let mut cur: Vec<GuidedBranch<F>> = branches.to_vec();
    if settings.lr == 0.0 {
        return Ok(cur.into_iter().map(|b| b.z).collect());
    }
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m1: Vec<Array4<F>> = cur.iter().map(|b| Array4::zeros(b.z.dim())).collect();
    let mut m2 = m1.clone();
    let lr = F::lit(settings.lr);
    for it in 0..settings.iterations {
        let grads = match first_grad.take() {
            Some(g) => g,
            None => guidance_grads(model, &cur, overrides, identity_jacobian)?.1,
        };
        let k = (it + 1) as i32;
        for (bi, b) in cur.iter_mut().enumerate() {
            match settings.kind {
                OptimizerKind::Sgd => {
                    Zip::from(&mut b.z)
                        .and(&grads[bi])
                        .and(&b.free)
                        .for_each(|z, &g, &m| *z -= lr * m * g);
                }
                OptimizerKind::Adam => {
                    let (c1, c2) = (F::lit(1.0 - b1.powi(k)), F::lit(1.0 - b2.powi(k)));
                    let (fb1, fb2, fe) = (F::lit(b1), F::lit(b2), F::lit(eps));
                    Zip::from(&mut b.z)
                        .and(&grads[bi])
                        .and(&b.free)
                        .and(&mut m1[bi])
                        .and(&mut m2[bi])
                        .for_each(|z, &g, &m, a, v| {
                            let g = g * m;
                            *a = fb1 * *a + (F::one() - fb1) * g;
                            *v = fb2 * *v + (F::one() - fb2) * g * g;
                            *z -= lr * (*a / c1) / ((*v / c2).sqrt() + fe) * m;
                        });
                }
            }
        }
    }
    Ok(cur.into_iter().map(|b| b.z).collect())
}

pub fn guidance_via_optimizer<F: Scalar, M: EpsModel<F>>(
    model: &M,
    branches: &[GuidedBranch<F>],
    settings: &OptimizerSettings,
    overrides: &JointOverrides,
) -> Result<Vec<Array4<F>>> {
    optimize_guidance(model, branches, settings, overrides, false, None)
}

/// Inputs of a plan run. Branch 0 is `x`; each condition is one `y` branch
/// served by the adapter set in the same slot.
#[derive(Clone, Debug)]
pub struct PlanInputs<F> {
    pub n: usize,
    /// `(C, H, W)` shared by every branch.
    pub dims: (usize, usize, usize),
    pub x: Option<Array4<F>>,
    pub conditions: Vec<Option<Array4<F>>>,
}

impl<F: Scalar> PlanInputs<F> {
    /// Two-branch inputs.
    pub fn pair(n: usize, dims: (usize, usize, usize), x: Option<Array4<F>>, y: Option<Array4<F>>) -> Self {
        Self {
            n,
            dims,
            x,
            conditions: vec![y],
        }
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |a: &Option<Array4<F>>| a.as_ref().map(|a| a.slice(s![range.clone(), .., .., ..]).to_owned());
        Self {
            n: range.len(),
            dims: self.dims,
            x: cut(&self.x),
            conditions: self.conditions.iter().map(cut).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlanOutput<F> {
    pub x: Array4<F>,
    pub conditions: Vec<Array4<F>>,
    /// Joint model evaluations per sample.
    pub evaluations: usize,
}

/// Samples processed per forward pass.
pub const CHUNK: usize = 64;

/// Draws `N(0, 1)` per sample from that sample's own stream.
fn per_sample_noise<F: Scalar>(rngs: &mut [StreamRng], dims: (usize, usize, usize)) -> Array4<F> {
    let (c, h, w) = dims;
    let mut out = Array4::zeros((rngs.len(), c, h, w));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in out.slice_mut(s![i, .., .., ..]).iter_mut() {
            *v = normal(rng);
        }
    }
    out
}

/// Executes `plan`. Each sample draws all of its randomness from its own
/// stream in `rngs`, so results do not depend on how samples are batched.
pub fn run_plan<F: Scalar, M: EpsModel<F>>(
    model: &M,
    plan: &SamplingPlan,
    inputs: &PlanInputs<F>,
    rngs: &mut [StreamRng],
) -> Result<PlanOutput<F>> {
    plan.validate()?;
    if rngs.len() != inputs.n {
        return Err(Error::Config(format!("{} streams for {} samples", rngs.len(), inputs.n)));
    }
    if inputs.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let t_max = model.schedule().max_timestep();
    if plan.levels > t_max {
        return Err(Error::Config(format!(
            "{} levels exceed the {t_max}-step schedule",
            plan.levels
        )));
    }
    let (c, h, w) = inputs.dims;
    let check = |a: &Option<Array4<F>>, name: &str| -> Result<()> {
        match a {
            Some(a) if a.dim() != (inputs.n, c, h, w) => shape_err(format!(
                "{name} input {:?}, expected {:?}",
                a.dim(),
                (inputs.n, c, h, w)
            )),
            _ => Ok(()),
        }
    };
    check(&inputs.x, "x")?;
    for y in &inputs.conditions {
        check(y, "condition")?;
    }
    let mut xs = Array4::zeros((inputs.n, c, h, w));
    let mut ys: Vec<Array4<F>> = inputs
        .conditions
        .iter()
        .map(|_| Array4::zeros((inputs.n, c, h, w)))
        .collect();
    let mut start = 0;
    while start < inputs.n {
        let end = (start + CHUNK).min(inputs.n);
        let out = run_chunk(model, plan, &inputs.slice(start..end), &mut rngs[start..end])?;
        xs.slice_mut(s![start..end, .., .., ..]).assign(&out[0]);
        for (y, o) in ys.iter_mut().zip(&out[1..]) {
            y.slice_mut(s![start..end, .., .., ..]).assign(o);
        }
        start = end;
    }
    Ok(PlanOutput {
        x: xs,
        conditions: ys,
        evaluations: plan.evaluations(),
    })
}

fn run_chunk<F: Scalar, M: EpsModel<F>>(
    model: &M,
    plan: &SamplingPlan,
    inputs: &PlanInputs<F>,
    rngs: &mut [StreamRng],
) -> Result<Vec<Array4<F>>> {
    let sched = model.schedule();
    let t_max = sched.max_timestep();
    let (c, h, w) = inputs.dims;
    let n = inputs.n;
    let dims4 = (n, c, h, w);
    let geo = Geometry::new(n, h, w);
    let nb = 1 + inputs.conditions.len();
    let clean: Vec<Option<&Array4<F>>> = std::iter::once(inputs.x.as_ref())
        .chain(inputs.conditions.iter().map(|y| y.as_ref()))
        .collect();
    let level = |b: usize, i: usize| if b == 0 { plan.steps[i].0 } else { plan.steps[i].1 };
    let name = |b: usize| if b == 0 { "x".to_string() } else { format!("condition {b}") };
    let require = |b: usize, why: &str| -> Result<&Array4<F>> {
        clean[b].ok_or_else(|| Error::MissingInput(format!("{} input needed ({why})", name(b))))
    };

    let mut z: Vec<Array4<F>> = Vec::with_capacity(nb);
    for b in 0..nb {
        let l0 = level(b, 0);
        let t0 = plan.timestep(l0, t_max);
        let init = if l0 == plan.levels {
            per_sample_noise(rngs, (c, h, w))
        } else if l0 == 0 {
            require(b, "held clean")?.clone()
        } else {
            let eps = per_sample_noise(rngs, (c, h, w));
            add_noise(require(b, "noised start")?, t0, &eps, sched)?
        };
        z.push(init);
    }

    let overrides = plan.overrides();
    let replace = match &plan.replacement {
        Some(r) => {
            let b = match r.branch {
                Branch::X => 0,
                Branch::Y => 1,
            };
            if b >= nb {
                return Err(Error::Config("replacement targets a missing branch".into()));
            }
            let clean_b = require(b, "replacement")?;
            Some((b, clean_b, broadcast_mask::<F>(&r.known, dims4)))
        }
        None => None,
    };
    let guide_masks: Option<Vec<Array4<F>>> = match &plan.guidance {
        Some(g) => {
            let mut ms = vec![broadcast_mask::<F>(&g.known_x, dims4)];
            for _ in 1..nb {
                ms.push(broadcast_mask::<F>(&g.known_y, dims4));
            }
            for (b, region) in [(0, &g.known_x), (1, &g.known_y)] {
                if b < nb && !region.is_nothing() {
                    require(b, "guidance")?;
                }
            }
            Some(ms)
        }
        None => None,
    };

    for i in 0..plan.steps.len() - 1 {
        let t: Vec<usize> = (0..nb).map(|b| plan.timestep(level(b, i), t_max)).collect();
        let t_next: Vec<usize> = (0..nb).map(|b| plan.timestep(level(b, i + 1), t_max)).collect();
        let moving: Vec<bool> = (0..nb).map(|b| t_next[b] < t[b]).collect();

        if let Some((b, clean_b, m)) = &replace {
            if t[*b] > 0 {
                let eps = per_sample_noise(rngs, (c, h, w));
                z[*b] = latent_replacement(&z[*b], clean_b, m, t[*b], &eps, sched)?;
            }
        }

        let guidance = plan
            .guidance
            .as_ref()
            .filter(|g| i > 0 || g.from_first_step);
        let mut eps_hat: Vec<Array4<F>>;
        if let (Some(g), Some(masks)) = (guidance, &guide_masks) {
            let branches: Vec<GuidedBranch<F>> = (0..nb)
                .map(|b| {
                    let m = &masks[b];
                    let free = if moving[b] { m.clone() } else { Array4::zeros(dims4) };
                    GuidedBranch {
                        z: z[b].clone(),
                        t: t[b],
                        clean: clean[b].cloned(),
                        free,
                        known: m.mapv(|v| F::one() - v),
                    }
                })
                .collect();
            let (_, grads, eps) = guidance_grads(model, &branches, &overrides, g.identity_jacobian)?;
            eps_hat = eps;
            let guided = match g.mode {
                GuidanceMode::FixedW => fixed_update(&branches, &grads, g.w_r, sched),
                GuidanceMode::Optimizer => optimize_guidance(
                    model,
                    &branches,
                    g.optimizer.as_ref().expect("validated"),
                    &overrides,
                    g.identity_jacobian,
                    Some(grads),
                )?,
            };
            z = guided;
            if g.refresh_eps {
                eps_hat = predict(model, geo, &z, &t, &overrides)?;
            }
        } else {
            eps_hat = predict(model, geo, &z, &t, &overrides)?;
        }

        if let Some(k) = plan.cond_guidance_k {
            if nb > 1 && moving[0] {
                let sep = predict(model, geo, &z[..1], &t[..1], &overrides)?;
                eps_hat[0] = condition_guidance(&eps_hat[0], &sep[0], k)?;
            }
        }

        for b in 0..nb {
            if !moving[b] {
                continue;
            }
            let noise = if plan.eta > 0.0 {
                per_sample_noise(rngs, (c, h, w))
            } else {
                Array4::zeros(dims4)
            };
            z[b] = reverse_step(&z[b], &eps_hat[b], t[b], t_next[b], plan.eta, &noise, sched)?;
        }
        if z.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite state after step {i}")));
        }
    }
    Ok(z)
}

/// Inference-only noise prediction for every branch at a shared timestep
/// per branch.
fn predict<F: Scalar, M: EpsModel<F>>(
    model: &M,
    geo: Geometry,
    z: &[Array4<F>],
    t: &[usize],
    overrides: &JointOverrides,
) -> Result<Vec<Array4<F>>> {
    let mut cx = Ctx::inference();
    let ts: Vec<Vec<usize>> = t.iter().map(|&ti| vec![ti; geo.samples]).collect();
    let vars: Vec<BranchVar> = z
        .iter()
        .zip(&ts)
        .map(|(a, ti)| BranchVar {
            tokens: cx.graph.constant(to_tokens(a.view())),
            timesteps: ti,
        })
        .collect();
    let out = model.eps(&mut cx, geo, &vars, overrides)?;
    Ok(out.iter().map(|&v| from_tokens(cx.graph.value(v), geo)).collect())
}

/// Mean over samples of the squared error on the known region.
pub fn known_region_error<F: Scalar>(out: &Array4<F>, clean: &Array4<F>, region: &Region) -> Result<f64> {
    if out.dim() != clean.dim() {
        return shape_err(format!("{:?} vs {:?}", out.dim(), clean.dim()));
    }
    let m = broadcast_mask::<F>(region, out.dim());
    let mut acc = 0.0;
    Zip::from(out).and(clean).and(&m).for_each(|&o, &c, &m| {
        if m == F::zero() {
            let d = (o - c).as_f64();
            acc += d * d;
        }
    });
    Ok(acc / out.len_of(Axis(0)) as f64)
}
