//! Noise-prediction network with optional joint cross-attention between
//! branches.
//!
//! Each branch runs the same U-Net (same base weights). Condition branches
//! may carry their own self-attention LoRA, and at every joint site the
//! target branch and each condition branch exchange information through
//! attention using LoRA-adapted copies of the self-attention weights.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterId, AdapterSet, LoraAdapter, LoraRole};
use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    conv3x3_map, from_tokens, init_weight, patchify_map, resize_nearest_map, to_tokens,
    unpatchify_map, Ctx, Geometry, ParamKind, Params,
};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::scalar::Scalar;

/// Where joint attention is inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointSites {
    /// Every transformer site.
    #[default]
    All,
    /// Decoder sites only.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels_in: usize,
    pub base_width: usize,
    pub levels: usize,
    pub attn_heads: usize,
    pub head_dim: usize,
    pub time_embed_dim: usize,
    /// Both branches share spatial layout, so joint outputs go through one
    /// projection over the concatenated features.
    pub aligned: bool,
    pub patch_size: usize,
    pub norm_groups: usize,
    pub ff_mult: usize,
    pub joint_sites: JointSites,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels_in: 1,
            base_width: 32,
            levels: 2,
            attn_heads: 2,
            head_dim: 16,
            time_embed_dim: 64,
            aligned: true,
            patch_size: 2,
            norm_groups: 8,
            ff_mult: 4,
            joint_sites: JointSites::All,
        }
    }
}

impl DenoiserConfig {
    /// Configuration for 1×1 single-channel inputs (scalar pairs).
    pub fn pointwise() -> Self {
        Self {
            levels: 1,
            patch_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels_in", self.channels_in),
            ("base_width", self.base_width),
            ("levels", self.levels),
            ("attn_heads", self.attn_heads),
            ("head_dim", self.head_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("patch_size", self.patch_size),
            ("norm_groups", self.norm_groups),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.attn_heads * self.head_dim != self.base_width {
            return Err(Error::Config(format!(
                "attn_heads * head_dim = {} must equal base_width {}",
                self.attn_heads * self.head_dim,
                self.base_width
            )));
        }
        if !self.base_width.is_multiple_of(self.norm_groups) {
            return Err(Error::Config("norm_groups must divide base_width".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Every transformer site, encoder first.
    pub fn site_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.levels).map(|l| format!("down{l}.attn")).collect();
        out.extend((0..self.levels).rev().map(|l| format!("up{l}.attn")));
        out
    }

    /// Sites that carry joint attention.
    pub fn joint_site_names(&self) -> Vec<String> {
        match self.joint_sites {
            JointSites::All => self.site_names(),
            JointSites::Decoder => (0..self.levels).rev().map(|l| format!("up{l}.attn")).collect(),
        }
    }

    fn has_joint(&self, site: &str) -> bool {
        match self.joint_sites {
            JointSites::All => true,
            JointSites::Decoder => site.starts_with("up"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Layout {
    entries: Vec<(String, (usize, usize), Init)>,
    width: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: (usize, usize), init: Init) {
        self.entries.push((name, shape, init));
    }

    fn linear(&mut self, p: &str, out: usize, inp: usize, gain: f64) {
        self.push(format!("{p}.weight"), (out, inp), Init::Normal(gain));
        self.push(format!("{p}.bias"), (1, out), Init::Zeros);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.push(format!("{p}.gamma"), (1, c), Init::Ones);
        self.push(format!("{p}.beta"), (1, c), Init::Zeros);
    }

    fn resblock(&mut self, p: &str, cin: usize, embed: usize) {
        let w = self.width;
        self.norm(&format!("{p}.norm1"), cin);
        self.linear(&format!("{p}.conv1"), w, 9 * cin, 1.0);
        self.linear(&format!("{p}.temb"), w, embed, 1.0);
        self.norm(&format!("{p}.norm2"), w);
        self.linear(&format!("{p}.conv2"), w, 9 * w, 0.1);
        if cin != w {
            self.linear(&format!("{p}.skip"), w, cin, 1.0);
        }
    }

    fn site(&mut self, p: &str, ff_mult: usize) {
        let w = self.width;
        self.norm(&format!("{p}.norm1"), w);
        for name in ["W_Q", "W_K", "W_V"] {
            self.push(format!("{p}.selfattn.{name}"), (w, w), Init::Normal(1.0));
        }
        self.push(format!("{p}.selfattn.W_O"), (w, w), Init::Normal(0.1));
        self.push(format!("{p}.selfattn.b_O"), (1, w), Init::Zeros);
        self.norm(&format!("{p}.norm2"), w);
        self.linear(&format!("{p}.ff.w1"), ff_mult * w, w, 1.0);
        self.linear(&format!("{p}.ff.w2"), w, ff_mult * w, 0.1);
    }
}

fn base_layout(cfg: &DenoiserConfig) -> Vec<(String, (usize, usize), Init)> {
    let w = cfg.base_width;
    let e = cfg.time_embed_dim;
    let cp = cfg.channels_in * cfg.patch_size * cfg.patch_size;
    let mut lay = Layout {
        entries: Vec::new(),
        width: w,
    };
    lay.linear("conv_in", w, 9 * cp, 1.0);
    lay.linear("time.lin1", e, e, 1.0);
    lay.linear("time.lin2", e, e, 1.0);
    for l in 0..cfg.levels {
        lay.resblock(&format!("down{l}.res"), w, e);
        lay.site(&format!("down{l}.attn"), cfg.ff_mult);
        if l + 1 < cfg.levels {
            lay.linear(&format!("down{l}.downsample"), w, 9 * w, 1.0);
        }
    }
    lay.resblock("mid.res", w, e);
    for l in (0..cfg.levels).rev() {
        lay.resblock(&format!("up{l}.res"), 2 * w, e);
        lay.site(&format!("up{l}.attn"), cfg.ff_mult);
        if l > 0 {
            lay.linear(&format!("up{l}.upsample"), w, 9 * w, 1.0);
        }
    }
    lay.norm("out.norm", w);
    lay.linear("conv_out", cp, 9 * w, 0.1);
    lay.entries
}

/// Query/key/value/output projections of one attention module, `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<F> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
    pub b_o: Array2<F>,
}

impl<F: Scalar> AttentionWeights<F> {
    /// Reads `{prefix}.W_Q` … `{prefix}.b_O`.
    pub(crate) fn from_params(params: &Params<F>, prefix: &str) -> Self {
        Self {
            w_q: params.expect(&format!("{prefix}.W_Q")).clone(),
            w_k: params.expect(&format!("{prefix}.W_K")).clone(),
            w_v: params.expect(&format!("{prefix}.W_V")).clone(),
            w_o: params.expect(&format!("{prefix}.W_O")).clone(),
            b_o: params.expect(&format!("{prefix}.b_O")).clone(),
        }
    }

    fn named(&self) -> [(&'static str, &Array2<F>); 5] {
        [
            ("W_Q", &self.w_q),
            ("W_K", &self.w_k),
            ("W_V", &self.w_v),
            ("W_O", &self.w_o),
            ("b_O", &self.b_o),
        ]
    }
}

/// Output projection of a joint site.
#[derive(Clone, Debug, PartialEq)]
pub enum ProjOut<F> {
    /// One `2W × 2W` map over `[O_x, O_y]`.
    Aligned { weight: Array2<F>, bias: Array2<F> },
    /// Independent `W × W` maps per branch.
    Separate {
        x_weight: Array2<F>,
        x_bias: Array2<F>,
        y_weight: Array2<F>,
        y_bias: Array2<F>,
    },
}

impl<F: Scalar> ProjOut<F> {
    pub fn zeros(width: usize, aligned: bool) -> Self {
        if aligned {
            ProjOut::Aligned {
                weight: Array2::zeros((2 * width, 2 * width)),
                bias: Array2::zeros((1, 2 * width)),
            }
        } else {
            ProjOut::Separate {
                x_weight: Array2::zeros((width, width)),
                x_bias: Array2::zeros((1, width)),
                y_weight: Array2::zeros((width, width)),
                y_bias: Array2::zeros((1, width)),
            }
        }
    }

    pub(crate) fn same_shape(&self, other: &Self) -> bool {
        match (self, other) {
            (ProjOut::Aligned { weight: a, bias: b }, ProjOut::Aligned { weight: c, bias: d }) => {
                a.dim() == c.dim() && b.dim() == d.dim()
            }
            (
                ProjOut::Separate {
                    x_weight,
                    x_bias,
                    y_weight,
                    y_bias,
                },
                ProjOut::Separate {
                    x_weight: a,
                    x_bias: b,
                    y_weight: c,
                    y_bias: d,
                },
            ) => {
                x_weight.dim() == a.dim()
                    && x_bias.dim() == b.dim()
                    && y_weight.dim() == c.dim()
                    && y_bias.dim() == d.dim()
            }
            _ => false,
        }
    }
}

/// Frozen attention copy plus output projection of one joint site.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAttnModule<F> {
    pub site: String,
    pub base_weights: AttentionWeights<F>,
    pub proj_out: ProjOut<F>,
    pub joint_weight: F,
    pub aligned: bool,
    pub heads: usize,
}

enum ProjVars {
    Aligned(Var, Var),
    Separate(Var, Var, Var, Var),
}

/// Effective projections for one joint pair, already on the graph.
struct JointVars {
    q_x: Var,
    k_x: Var,
    v_x: Var,
    q_y: Var,
    k_y: Var,
    v_y: Var,
    w_o: Var,
    b_o: Var,
    proj: ProjVars,
}

/// Cross-attention in both directions followed by the output projection.
/// Returns the unscaled joint features `(F_x, F_y)`.
fn joint_pair<F: Scalar>(
    g: &mut Graph<F>,
    nx: Var,
    ny: Var,
    jv: &JointVars,
    samples: usize,
    heads: usize,
) -> (Var, Var) {
    let qx = g.matmul_bt(nx, jv.q_x);
    let kx = g.matmul_bt(nx, jv.k_x);
    let vx = g.matmul_bt(nx, jv.v_x);
    let qy = g.matmul_bt(ny, jv.q_y);
    let ky = g.matmul_bt(ny, jv.k_y);
    let vy = g.matmul_bt(ny, jv.v_y);
    let ox = g.attention(qx, ky, vy, samples, heads);
    let oy = g.attention(qy, kx, vx, samples, heads);
    let ox = g.matmul_bt(ox, jv.w_o);
    let ox = g.add_row(ox, jv.b_o);
    let oy = g.matmul_bt(oy, jv.w_o);
    let oy = g.add_row(oy, jv.b_o);
    match jv.proj {
        ProjVars::Aligned(w, b) => {
            let width = g.value(ox).ncols();
            let cat = g.concat_cols(&[ox, oy]);
            let p = g.matmul_bt(cat, w);
            let p = g.add_row(p, b);
            (g.slice_cols(p, 0, width), g.slice_cols(p, width, 2 * width))
        }
        ProjVars::Separate(xw, xb, yw, yb) => {
            let fx = g.matmul_bt(ox, xw);
            let fx = g.add_row(fx, xb);
            let fy = g.matmul_bt(oy, yw);
            let fy = g.add_row(fy, yb);
            (fx, fy)
        }
    }
}

/// `softmax(Q·Kᵀ/√d)·V` for a single head.
pub fn scaled_dot_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
) -> Result<Array2<F>> {
    if q.ncols() != k.ncols() {
        return shape_err(format!("query width {} vs key width {}", q.ncols(), k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return shape_err(format!("{} keys vs {} values", k.nrows(), v.nrows()));
    }
    if q.ncols() == 0 || k.nrows() == 0 {
        return shape_err("empty attention operands");
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, 1, 1);
    Ok(g.value(out).clone())
}

fn find_lora<'a, F>(list: &'a [LoraAdapter<F>], proj: &str) -> Option<&'a LoraAdapter<F>> {
    list.iter().find(|a| a.target.ends_with(&format!(".{proj}")))
}

/// Joint attention of one sample's token features `f_x` (`L_x × W`) and
/// `f_y` (`L_y × W`). Returns `joint_weight · (F_x, F_y)`.
pub fn joint_cross_attention<F: Scalar>(
    f_x: &Array2<F>,
    f_y: &Array2<F>,
    module: &JointAttnModule<F>,
    xy_lora: &[LoraAdapter<F>],
    yx_lora: &[LoraAdapter<F>],
) -> Result<(Array2<F>, Array2<F>)> {
    let w = module.base_weights.w_q.ncols();
    if f_x.ncols() != w || f_y.ncols() != w {
        return shape_err(format!(
            "feature widths {} / {} vs attention width {w}",
            f_x.ncols(),
            f_y.ncols()
        ));
    }
    if module.aligned && f_x.nrows() != f_y.nrows() {
        return Err(Error::Alignment(format!(
            "aligned joint attention needs equal token counts, got {} and {}",
            f_x.nrows(),
            f_y.nrows()
        )));
    }
    let mut g = Graph::new();
    let bw = &module.base_weights;
    let eff = |g: &mut Graph<F>, base: &Array2<F>, list: &[LoraAdapter<F>], proj: &str| -> Result<Var> {
        let m = match find_lora(list, proj) {
            Some(a) => crate::adapters::effective_weight(base, a)?,
            None => base.clone(),
        };
        Ok(g.constant(m))
    };
    let jv = JointVars {
        q_x: eff(&mut g, &bw.w_q, xy_lora, "W_Q")?,
        k_x: eff(&mut g, &bw.w_k, xy_lora, "W_K")?,
        v_x: eff(&mut g, &bw.w_v, xy_lora, "W_V")?,
        q_y: eff(&mut g, &bw.w_q, yx_lora, "W_Q")?,
        k_y: eff(&mut g, &bw.w_k, yx_lora, "W_K")?,
        v_y: eff(&mut g, &bw.w_v, yx_lora, "W_V")?,
        w_o: g.constant(bw.w_o.clone()),
        b_o: g.constant(bw.b_o.clone()),
        proj: match &module.proj_out {
            ProjOut::Aligned { weight, bias } => {
                if !module.aligned {
                    return Err(Error::Alignment("aligned projection on a non-aligned module".into()));
                }
                ProjVars::Aligned(g.constant(weight.clone()), g.constant(bias.clone()))
            }
            ProjOut::Separate {
                x_weight,
                x_bias,
                y_weight,
                y_bias,
            } => ProjVars::Separate(
                g.constant(x_weight.clone()),
                g.constant(x_bias.clone()),
                g.constant(y_weight.clone()),
                g.constant(y_bias.clone()),
            ),
        },
    };
    let nx = g.constant(f_x.clone());
    let ny = g.constant(f_y.clone());
    let (fx, fy) = joint_pair(&mut g, nx, ny, &jv, 1, module.heads);
    let s = module.joint_weight;
    Ok((g.value(fx) * s, g.value(fy) * s))
}

/// Per-call replacements for the stored joint weight and combination
/// weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JointOverrides {
    pub joint_weight: Option<f64>,
    pub combination: Option<Vec<(f64, f64)>>,
}

/// One branch of a forward pass: token matrix `(N·H·W) × C` on the graph and
/// a timestep per sample.
#[derive(Clone, Copy, Debug)]
pub struct BranchVar<'a> {
    pub tokens: Var,
    pub timesteps: &'a [usize],
}

/// One branch of an array-level prediction: `(N, C, H, W)` noisy input and a
/// timestep per sample.
#[derive(Clone, Copy, Debug)]
pub struct BranchInput<'a, F> {
    pub z: ArrayView4<'a, F>,
    pub timesteps: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct JointDenoiser<F: Scalar> {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    base: Params<F>,
    joint_base: BTreeMap<String, AttentionWeights<F>>,
    adapters: Vec<(AdapterId, AdapterSet<F>)>,
    next_id: u64,
    joint_weight: F,
    combination: Option<Vec<(F, F)>>,
}

impl<F: Scalar> JointDenoiser<F> {
    /// Freshly initialized base model without adapters.
    pub fn new_base<R: Rng + ?Sized>(
        config: DenoiserConfig,
        schedule: &ScheduleParams,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut base = Params::new();
        for (name, (r, c), init) in base_layout(&config) {
            let t = match init {
                Init::Normal(gain) => init_weight(r, c, gain, rng),
                Init::Zeros => Array2::zeros((r, c)),
                Init::Ones => Array2::ones((r, c)),
            };
            base.insert(name, t);
        }
        Self::from_parts(config, schedule, base)
    }

    /// Assembles a model from stored base weights, checking every name and
    /// shape against the configuration.
    pub fn from_parts(config: DenoiserConfig, schedule: &ScheduleParams, base: Params<F>) -> Result<Self> {
        config.validate()?;
        let layout = base_layout(&config);
        if layout.len() != base.len() {
            return shape_err(format!(
                "expected {} base tensors, found {}",
                layout.len(),
                base.len()
            ));
        }
        for (name, shape, _) in &layout {
            match base.get(name) {
                Some(t) if t.dim() == *shape => {}
                Some(t) => {
                    return shape_err(format!("{name}: expected {shape:?}, found {:?}", t.dim()))
                }
                None => return shape_err(format!("missing base tensor {name}")),
            }
        }
        Ok(Self {
            config,
            schedule: schedule.build()?,
            base,
            joint_base: BTreeMap::new(),
            adapters: Vec::new(),
            next_id: 0,
            joint_weight: F::one(),
            combination: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn base(&self) -> &Params<F> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Params<F> {
        &mut self.base
    }

    pub fn joint_base(&self) -> &BTreeMap<String, AttentionWeights<F>> {
        &self.joint_base
    }

    pub(crate) fn set_joint_base(&mut self, copies: BTreeMap<String, AttentionWeights<F>>) {
        self.joint_base = copies;
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AdapterSet<F>> {
        self.adapters.iter().map(|(_, s)| s)
    }

    pub fn adapter_ids(&self) -> Vec<AdapterId> {
        self.adapters.iter().map(|(id, _)| *id).collect()
    }

    pub fn num_adapters(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapter(&self, slot: usize) -> Option<&AdapterSet<F>> {
        self.adapters.get(slot).map(|(_, s)| s)
    }

    pub fn adapter_mut(&mut self, slot: usize) -> Option<&mut AdapterSet<F>> {
        self.adapters.get_mut(slot).map(|(_, s)| s)
    }

    pub(crate) fn push_adapter(&mut self, set: AdapterSet<F>) -> AdapterId {
        let id = AdapterId(self.next_id);
        self.next_id += 1;
        self.adapters.push((id, set));
        self.combination = None;
        id
    }

    pub(crate) fn remove_adapter(&mut self, id: AdapterId) -> Option<AdapterSet<F>> {
        let pos = self.adapters.iter().position(|(i, _)| *i == id)?;
        self.combination = None;
        Some(self.adapters.remove(pos).1)
    }

    pub fn joint_weight(&self) -> F {
        self.joint_weight
    }

    /// Global multiplier on joint features; 0 decouples the branches.
    pub fn set_joint_weight(&mut self, w: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!("joint weight {w} outside [0, 1]")));
        }
        self.joint_weight = F::lit(w);
        Ok(())
    }

    /// Per-condition `(w_xc, w_cx)`, one pair per attached adapter set.
    /// `None` restores `(1, 1)` everywhere.
    pub fn set_combination_weights(&mut self, weights: Option<&[(f64, f64)]>) -> Result<()> {
        self.combination = match weights {
            None => None,
            Some(ws) => Some(self.check_combination(ws)?),
        };
        Ok(())
    }

    fn check_combination(&self, ws: &[(f64, f64)]) -> Result<Vec<(F, F)>> {
        if ws.len() != self.adapters.len() {
            return Err(Error::Combination(format!(
                "{} weight pairs for {} attached adapter sets",
                ws.len(),
                self.adapters.len()
            )));
        }
        if ws.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Combination("combination weights must be finite".into()));
        }
        Ok(ws.iter().map(|&(a, b)| (F::lit(a), F::lit(b))).collect())
    }

    pub fn num_base_parameters(&self) -> usize {
        self.base.num_elements()
    }

    pub fn num_adapter_parameters(&self) -> usize {
        self.adapters().map(|s| s.num_parameters()).sum()
    }

    /// Builds the forward graph. Branch 0 is the target; branch `c ≥ 1` is
    /// a condition served by adapter slot `c − 1`. Every branch shares
    /// `geo`. Returns one `ε̂` token matrix per branch.
    pub fn forward(&self, cx: &mut Ctx<F>, geo: Geometry, branches: &[BranchVar]) -> Result<Vec<Var>> {
        self.forward_with(cx, geo, branches, &JointOverrides::default())
    }

    /// [`JointDenoiser::forward`] with per-call joint weight and combination
    /// weights in place of the stored ones.
    pub fn forward_with(
        &self,
        cx: &mut Ctx<F>,
        geo: Geometry,
        branches: &[BranchVar],
        overrides: &JointOverrides,
    ) -> Result<Vec<Var>> {
        if branches.is_empty() {
            return Err(Error::MissingInput("no branches".into()));
        }
        if branches.len() - 1 > self.adapters.len() {
            return Err(Error::Combination(format!(
                "{} condition branches but {} adapter sets attached",
                branches.len() - 1,
                self.adapters.len()
            )));
        }
        let p = self.config.patch_size;
        if !geo.height.is_multiple_of(p) || !geo.width.is_multiple_of(p) {
            return shape_err(format!(
                "image {}x{} not divisible by patch size {p}",
                geo.height, geo.width
            ));
        }
        if geo.height / p < 2usize.pow(self.config.levels as u32 - 1) && self.config.levels > 1 {
            return shape_err("image too small for the number of levels");
        }
        for b in branches {
            if cx.graph.value(b.tokens).dim() != (geo.rows(), self.config.channels_in) {
                return shape_err(format!(
                    "branch tokens {:?} vs expected {:?}",
                    cx.graph.value(b.tokens).dim(),
                    (geo.rows(), self.config.channels_in)
                ));
            }
            if b.timesteps.len() != geo.samples {
                return shape_err(format!(
                    "{} timesteps for {} samples",
                    b.timesteps.len(),
                    geo.samples
                ));
            }
            for &t in b.timesteps {
                self.schedule.check_timestep(t)?;
            }
        }
        let jw = match overrides.joint_weight {
            Some(w) if (0.0..=1.0).contains(&w) => F::lit(w),
            Some(w) => return Err(Error::Config(format!("joint weight {w} outside [0, 1]"))),
            None => self.joint_weight,
        };
        let combination = match &overrides.combination {
            Some(ws) => Some(self.check_combination(ws)?),
            None => self.combination.clone(),
        };
        let weights = (0..branches.len() - 1)
            .map(|c| {
                let (a, b) = combination
                    .as_ref()
                    .map(|v| v[c])
                    .unwrap_or((F::one(), F::one()));
                (a * jw, b * jw)
            })
            .collect();
        let fwd = Fwd { m: self, weights };
        Ok(fwd.run(cx, geo, branches))
    }

    /// Array-level noise prediction for every branch.
    pub fn predict(&self, branches: &[BranchInput<F>]) -> Result<Vec<Array4<F>>> {
        let first = branches
            .first()
            .ok_or_else(|| Error::MissingInput("no branches".into()))?;
        let (n, c, h, w) = first.z.dim();
        if c != self.config.channels_in {
            return shape_err(format!("{c} channels, model expects {}", self.config.channels_in));
        }
        if branches.iter().any(|b| b.z.dim() != (n, c, h, w)) {
            return Err(Error::Alignment("all branches must share (N, C, H, W)".into()));
        }
        let geo = Geometry::new(n, h, w);
        let mut cx = Ctx::inference();
        let vars: Vec<BranchVar> = branches
            .iter()
            .map(|b| BranchVar {
                tokens: cx.graph.constant(to_tokens(b.z)),
                timesteps: b.timesteps,
            })
            .collect();
        let outs = self.forward(&mut cx, geo, &vars)?;
        Ok(outs
            .into_iter()
            .map(|v| from_tokens(cx.graph.value(v), geo))
            .collect())
    }
}

/// Sinusoidal embedding of integer timesteps, `N × dim`.
pub fn timestep_embedding<F: Scalar>(timesteps: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    Array2::from_shape_fn((timesteps.len(), dim), |(n, j)| {
        let i = j % half;
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = timesteps[n] as f64 * freq;
        F::lit(if j < half { a.sin() } else { a.cos() })
    })
}

struct Fwd<'m, F: Scalar> {
    m: &'m JointDenoiser<F>,
    weights: Vec<(F, F)>,
}

impl<F: Scalar> Fwd<'_, F> {
    fn p(&self, cx: &mut Ctx<F>, name: &str) -> Var {
        cx.bind(name, self.m.base.expect(name), ParamKind::Base)
    }

    fn linear(&self, cx: &mut Ctx<F>, x: Var, prefix: &str) -> Var {
        let w = self.p(cx, &format!("{prefix}.weight"));
        let b = self.p(cx, &format!("{prefix}.bias"));
        let y = cx.graph.matmul_bt(x, w);
        cx.graph.add_row(y, b)
    }

    fn conv(&self, cx: &mut Ctx<F>, x: Var, geo: Geometry, stride: usize, prefix: &str) -> (Var, Geometry) {
        let cin = cx.graph.value(x).ncols();
        let map = cx.gather_map((geo, cin, stride, 0), || conv3x3_map(geo, cin, stride));
        let cols = cx.graph.gather(x, map);
        (self.linear(cx, cols, prefix), geo.strided(stride))
    }

    fn affine(&self, cx: &mut Ctx<F>, x: Var, prefix: &str) -> Var {
        let gamma = self.p(cx, &format!("{prefix}.gamma"));
        let beta = self.p(cx, &format!("{prefix}.beta"));
        let y = cx.graph.mul_row(x, gamma);
        cx.graph.add_row(y, beta)
    }

    fn group_norm(&self, cx: &mut Ctx<F>, x: Var, samples: usize, prefix: &str) -> Var {
        let y = cx.graph.group_norm(x, samples, self.m.config.norm_groups);
        self.affine(cx, y, prefix)
    }

    fn layer_norm(&self, cx: &mut Ctx<F>, x: Var, prefix: &str) -> Var {
        let y = cx.graph.layer_norm(x);
        self.affine(cx, y, prefix)
    }

    fn time_embed(&self, cx: &mut Ctx<F>, timesteps: &[usize]) -> Var {
        let e = cx
            .graph
            .constant(timestep_embedding(timesteps, self.m.config.time_embed_dim));
        let h = self.linear(cx, e, "time.lin1");
        let h = cx.graph.silu(h);
        let h = self.linear(cx, h, "time.lin2");
        cx.graph.silu(h)
    }

    fn resblock(&self, cx: &mut Ctx<F>, x: Var, geo: Geometry, temb: Var, prefix: &str) -> Var {
        let h = self.group_norm(cx, x, geo.samples, &format!("{prefix}.norm1"));
        let h = cx.graph.silu(h);
        let (h, _) = self.conv(cx, h, geo, 1, &format!("{prefix}.conv1"));
        let e = self.linear(cx, temb, &format!("{prefix}.temb"));
        let h = cx.graph.add_per_sample(h, e);
        let h = self.group_norm(cx, h, geo.samples, &format!("{prefix}.norm2"));
        let h = cx.graph.silu(h);
        let (h, _) = self.conv(cx, h, geo, 1, &format!("{prefix}.conv2"));
        let skip = if cx.graph.value(x).ncols() != self.m.config.base_width {
            self.linear(cx, x, &format!("{prefix}.skip"))
        } else {
            x
        };
        cx.graph.add(skip, h)
    }

    /// `W + scale·B·A` on the graph, or `W` without an adapter.
    fn adapted(&self, cx: &mut Ctx<F>, w: Var, slot: usize, ad: Option<&LoraAdapter<F>>) -> Var {
        let Some(ad) = ad else { return w };
        let a = cx.bind(&format!("@{slot}/{}", ad.a_name()), &ad.a, ParamKind::Adapter);
        let b = cx.bind(&format!("@{slot}/{}", ad.b_name()), &ad.b, ParamKind::Adapter);
        let ba = cx.graph.matmul(b, a);
        let ba = if ad.scale == F::one() {
            ba
        } else {
            cx.graph.scale(ba, ad.scale)
        };
        cx.graph.add(w, ba)
    }

    fn self_attention(&self, cx: &mut Ctx<F>, n: Var, samples: usize, site: &str, branch: usize) -> Var {
        let set = branch.checked_sub(1).map(|s| (s, &self.m.adapters[s].1));
        let proj = |cx: &mut Ctx<F>, name: &str| {
            let target = format!("{site}.selfattn.{name}");
            let w = self.p(cx, &target);
            match set {
                Some((slot, s)) => self.adapted(cx, w, slot, s.lora(&target, LoraRole::Y)),
                None => w,
            }
        };
        let wq = proj(cx, "W_Q");
        let wk = proj(cx, "W_K");
        let wv = proj(cx, "W_V");
        let wo = proj(cx, "W_O");
        let bo = self.p(cx, &format!("{site}.selfattn.b_O"));
        let q = cx.graph.matmul_bt(n, wq);
        let k = cx.graph.matmul_bt(n, wk);
        let v = cx.graph.matmul_bt(n, wv);
        let o = cx.graph.attention(q, k, v, samples, self.m.config.attn_heads);
        let o = cx.graph.matmul_bt(o, wo);
        cx.graph.add_row(o, bo)
    }

    fn joint_vars(&self, cx: &mut Ctx<F>, site: &str, slot: usize) -> JointVars {
        let base = &self.m.joint_base[site];
        let set = &self.m.adapters[slot].1;
        let mut frozen = BTreeMap::new();
        for (name, t) in base.named() {
            frozen.insert(name, cx.bind(&format!("{site}.joint.{name}"), t, ParamKind::Frozen));
        }
        let eff = |cx: &mut Ctx<F>, name: &str, role: LoraRole| {
            let target = format!("{site}.joint.{name}");
            self.adapted(cx, frozen[name], slot, set.lora(&target, role))
        };
        let q_x = eff(cx, "W_Q", LoraRole::Xy);
        let k_x = eff(cx, "W_K", LoraRole::Xy);
        let v_x = eff(cx, "W_V", LoraRole::Xy);
        let q_y = eff(cx, "W_Q", LoraRole::Yx);
        let k_y = eff(cx, "W_K", LoraRole::Yx);
        let v_y = eff(cx, "W_V", LoraRole::Yx);
        let bind = |cx: &mut Ctx<F>, name: String| {
            let t = set
                .proj_out
                .get(&name)
                .unwrap_or_else(|| panic!("missing {name}"));
            cx.bind(&format!("@{slot}/{name}"), t, ParamKind::Adapter)
        };
        let proj = if set.meta.aligned {
            ProjVars::Aligned(
                bind(cx, format!("{site}.joint.proj_out.weight")),
                bind(cx, format!("{site}.joint.proj_out.bias")),
            )
        } else {
            ProjVars::Separate(
                bind(cx, format!("{site}.joint.proj_out_x.weight")),
                bind(cx, format!("{site}.joint.proj_out_x.bias")),
                bind(cx, format!("{site}.joint.proj_out_y.weight")),
                bind(cx, format!("{site}.joint.proj_out_y.bias")),
            )
        };
        JointVars {
            q_x,
            k_x,
            v_x,
            q_y,
            k_y,
            v_y,
            w_o: frozen["W_O"],
            b_o: frozen["b_O"],
            proj,
        }
    }

    fn site(&self, cx: &mut Ctx<F>, hs: Vec<Var>, samples: usize, site: &str) -> Vec<Var> {
        let normed: Vec<Var> = hs
            .iter()
            .map(|&h| self.layer_norm(cx, h, &format!("{site}.norm1")))
            .collect();
        let mut outs: Vec<Var> = normed
            .iter()
            .enumerate()
            .map(|(b, &n)| self.self_attention(cx, n, samples, site, b))
            .collect();
        if hs.len() > 1 && self.m.config.has_joint(site) {
            let mut fx_total: Option<Var> = None;
            for c in 1..hs.len() {
                let (w_xc, w_cx) = self.weights[c - 1];
                if w_xc == F::zero() && w_cx == F::zero() {
                    continue;
                }
                let jv = self.joint_vars(cx, site, c - 1);
                let (fx, fc) = joint_pair(
                    &mut cx.graph,
                    normed[0],
                    normed[c],
                    &jv,
                    samples,
                    self.m.config.attn_heads,
                );
                if w_xc != F::zero() {
                    let fx = scaled(&mut cx.graph, fx, w_xc);
                    fx_total = Some(match fx_total {
                        Some(acc) => cx.graph.add(acc, fx),
                        None => fx,
                    });
                }
                if w_cx != F::zero() {
                    let fc = scaled(&mut cx.graph, fc, w_cx);
                    outs[c] = cx.graph.add(outs[c], fc);
                }
            }
            if let Some(fx) = fx_total {
                outs[0] = cx.graph.add(outs[0], fx);
            }
        }
        hs.iter()
            .zip(outs)
            .map(|(&h, o)| {
                let h = cx.graph.add(h, o);
                let n = self.layer_norm(cx, h, &format!("{site}.norm2"));
                let f = self.linear(cx, n, &format!("{site}.ff.w1"));
                let f = cx.graph.silu(f);
                let f = self.linear(cx, f, &format!("{site}.ff.w2"));
                cx.graph.add(h, f)
            })
            .collect()
    }

    fn run(&self, cx: &mut Ctx<F>, geo: Geometry, branches: &[BranchVar]) -> Vec<Var> {
        let cfg = &self.m.config;
        let (c, p, l_count) = (cfg.channels_in, cfg.patch_size, cfg.levels);
        let coarse0 = Geometry::new(geo.samples, geo.height / p, geo.width / p);
        let pmap = cx.gather_map((geo, c, p, 1), || patchify_map(geo, c, p).0);
        let tembs: Vec<Var> = branches
            .iter()
            .map(|b| self.time_embed(cx, b.timesteps))
            .collect();
        let mut hs: Vec<Var> = branches
            .iter()
            .map(|b| {
                let t = cx.graph.gather(b.tokens, pmap.clone());
                self.conv(cx, t, coarse0, 1, "conv_in").0
            })
            .collect();
        let mut g = coarse0;
        let mut skips: Vec<(Vec<Var>, Geometry)> = Vec::new();
        for l in 0..l_count {
            hs = hs
                .iter()
                .zip(&tembs)
                .map(|(&h, &e)| self.resblock(cx, h, g, e, &format!("down{l}.res")))
                .collect();
            hs = self.site(cx, hs, g.samples, &format!("down{l}.attn"));
            skips.push((hs.clone(), g));
            if l + 1 < l_count {
                let mut next = g;
                hs = hs
                    .iter()
                    .map(|&h| {
                        let (v, ng) = self.conv(cx, h, g, 2, &format!("down{l}.downsample"));
                        next = ng;
                        v
                    })
                    .collect();
                g = next;
            }
        }
        hs = hs
            .iter()
            .zip(&tembs)
            .map(|(&h, &e)| self.resblock(cx, h, g, e, "mid.res"))
            .collect();
        for l in (0..l_count).rev() {
            let (skip, sg) = &skips[l];
            debug_assert_eq!(*sg, g);
            hs = hs
                .iter()
                .zip(skip)
                .zip(&tembs)
                .map(|((&h, &s), &e)| {
                    let cat = cx.graph.concat_cols(&[h, s]);
                    self.resblock(cx, cat, g, e, &format!("up{l}.res"))
                })
                .collect();
            hs = self.site(cx, hs, g.samples, &format!("up{l}.attn"));
            if l > 0 {
                let to = skips[l - 1].1;
                let w = cfg.base_width;
                let from = g;
                let key = (from, w, to.height * 65_536 + to.width, 3);
                let rmap = cx.gather_map(key, || resize_nearest_map(from, to, w));
                hs = hs
                    .iter()
                    .map(|&h| {
                        let up = cx.graph.gather(h, rmap.clone());
                        self.conv(cx, up, to, 1, &format!("up{l}.upsample")).0
                    })
                    .collect();
                g = to;
            }
        }
        let umap = cx.gather_map((geo, c, p, 2), || unpatchify_map(geo, c, p));
        hs.iter()
            .map(|&h| {
                let h = self.group_norm(cx, h, g.samples, "out.norm");
                let h = cx.graph.silu(h);
                let (h, _) = self.conv(cx, h, g, 1, "conv_out");
                cx.graph.gather(h, umap.clone())
            })
            .collect()
    }
}

fn scaled<F: Scalar>(g: &mut Graph<F>, v: Var, c: F) -> Var {
    if c == F::one() {
        v
    } else {
        g.scale(v, c)
    }
}
