//! Low-rank adaptation: condition-branch LoRA, joint-attention LoRA pairs,
//! zero-initialized output projections, and attach/detach on a denoiser.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionWeights, JointAttnModule, JointDenoiser, ProjOut};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::rng::normal;
use crate::scalar::Scalar;

/// Which projection family an adapter modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraRole {
    /// Condition-branch self-attention.
    Y,
    /// Joint attention, projections applied to x features.
    Xy,
    /// Joint attention, projections applied to y features.
    Yx,
}

impl LoraRole {
    fn tag(self) -> &'static str {
        match self {
            LoraRole::Y => "lora_y",
            LoraRole::Xy => "lora_xy",
            LoraRole::Yx => "lora_yx",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "lora_y" => Some(LoraRole::Y),
            "lora_xy" => Some(LoraRole::Xy),
            "lora_yx" => Some(LoraRole::Yx),
            _ => None,
        }
    }
}

/// `ΔW = scale · B · A` on the `(d_out, d_in)` matrix named `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub target: String,
    pub role: LoraRole,
    /// `rank × d_in`
    pub a: Array2<F>,
    /// `d_out × rank`
    pub b: Array2<F>,
    pub scale: F,
}

impl<F: Scalar> LoraAdapter<F> {
    /// `A` is drawn from `N(0, 1/d_in)`, `B` starts at zero so the delta is
    /// zero when attached.
    pub fn new<R: Rng + ?Sized>(
        target: impl Into<String>,
        role: LoraRole,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: F,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Adapter(format!(
                "rank {rank} must be in 1..={}",
                d_in.min(d_out)
            )));
        }
        let std = F::lit(1.0 / (d_in as f64).sqrt());
        let a = Array2::from_shape_simple_fn((rank, d_in), || normal::<F, _>(rng) * std);
        Ok(Self {
            target: target.into(),
            role,
            a,
            b: Array2::zeros((d_out, rank)),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn a_name(&self) -> String {
        format!("{}.{}.A", self.target, self.role.tag())
    }

    pub fn b_name(&self) -> String {
        format!("{}.{}.B", self.target, self.role.tag())
    }

    pub fn delta(&self) -> Array2<F> {
        self.b.dot(&self.a) * self.scale
    }

    pub fn num_parameters(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `W_base + scale · B · A`. Never mutates `W_base`.
pub fn effective_weight<F: Scalar>(w_base: &Array2<F>, adapter: &LoraAdapter<F>) -> Result<Array2<F>> {
    let (d_out, d_in) = w_base.dim();
    if adapter.a.ncols() != d_in || adapter.b.nrows() != d_out || adapter.a.nrows() != adapter.b.ncols() {
        return Err(Error::Adapter(format!(
            "{}: adapter A {:?} / B {:?} incompatible with weight {:?}",
            adapter.target,
            adapter.a.dim(),
            adapter.b.dim(),
            w_base.dim()
        )));
    }
    Ok(w_base + &adapter.delta())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub base_fingerprint: String,
    pub aligned: bool,
    pub rank: usize,
    pub scale: f64,
    /// Whether the condition branch carries its own LoRA.
    pub y_lora: bool,
    /// Attention sites that carry joint attention.
    pub sites: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterOptions {
    pub rank: usize,
    pub scale: f64,
    /// Add condition-branch LoRA; skip it when the condition is itself a
    /// natural image.
    pub y_lora: bool,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 1.0,
            y_lora: true,
        }
    }
}

impl AdapterOptions {
    /// Rank used for full-size adapters.
    pub fn parity() -> Self {
        Self {
            rank: 64,
            ..Self::default()
        }
    }
}

/// Everything one conditional model adds on top of a frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<F> {
    pub y_lora: Vec<LoraAdapter<F>>,
    pub xy_lora: Vec<LoraAdapter<F>>,
    pub yx_lora: Vec<LoraAdapter<F>>,
    /// Zero-initialized joint output projections, named
    /// `<site>.joint.proj_out.{weight,bias}` when aligned and
    /// `<site>.joint.proj_out_{x,y}.{weight,bias}` otherwise.
    pub proj_out: Params<F>,
    pub meta: AdapterMeta,
}

const PROJ: [&str; 3] = ["W_Q", "W_K", "W_V"];
const SELF_PROJ: [&str; 4] = ["W_Q", "W_K", "W_V", "W_O"];

impl<F: Scalar> AdapterSet<F> {
    pub fn new<R: Rng + ?Sized>(
        model: &JointDenoiser<F>,
        opts: &AdapterOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = model.config();
        let w = cfg.base_width;
        let scale = F::lit(opts.scale);
        let sites = cfg.joint_site_names();
        let mut set = AdapterSet {
            y_lora: Vec::new(),
            xy_lora: Vec::new(),
            yx_lora: Vec::new(),
            proj_out: Params::new(),
            meta: AdapterMeta {
                base_fingerprint: model.base().fingerprint(),
                aligned: cfg.aligned,
                rank: opts.rank,
                scale: opts.scale,
                y_lora: opts.y_lora,
                sites: sites.clone(),
            },
        };
        if opts.y_lora {
            for site in cfg.site_names() {
                for p in SELF_PROJ {
                    let target = format!("{site}.selfattn.{p}");
                    set.y_lora
                        .push(LoraAdapter::new(target, LoraRole::Y, w, w, opts.rank, scale, rng)?);
                }
            }
        }
        for site in &sites {
            for p in PROJ {
                let target = format!("{site}.joint.{p}");
                set.xy_lora
                    .push(LoraAdapter::new(target.clone(), LoraRole::Xy, w, w, opts.rank, scale, rng)?);
                set.yx_lora
                    .push(LoraAdapter::new(target, LoraRole::Yx, w, w, opts.rank, scale, rng)?);
            }
            match ProjOut::<F>::zeros(w, cfg.aligned) {
                ProjOut::Aligned { weight, bias } => {
                    set.proj_out.insert(format!("{site}.joint.proj_out.weight"), weight);
                    set.proj_out.insert(format!("{site}.joint.proj_out.bias"), bias);
                }
                ProjOut::Separate {
                    x_weight,
                    x_bias,
                    y_weight,
                    y_bias,
                } => {
                    set.proj_out.insert(format!("{site}.joint.proj_out_x.weight"), x_weight);
                    set.proj_out.insert(format!("{site}.joint.proj_out_x.bias"), x_bias);
                    set.proj_out.insert(format!("{site}.joint.proj_out_y.weight"), y_weight);
                    set.proj_out.insert(format!("{site}.joint.proj_out_y.bias"), y_bias);
                }
            }
        }
        Ok(set)
    }

    pub fn lora(&self, target: &str, role: LoraRole) -> Option<&LoraAdapter<F>> {
        let list = match role {
            LoraRole::Y => &self.y_lora,
            LoraRole::Xy => &self.xy_lora,
            LoraRole::Yx => &self.yx_lora,
        };
        list.iter().find(|a| a.target == target)
    }

    fn all_lora(&self) -> impl Iterator<Item = &LoraAdapter<F>> {
        self.y_lora.iter().chain(&self.xy_lora).chain(&self.yx_lora)
    }

    fn all_lora_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<F>> {
        self.y_lora
            .iter_mut()
            .chain(self.xy_lora.iter_mut())
            .chain(self.yx_lora.iter_mut())
    }

    /// The projection module of one joint site.
    pub fn proj_out_for(&self, site: &str) -> Option<ProjOut<F>> {
        if self.meta.aligned {
            Some(ProjOut::Aligned {
                weight: self.proj_out.get(&format!("{site}.joint.proj_out.weight"))?.clone(),
                bias: self.proj_out.get(&format!("{site}.joint.proj_out.bias"))?.clone(),
            })
        } else {
            Some(ProjOut::Separate {
                x_weight: self.proj_out.get(&format!("{site}.joint.proj_out_x.weight"))?.clone(),
                x_bias: self.proj_out.get(&format!("{site}.joint.proj_out_x.bias"))?.clone(),
                y_weight: self.proj_out.get(&format!("{site}.joint.proj_out_y.weight"))?.clone(),
                y_bias: self.proj_out.get(&format!("{site}.joint.proj_out_y.bias"))?.clone(),
            })
        }
    }

    /// Flat view of every trainable tensor, keyed by checkpoint name.
    pub fn tensors(&self) -> Params<F> {
        let mut out = self.proj_out.clone();
        for a in self.all_lora() {
            out.insert(a.a_name(), a.a.clone());
            out.insert(a.b_name(), a.b.clone());
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        if self.proj_out.get(name).is_some() {
            return self.proj_out.get_mut(name);
        }
        for a in self.all_lora_mut() {
            if a.a_name() == name {
                return Some(&mut a.a);
            }
            if a.b_name() == name {
                return Some(&mut a.b);
            }
        }
        None
    }

    /// Rebuilds a set from flat tensors, the inverse of [`AdapterSet::tensors`].
    pub fn from_tensors(meta: AdapterMeta, tensors: &Params<F>) -> Result<Self> {
        let mut set = AdapterSet {
            y_lora: Vec::new(),
            xy_lora: Vec::new(),
            yx_lora: Vec::new(),
            proj_out: Params::new(),
            meta,
        };
        let scale = F::lit(set.meta.scale);
        let mut pending: BTreeMap<(String, LoraRole), (Option<Array2<F>>, Option<Array2<F>>)> =
            BTreeMap::new();
        for (name, t) in tensors.iter() {
            if name.contains(".joint.proj_out") {
                set.proj_out.insert(name.clone(), t.clone());
                continue;
            }
            let parts: Vec<&str> = name.rsplitn(3, '.').collect();
            let (which, tag, target) = match parts.as_slice() {
                [which, tag, target] => (*which, *tag, *target),
                _ => return Err(Error::Adapter(format!("unrecognized adapter tensor {name}"))),
            };
            let role = LoraRole::from_tag(tag)
                .ok_or_else(|| Error::Adapter(format!("unrecognized adapter tensor {name}")))?;
            let slot = pending.entry((target.to_string(), role)).or_default();
            match which {
                "A" => slot.0 = Some(t.clone()),
                "B" => slot.1 = Some(t.clone()),
                _ => return Err(Error::Adapter(format!("unrecognized adapter tensor {name}"))),
            }
        }
        for ((target, role), (a, b)) in pending {
            let (Some(a), Some(b)) = (a, b) else {
                return Err(Error::Adapter(format!("{target}: incomplete A/B pair")));
            };
            let adapter = LoraAdapter {
                target,
                role,
                a,
                b,
                scale,
            };
            match role {
                LoraRole::Y => set.y_lora.push(adapter),
                LoraRole::Xy => set.xy_lora.push(adapter),
                LoraRole::Yx => set.yx_lora.push(adapter),
            }
        }
        Ok(set)
    }

    pub fn num_parameters(&self) -> usize {
        self.proj_out.num_elements() + self.all_lora().map(|a| a.num_parameters()).sum::<usize>()
    }

    /// Every target must name a matrix of the host model and no
    /// `(target, role)` pair may repeat.
    pub fn validate(&self, model: &JointDenoiser<F>) -> Result<()> {
        let mut seen = HashSet::new();
        let joint_sites: HashSet<String> = model.config().site_names().into_iter().collect();
        for a in self.all_lora() {
            if !seen.insert((a.target.clone(), a.role)) {
                return Err(Error::Adapter(format!("duplicate adapter {} ({:?})", a.target, a.role)));
            }
            let base_shape = match a.role {
                LoraRole::Y => model.base().get(&a.target).map(|w| w.dim()),
                LoraRole::Xy | LoraRole::Yx => {
                    let selfattn = a.target.replace(".joint.", ".selfattn.");
                    let site = a.target.split(".joint.").next().unwrap_or("");
                    if joint_sites.contains(site) {
                        model.base().get(&selfattn).map(|w| w.dim())
                    } else {
                        None
                    }
                }
            };
            let Some((d_out, d_in)) = base_shape else {
                return Err(Error::Adapter(format!("target {} not found in model", a.target)));
            };
            if a.a.ncols() != d_in || a.b.nrows() != d_out || a.a.nrows() != a.b.ncols() {
                return Err(Error::Shape(format!(
                    "{}: adapter shapes {:?}/{:?} vs weight {:?}",
                    a.target,
                    a.a.dim(),
                    a.b.dim(),
                    (d_out, d_in)
                )));
            }
        }
        if self.meta.aligned != model.config().aligned {
            return Err(Error::Shape("adapter alignment flag differs from model".into()));
        }
        let w = model.config().base_width;
        for site in &self.meta.sites {
            let expected = ProjOut::<F>::zeros(w, self.meta.aligned);
            let got = self
                .proj_out_for(site)
                .ok_or_else(|| Error::Adapter(format!("missing proj_out for {site}")))?;
            if !expected.same_shape(&got) {
                return Err(Error::Shape(format!("proj_out shape mismatch at {site}")));
            }
        }
        Ok(())
    }
}

/// Identifies an attached adapter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AdapterId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttachReport {
    pub id: AdapterId,
    /// The set was trained on a base with different parameter names or shapes
    /// hashes; it still attaches when every shape matches.
    pub fingerprint_mismatch: bool,
}

/// Attaches `set` as the next condition slot of `model`. Joint attention
/// weights are (re)initialized from the model's own self-attention.
pub fn attach<F: Scalar>(model: &mut JointDenoiser<F>, set: AdapterSet<F>) -> Result<AttachReport> {
    set.validate(model)?;
    let fingerprint_mismatch = set.meta.base_fingerprint != model.base().fingerprint();
    if fingerprint_mismatch {
        log::warn!("adapter was trained on a different base fingerprint; attaching by shape");
    }
    if model.joint_base().is_empty() {
        init_joint_from_self_attention(model);
    }
    let id = model.push_adapter(set);
    Ok(AttachReport {
        id,
        fingerprint_mismatch,
    })
}

pub fn detach<F: Scalar>(model: &mut JointDenoiser<F>, id: AdapterId) -> Result<AdapterSet<F>> {
    model
        .remove_adapter(id)
        .ok_or_else(|| Error::Adapter(format!("adapter {id:?} is not attached")))
}

/// Copies every self-attention site's weights into the joint module of the
/// same site and returns the resulting modules with zero output projection.
pub fn init_joint_from_self_attention<F: Scalar>(
    model: &mut JointDenoiser<F>,
) -> BTreeMap<String, JointAttnModule<F>> {
    let cfg = model.config().clone();
    let mut copies = BTreeMap::new();
    let mut modules = BTreeMap::new();
    for site in cfg.joint_site_names() {
        let weights = AttentionWeights::from_params(model.base(), &format!("{site}.selfattn"));
        modules.insert(
            site.clone(),
            JointAttnModule {
                site: site.clone(),
                base_weights: weights.clone(),
                proj_out: ProjOut::zeros(cfg.base_width, cfg.aligned),
                joint_weight: model.joint_weight(),
                aligned: cfg.aligned,
                heads: cfg.attn_heads,
            },
        );
        copies.insert(site, weights);
    }
    model.set_joint_base(copies);
    modules
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_delta_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = LoraAdapter::<f64>::new("w", LoraRole::Y, 5, 4, 2, 1.0, &mut rng).unwrap();
        let w = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64);
        assert_eq!(effective_weight(&w, &ad).unwrap(), w);
    }

    #[test]
    fn unit_outer_product() {
        let ad = LoraAdapter {
            target: "w".into(),
            role: LoraRole::Xy,
            a: array![[1.0, 0.0, 0.0]],
            b: array![[1.0], [0.0]],
            scale: 2.0,
        };
        let w = Array2::<f64>::ones((2, 3));
        let e = effective_weight(&w, &ad).unwrap();
        assert_eq!(e, array![[3.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        assert_eq!(w, Array2::<f64>::ones((2, 3)));
    }

    #[test]
    fn dense_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ad = LoraAdapter::<f64>::new("w", LoraRole::Yx, 6, 5, 4, 0.5, &mut rng).unwrap();
        ad.b = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let w = Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - j as f64) * 0.1);
        let got = effective_weight(&w, &ad).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let mut acc = 0.0;
                for r in 0..4 {
                    acc += ad.b[[i, r]] * ad.a[[r, j]];
                }
                assert!((got[[i, j]] - (w[[i, j]] + 0.5 * acc)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_and_rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ad = LoraAdapter::<f32>::new("w", LoraRole::Y, 3, 3, 2, 1.0, &mut rng).unwrap();
        assert!(matches!(
            effective_weight(&Array2::zeros((4, 3)), &ad),
            Err(Error::Adapter(_))
        ));
        assert!(LoraAdapter::<f32>::new("w", LoraRole::Y, 3, 2, 3, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::<f32>::new("w", LoraRole::Y, 3, 2, 0, 1.0, &mut rng).is_err());
    }
}
