//! Layer plumbing shared by the denoiser: named parameter storage, token
//! geometry, gather maps for convolutions and resampling, and the binding
//! context that puts parameters onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{Array2, Array4, ArrayView4};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{GatherMap, Gradients, Graph, Var};
use crate::rng::normal;
use crate::scalar::Scalar;

/// Named 2-D parameter tensors. Biases and norm affines are `1 × C` rows,
/// weights are `(out, in)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<F> {
    tensors: BTreeMap<String, Array2<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn expect(&self, name: &str) -> &Array2<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes and values. Used to prove that frozen
    /// tensors were not touched.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over names and shapes only.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(b":");
            h.update(format!("{}x{};", t.nrows(), t.ncols()).as_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weight init: normal with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn init_weight<F: Scalar, R: Rng + ?Sized>(
    out: usize,
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Array2<F> {
    let std = F::lit(gain / (fan_in as f64).sqrt());
    Array2::from_shape_simple_fn((out, fan_in), || normal::<F, _>(rng) * std)
}

/// Spatial layout of a token matrix: `samples · height · width` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(samples: usize, height: usize, width: usize) -> Self {
        Self {
            samples,
            height,
            width,
        }
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.samples * self.height * self.width
    }

    fn row(&self, n: usize, y: usize, x: usize) -> usize {
        (n * self.height + y) * self.width + x
    }

    /// Output geometry of a stride-`s`, padding-1, 3×3 convolution.
    pub fn strided(&self, stride: usize) -> Geometry {
        Geometry::new(
            self.samples,
            self.height.div_ceil(stride),
            self.width.div_ceil(stride),
        )
    }
}

/// `(N, C, H, W)` images to `(N·H·W, C)` tokens.
pub fn to_tokens<F: Scalar>(images: ArrayView4<F>) -> Array2<F> {
    let (n, c, h, w) = images.dim();
    let mut out = Array2::zeros((n * h * w, c));
    for ((ni, ci, y, x), &v) in images.indexed_iter() {
        out[[(ni * h + y) * w + x, ci]] = v;
    }
    out
}

pub fn from_tokens<F: Scalar>(tokens: &Array2<F>, geo: Geometry) -> Array4<F> {
    let c = tokens.ncols();
    let (h, w) = (geo.height, geo.width);
    Array4::from_shape_fn((geo.samples, c, h, w), |(n, ci, y, x)| {
        tokens[[(n * h + y) * w + x, ci]]
    })
}

/// im2col map for a 3×3, padding-1 convolution with the given stride.
/// Output column block `k = 3·ky + kx` holds the input pixel at offset
/// `(ky − 1, kx − 1)`.
pub fn conv3x3_map(geo: Geometry, channels: usize, stride: usize) -> GatherMap {
    let out = geo.strided(stride);
    let mut entries = Vec::with_capacity(out.rows() * 9);
    for n in 0..out.samples {
        for oy in 0..out.height {
            for ox in 0..out.width {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < geo.height
                            && (ix as usize) < geo.width;
                        entries.push(
                            inside.then(|| (geo.row(n, iy as usize, ix as usize) as u32, 0)),
                        );
                    }
                }
            }
        }
    }
    GatherMap {
        rows_in: geo.rows(),
        blocks_in: 1,
        rows_out: out.rows(),
        blocks_out: 9,
        block_width: channels,
        entries,
    }
}

/// Space-to-depth with a `p × p` patch. Returns the map and the coarse geometry.
pub fn patchify_map(geo: Geometry, channels: usize, p: usize) -> (GatherMap, Geometry) {
    assert!(geo.height.is_multiple_of(p) && geo.width.is_multiple_of(p), "patch size must divide image");
    let out = Geometry::new(geo.samples, geo.height / p, geo.width / p);
    let mut entries = Vec::with_capacity(out.rows() * p * p);
    for n in 0..out.samples {
        for y in 0..out.height {
            for x in 0..out.width {
                for dy in 0..p {
                    for dx in 0..p {
                        entries.push(Some((geo.row(n, y * p + dy, x * p + dx) as u32, 0)));
                    }
                }
            }
        }
    }
    (
        GatherMap {
            rows_in: geo.rows(),
            blocks_in: 1,
            rows_out: out.rows(),
            blocks_out: p * p,
            block_width: channels,
            entries,
        },
        out,
    )
}

/// Inverse of [`patchify_map`]; `fine` is the full-resolution geometry.
pub fn unpatchify_map(fine: Geometry, channels: usize, p: usize) -> GatherMap {
    let coarse = Geometry::new(fine.samples, fine.height / p, fine.width / p);
    let mut entries = Vec::with_capacity(fine.rows());
    for n in 0..fine.samples {
        for y in 0..fine.height {
            for x in 0..fine.width {
                let block = (y % p) * p + (x % p);
                entries.push(Some((coarse.row(n, y / p, x / p) as u32, block as u32)));
            }
        }
    }
    GatherMap {
        rows_in: coarse.rows(),
        blocks_in: p * p,
        rows_out: fine.rows(),
        blocks_out: 1,
        block_width: channels,
        entries,
    }
}

/// Nearest-neighbour resize from `from` to `to`.
pub fn resize_nearest_map(from: Geometry, to: Geometry, channels: usize) -> GatherMap {
    let mut entries = Vec::with_capacity(to.rows());
    for n in 0..to.samples {
        for y in 0..to.height {
            for x in 0..to.width {
                let sy = y * from.height / to.height;
                let sx = x * from.width / to.width;
                entries.push(Some((from.row(n, sy, sx) as u32, 0)));
            }
        }
    }
    GatherMap {
        rows_in: from.rows(),
        blocks_in: 1,
        rows_out: to.rows(),
        blocks_out: 1,
        block_width: channels,
        entries,
    }
}

/// Which bound parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Role of a bound tensor; decides whether it is trainable in a given mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Base,
    /// Copied base weights that never train.
    Frozen,
    Adapter,
}

/// A graph plus the parameters bound onto it, keyed by name.
pub struct Ctx<F: Scalar> {
    pub graph: Graph<F>,
    bound: HashMap<String, (Var, bool)>,
    trainable: Trainable,
    maps: HashMap<(Geometry, usize, usize, u8), Rc<GatherMap>>,
}

impl<F: Scalar> Ctx<F> {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            graph: Graph::new(),
            bound: HashMap::new(),
            trainable,
            maps: HashMap::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(Trainable::Nothing)
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    /// Binds `value` under `name` once; later calls return the same node so
    /// gradients from every use accumulate.
    pub(crate) fn bind(&mut self, name: &str, value: &Array2<F>, kind: ParamKind) -> Var {
        if let Some(&(v, _)) = self.bound.get(name) {
            return v;
        }
        let train = matches!(
            (self.trainable, kind),
            (Trainable::Base, ParamKind::Base) | (Trainable::Adapters, ParamKind::Adapter)
        );
        let v = self.graph.leaf(value.clone(), train);
        self.bound.insert(name.to_string(), (v, train));
        v
    }

    /// Gradients of every trainable bound parameter, by bound name.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> BTreeMap<String, Array2<F>> {
        let mut out = BTreeMap::new();
        for (name, &(v, train)) in &self.bound {
            if train {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Array2::zeros(self.graph.value(v).dim()));
                out.insert(name.clone(), g);
            }
        }
        out
    }

    pub(crate) fn gather_map(
        &mut self,
        key: (Geometry, usize, usize, u8),
        build: impl FnOnce() -> GatherMap,
    ) -> Rc<GatherMap> {
        self.maps.entry(key).or_insert_with(|| Rc::new(build())).clone()
    }
}
