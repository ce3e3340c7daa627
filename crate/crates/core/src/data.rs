//! Synthetic paired data with known structure.
//!
//! Every pair is a pure function of `(spec, seed, index)`, so any slice of a
//! stream can be regenerated independently.

use ndarray::{s, Array2, Array3, Array4, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed, normal};
use crate::scalar::Scalar;

/// Foreground threshold of the annotator.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Bivariate normal scalars.
    GaussPair,
    /// Ellipse scene and its derived condition.
    #[default]
    Blob2d,
    /// The same ellipse at two positions.
    LooseView,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Normalized distance to the nearest foreground pixel.
    #[default]
    Distance,
    /// Sobel magnitude quantized to four levels.
    Edges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSpec {
    pub kind: PairKind,
    /// Side length of image pairs.
    pub size: usize,
    /// Correlation of `gauss_pair`.
    pub rho: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Largest per-axis translation of `loose_view`, in pixels.
    pub max_offset: usize,
    pub condition: ConditionKind,
    /// Stream seed; filled from the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            kind: PairKind::Blob2d,
            size: 16,
            rho: 0.8,
            min_shapes: 1,
            max_shapes: 3,
            max_offset: 4,
            condition: ConditionKind::Distance,
            seed: None,
        }
    }
}

const MIN_SIZE: usize = 10;

impl PairSpec {
    pub fn gauss(rho: f64, seed: u64) -> Self {
        Self {
            kind: PairKind::GaussPair,
            rho,
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn blob(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn loose(seed: u64) -> Self {
        Self {
            kind: PairKind::LooseView,
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..self.clone()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PairKind::GaussPair => {
                if !(self.rho.abs() < 1.0) {
                    return Err(Error::Config(format!("rho {} must satisfy |rho| < 1", self.rho)));
                }
            }
            PairKind::Blob2d | PairKind::LooseView => {
                if self.size < MIN_SIZE {
                    return Err(Error::Config(format!("size must be at least {MIN_SIZE}")));
                }
                if self.kind == PairKind::Blob2d
                    && (self.min_shapes == 0 || self.min_shapes > self.max_shapes)
                {
                    return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
                }
            }
        }
        Ok(())
    }

    /// `(C, H, W)` of each branch.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self.kind {
            PairKind::GaussPair => (1, 1, 1),
            _ => (1, self.size, self.size),
        }
    }

    pub fn aligned(&self) -> bool {
        self.kind != PairKind::LooseView
    }

    /// The condition is itself a natural image, so no condition-branch LoRA
    /// is needed.
    pub fn condition_is_natural(&self) -> bool {
        self.kind == PairKind::LooseView
    }

    /// Pair number `index` of the stream.
    pub fn pair<F: Scalar>(&self, index: u64) -> (Array3<F>, Array3<F>) {
        let mut rng = indexed(self.seed(), index);
        match self.kind {
            PairKind::GaussPair => {
                let a: f64 = normal(&mut rng);
                let b: f64 = normal(&mut rng);
                let y = self.rho * a + (1.0 - self.rho * self.rho).sqrt() * b;
                (
                    Array3::from_elem((1, 1, 1), F::lit(a)),
                    Array3::from_elem((1, 1, 1), F::lit(y)),
                )
            }
            PairKind::Blob2d => {
                let n = rng.random_range(self.min_shapes..=self.max_shapes);
                let mut img = Array2::<f64>::zeros((self.size, self.size));
                for _ in 0..n {
                    let e = Ellipse::random(&mut rng, self.size, 4.0, 1.5, 4.0);
                    e.render_max(&mut img);
                }
                let img = img.mapv(F::lit);
                let cond = match self.condition {
                    ConditionKind::Distance => derive_condition(img.view()),
                    ConditionKind::Edges => derive_edges(img.view()),
                };
                (img.insert_axis(ndarray::Axis(0)), cond.insert_axis(ndarray::Axis(0)))
            }
            PairKind::LooseView => {
                let margin = 4.5;
                let e = Ellipse::random(&mut rng, self.size, margin, 1.5, 3.5);
                let lo = margin;
                let hi = self.size as f64 - margin;
                let mo = self.max_offset as i64;
                let shift = |c: f64, rng: &mut crate::rng::StreamRng| {
                    let min = ((lo - c).ceil() as i64).max(-mo);
                    let max = ((hi - c).floor() as i64).min(mo);
                    rng.random_range(min..=max) as f64
                };
                let dx = shift(e.cx, &mut rng);
                let dy = shift(e.cy, &mut rng);
                let moved = Ellipse {
                    cx: e.cx + dx,
                    cy: e.cy + dy,
                    ..e
                };
                let mut a = Array2::<f64>::zeros((self.size, self.size));
                let mut b = a.clone();
                e.render_max(&mut a);
                moved.render_max(&mut b);
                (
                    a.mapv(F::lit).insert_axis(ndarray::Axis(0)),
                    b.mapv(F::lit).insert_axis(ndarray::Axis(0)),
                )
            }
        }
    }

    /// Pairs `start .. start + n` stacked as `(n, C, H, W)`.
    pub fn batch<F: Scalar>(&self, start: u64, n: usize) -> (Array4<F>, Array4<F>) {
        let (c, h, w) = self.dims();
        let mut xs = Array4::zeros((n, c, h, w));
        let mut ys = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let (x, y) = self.pair::<F>(start + i as u64);
            xs.slice_mut(s![i, .., .., ..]).assign(&x);
            ys.slice_mut(s![i, .., .., ..]).assign(&y);
        }
        (xs, ys)
    }
}

/// An ellipse in pixel coordinates (pixel `(x, y)` spans `[x, x+1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub intensity: f64,
}

const SUPERSAMPLE: usize = 4;

impl Ellipse {
    fn random<R: Rng + ?Sized>(rng: &mut R, size: usize, margin: f64, rmin: f64, rmax: f64) -> Self {
        let hi = size as f64 - margin;
        Self {
            cx: rng.random_range(margin..=hi),
            cy: rng.random_range(margin..=hi),
            rx: rng.random_range(rmin..=rmax),
            ry: rng.random_range(rmin..=rmax),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.2..=1.0),
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// Anti-aliased coverage times intensity, merged into `img` by maximum.
    pub fn render_max(&self, img: &mut Array2<f64>) {
        let n = SUPERSAMPLE;
        let inv = 1.0 / (n * n) as f64;
        for ((y, x), v) in img.indexed_iter_mut() {
            let mut hits = 0;
            for j in 0..n {
                for i in 0..n {
                    let px = x as f64 + (i as f64 + 0.5) / n as f64;
                    let py = y as f64 + (j as f64 + 0.5) / n as f64;
                    hits += self.contains(px, py) as usize;
                }
            }
            let val = self.intensity * hits as f64 * inv;
            if val > *v {
                *v = val;
            }
        }
    }
}

/// Squared distance transform along one line (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    // Find the first finite sample; an all-infinite line stays infinite.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let sq = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if sq <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sq;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel; infinite when there is none.
pub fn squared_distance_transform(fg: &Array2<bool>) -> Array2<f64> {
    let (h, w) = fg.dim();
    let mut cols = Array2::<f64>::zeros((h, w));
    let mut buf = vec![0f64; h.max(w)];
    for x in 0..w {
        let f: Vec<f64> = (0..h)
            .map(|y| if fg[[y, x]] { 0.0 } else { f64::INFINITY })
            .collect();
        edt_1d(&f, &mut buf[..h]);
        for y in 0..h {
            cols[[y, x]] = buf[y];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let f: Vec<f64> = cols.row(y).to_vec();
        edt_1d(&f, &mut buf[..w]);
        for x in 0..w {
            out[[y, x]] = buf[x];
        }
    }
    out
}

/// The annotator: `clamp(1 − d/R, 0, 1)` where `d` is the Euclidean distance
/// to the nearest pixel above [`FOREGROUND_THRESHOLD`] and `R` is half the
/// larger image side. An image without foreground maps to all zeros.
pub fn derive_condition<F: Scalar>(image: ArrayView2<F>) -> Array2<F> {
    let fg = image.mapv(|v| v.as_f64() > FOREGROUND_THRESHOLD);
    if !fg.iter().any(|&b| b) {
        return Array2::zeros(image.dim());
    }
    let r = image.nrows().max(image.ncols()) as f64 / 2.0;
    squared_distance_transform(&fg).mapv(|d2| F::lit((1.0 - d2.sqrt() / r).clamp(0.0, 1.0)))
}

/// Sobel gradient magnitude (replicated border), scaled by 1/4, clamped to
/// `[0, 1]` and quantized to `{0, 1/3, 2/3, 1}`.
pub fn derive_edges<F: Scalar>(image: ArrayView2<F>) -> Array2<F> {
    let (h, w) = image.dim();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        image[[yy, xx]].as_f64()
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y, x - 1)
            - at(y + 1, x - 1);
        let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y - 1, x)
            - at(y - 1, x + 1);
        let m = ((gx * gx + gy * gy).sqrt() / 4.0).min(1.0);
        F::lit((m * 3.0).round() / 3.0)
    })
}

/// Annotates every image of an `(N, 1, H, W)` batch.
pub fn derive_condition_batch<F: Scalar>(images: &Array4<F>) -> Array4<F> {
    let mut out = Array4::zeros(images.dim());
    for n in 0..images.dim().0 {
        for c in 0..images.dim().1 {
            out.slice_mut(s![n, c, .., ..])
                .assign(&derive_condition(images.slice(s![n, c, .., ..])));
        }
    }
    out
}

pub fn gen_gauss_pair<F: Scalar>(n: usize, rho: f64, seed: u64) -> Result<(Array4<F>, Array4<F>)> {
    let spec = PairSpec::gauss(rho, seed);
    spec.validate()?;
    Ok(spec.batch(0, n))
}

pub fn gen_blob_pair<F: Scalar>(n: usize, spec: &PairSpec, seed: u64) -> Result<(Array4<F>, Array4<F>)> {
    let spec = PairSpec {
        kind: PairKind::Blob2d,
        ..spec.with_seed(seed)
    };
    spec.validate()?;
    Ok(spec.batch(0, n))
}

pub fn gen_loose_pair<F: Scalar>(n: usize, spec: &PairSpec, seed: u64) -> Result<(Array4<F>, Array4<F>)> {
    let spec = PairSpec {
        kind: PairKind::LooseView,
        ..spec.with_seed(seed)
    };
    spec.validate()?;
    Ok(spec.batch(0, n))
}
