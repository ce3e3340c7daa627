//! Evaluation oracles: annotator fidelity, the Gaussian conditional check,
//! and small statistical tests (energy distance, Spearman, Pearson,
//! chi-square uniformity).

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::data::{derive_condition_batch, PairSpec};
use crate::error::{shape_err, Error, Result};
use crate::rng::{indexed, substream, substream_seed};
use crate::sampling::{
    build_plan, known_region_error, run_plan, EpsModel, Guidance, PlanInputs, Preset, PresetParams, Region,
};
use crate::scalar::Scalar;

/// Mean squared error between the annotation of `generated` and the
/// conditions it was asked to follow.
pub fn condition_fidelity<F: Scalar>(generated: &Array4<F>, conditions: &Array4<F>) -> Result<f64> {
    if generated.dim() != conditions.dim() {
        return shape_err(format!(
            "fidelity: generated {:?}, conditions {:?}",
            generated.dim(),
            conditions.dim()
        ));
    }
    if generated.is_empty() {
        return Err(Error::Config("fidelity of an empty batch".into()));
    }
    let derived = derive_condition_batch(generated);
    let sse: f64 = derived
        .iter()
        .zip(conditions.iter())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sse / generated.len() as f64)
}

/// Per-sample fidelity, one value per batch entry.
pub fn condition_fidelity_per_sample<F: Scalar>(generated: &Array4<F>, conditions: &Array4<F>) -> Result<Vec<f64>> {
    if generated.dim() != conditions.dim() {
        return shape_err(format!("{:?} vs {:?}", generated.dim(), conditions.dim()));
    }
    let derived = derive_condition_batch(generated);
    Ok(derived
        .axis_iter(Axis(0))
        .zip(conditions.axis_iter(Axis(0)))
        .map(|(a, b)| {
            let sse: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(u, v)| (u.as_f64() - v.as_f64()).powi(2))
                .sum();
            sse / a.len() as f64
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCheck {
    pub mean: f64,
    pub var: f64,
    /// `|mean − ρ·y*|`
    pub mean_err: f64,
    /// `var / (1 − ρ²)`
    pub var_ratio: f64,
}

/// Samples `x | y = y*` with the `x_given_y` plan and compares the empirical
/// moments with `N(ρy*, 1 − ρ²)`.
pub fn gaussian_conditional_check<F: Scalar, M: EpsModel<F>>(
    model: &M,
    rho: f64,
    y_star: f64,
    n_samples: usize,
    levels: usize,
    seed: u64,
) -> Result<GaussianCheck> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    if rho.abs() >= 1.0 {
        return Err(Error::Config(format!("|rho| = {} must be below 1", rho.abs())));
    }
    let plan = build_plan(Preset::XGivenY, levels, &PresetParams::default())?;
    let y = Array4::from_elem((n_samples, 1, 1, 1), F::lit(y_star));
    let inputs = PlanInputs::pair(n_samples, (1, 1, 1), None, Some(y));
    let out = run_plan(model, &plan, &inputs, &mut sample_streams(seed, n_samples))?;
    let xs: Vec<f64> = out.x.iter().map(|v| v.as_f64()).collect();
    let (mean, var) = mean_var(&xs);
    Ok(GaussianCheck {
        mean,
        var,
        mean_err: (mean - rho * y_star).abs(),
        var_ratio: var / (1.0 - rho * rho),
    })
}

fn sample_streams(seed: u64, n: usize) -> Vec<crate::rng::StreamRng> {
    let base = substream_seed(seed, "sample");
    (0..n as u64).map(|i| indexed(base, i)).collect()
}

/// Held-out evaluation pairs drawn from a stream disjoint from training.
pub fn eval_pairs<F: Scalar>(spec: &PairSpec, n: usize, seed: u64) -> Result<(Array4<F>, Array4<F>)> {
    let spec = spec.with_seed(substream_seed(seed, "eval.data"));
    spec.validate()?;
    Ok(spec.batch(0, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n: usize,
    /// Fidelity of `x_given_y` samples to their conditions.
    pub conditional: f64,
    /// Fidelity of unconditional base samples to the same conditions.
    pub unconditional: f64,
    pub ratio: f64,
}

/// Conditional versus unconditional annotator fidelity on held-out
/// conditions.
pub fn blob_fidelity<F: Scalar, M: EpsModel<F>>(
    model: &M,
    spec: &PairSpec,
    n: usize,
    levels: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let (_, y) = eval_pairs::<F>(spec, n, seed)?;
    let dims = spec.dims();
    let cond_plan = build_plan(Preset::XGivenY, levels, &PresetParams::default())?;
    let cond = run_plan(
        model,
        &cond_plan,
        &PlanInputs::pair(n, dims, None, Some(y.clone())),
        &mut sample_streams(seed, n),
    )?;
    let joint = build_plan(Preset::Joint, levels, &PresetParams::default())?;
    let lone = PlanInputs {
        n,
        dims,
        x: None,
        conditions: vec![],
    };
    let uncond = run_plan(model, &joint, &lone, &mut sample_streams(seed, n))?;
    let conditional = condition_fidelity(&cond.x, &y)?;
    let unconditional = condition_fidelity(&uncond.x, &y)?;
    Ok(FidelityReport {
        n,
        conditional,
        unconditional,
        ratio: conditional / unconditional,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseReport {
    pub n: usize,
    /// Starting level of the condition for each setting.
    pub start_levels: Vec<usize>,
    pub mean_fidelity: Vec<f64>,
    pub non_decreasing: bool,
    pub spearman: Spearman,
}

/// Annotator fidelity of `x` when the condition is supplied at increasing
/// noise levels. Every setting reuses the same conditions and streams.
pub fn coarse_monotonicity<F: Scalar, M: EpsModel<F>>(
    model: &M,
    spec: &PairSpec,
    n: usize,
    levels: usize,
    fractions: &[f64],
    seed: u64,
) -> Result<CoarseReport> {
    if n == 0 || fractions.len() < 2 {
        return Err(Error::Config("need n >= 1 and at least two start levels".into()));
    }
    let (_, y) = eval_pairs::<F>(spec, n, seed)?;
    let mut start_levels = Vec::new();
    let mut mean_fidelity = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
        }
        let level = (f * levels as f64).round() as usize;
        let plan = build_plan(
            Preset::Coarse,
            levels,
            &PresetParams {
                t_y_start: Some(level),
                ..PresetParams::default()
            },
        )?;
        let out = run_plan(
            model,
            &plan,
            &PlanInputs::pair(n, spec.dims(), None, Some(y.clone())),
            &mut sample_streams(seed, n),
        )?;
        let per = condition_fidelity_per_sample(&out.x, &y)?;
        mean_fidelity.push(per.iter().sum::<f64>() / n as f64);
        xs.extend(std::iter::repeat_n(level as f64, n));
        ys.extend(per);
        start_levels.push(level);
    }
    Ok(CoarseReport {
        n,
        non_decreasing: non_decreasing(&mean_fidelity),
        spearman: spearman(&xs, &ys)?,
        start_levels,
        mean_fidelity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub n: usize,
    /// Known-region error of the generated condition with guidance.
    pub guided: f64,
    /// The same error with latent replacement alone.
    pub replacement_only: f64,
    pub ratio: f64,
    /// Seeds on which guidance lowered the error.
    pub wins: usize,
}

/// Partial conditioning on `known`: paired comparison of replacement with
/// and without reconstruction guidance. The error is measured on the known
/// region of the final `y`, which is never pasted back.
pub fn guidance_gain<F: Scalar, M: EpsModel<F>>(
    model: &M,
    spec: &PairSpec,
    n: usize,
    levels: usize,
    known: &Region,
    guidance: &Guidance,
    seed: u64,
) -> Result<GuidanceReport> {
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let (_, y) = eval_pairs::<F>(spec, n, seed)?;
    let run = |guided: bool| -> Result<Vec<f64>> {
        let plan = build_plan(
            Preset::Partial,
            levels,
            &PresetParams {
                known_y: known.clone(),
                guided,
                guidance: Some(guidance.clone()),
                ..PresetParams::default()
            },
        )?;
        let out = run_plan(
            model,
            &plan,
            &PlanInputs::pair(n, spec.dims(), None, Some(y.clone())),
            &mut sample_streams(seed, n),
        )?;
        (0..n)
            .map(|i| {
                let pick = |a: &Array4<F>| a.slice(s![i..i + 1, .., .., ..]).to_owned();
                known_region_error(&pick(&out.conditions[0]), &pick(&y), known)
            })
            .collect()
    };
    let with = run(true)?;
    let without = run(false)?;
    let guided = with.iter().sum::<f64>() / n as f64;
    let replacement_only = without.iter().sum::<f64>() / n as f64;
    Ok(GuidanceReport {
        n,
        guided,
        replacement_only,
        ratio: guided / replacement_only,
        wins: with.iter().zip(&without).filter(|(a, b)| a < b).count(),
    })
}

/// Mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return shape_err(format!("pearson: {} vs {} values", x.len(), y.len()));
    }
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// One-sided p-value for `ρ > 0` from the t approximation.
    pub p_greater: f64,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() || x.len() < 3 {
        return shape_err(format!("spearman needs >= 3 paired values, got {} and {}", x.len(), y.len()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    let df = (x.len() - 2) as f64;
    let p_greater = if rho >= 1.0 {
        0.0
    } else if rho <= -1.0 {
        1.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
        1.0 - dist.cdf(t)
    };
    Ok(Spearman { rho, p_greater })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Goodness of fit of integer draws to the uniform law on `lo..=hi`.
pub fn chi_square_uniform(draws: &[usize], lo: usize, hi: usize) -> Result<ChiSquareTest> {
    if hi <= lo || draws.is_empty() {
        return Err(Error::Config("chi-square needs a range of >= 2 values and some draws".into()));
    }
    let k = hi - lo + 1;
    let mut counts = vec![0usize; k];
    for &d in draws {
        if d < lo || d > hi {
            return Err(Error::Range(format!("draw {d} outside {lo}..={hi}")));
        }
        counts[d - lo] += 1;
    }
    let expected = draws.len() as f64 / k as f64;
    let statistic = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = k - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pairwise distance matrix over the pooled sample.
fn pooled_distances(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pooled.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclid(pooled[i], pooled[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn energy_from(d: &[Vec<f64>], left: &[usize], right: &[usize]) -> f64 {
    let mean = |s: &[usize], t: &[usize]| {
        let mut acc = 0.0;
        for &i in s {
            for &j in t {
                acc += d[i][j];
            }
        }
        acc / (s.len() * t.len()) as f64
    };
    2.0 * mean(left, right) - mean(left, left) - mean(right, right)
}

/// `2E‖A−B‖ − E‖A−A'‖ − E‖B−B'‖` over the empirical samples.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("energy distance of an empty sample".into()));
    }
    let d = pooled_distances(a, b);
    let left: Vec<usize> = (0..a.len()).collect();
    let right: Vec<usize> = (a.len()..a.len() + b.len()).collect();
    Ok(energy_from(&d, &left, &right))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Permutation test on the energy distance; `p = (1 + #{perm ≥ obs}) / (1 + P)`.
pub fn energy_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> Result<EnergyTest> {
    if a.is_empty() || b.is_empty() || permutations == 0 {
        return Err(Error::Config("energy test needs samples and >= 1 permutation".into()));
    }
    if a.iter().chain(b).any(|v| v.len() != a[0].len()) {
        return shape_err("energy test: samples differ in dimension");
    }
    let d = pooled_distances(a, b);
    let n = a.len() + b.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let observed = energy_from(&d, &idx[..a.len()], &idx[a.len()..]);
    let mut rng = substream(seed, "eval.energy");
    let mut hits = 0;
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        if energy_from(&d, &idx[..a.len()], &idx[a.len()..]) >= observed {
            hits += 1;
        }
    }
    Ok(EnergyTest {
        statistic: observed,
        p_value: (1 + hits) as f64 / (1 + permutations) as f64,
    })
}

/// True when every element is at least its predecessor.
pub fn non_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}
