//! Acceptance run. Prints one `PASS`/`FAIL` line per criterion and a
//! summary. The exit status stays zero so the rest of the workspace tests
//! still run after a red criterion; pass `--strict` or set
//! `JOINTDIFF_ACCEPTANCE_STRICT=1` to exit non-zero on any failure.
//! Criterion numbers given as the first argument (`5,9`) select a subset.
//!
//! The Blob2D and Gaussian models are trained from scratch on first use.
//! Set `JOINTDIFF_ACCEPTANCE_CACHE=<dir>` to keep the trained checkpoints
//! between runs, and `JOINTDIFF_RECORD_BASELINE=1` to rewrite the recorded
//! unconditional baseline from the current build.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use jointdiff::denoiser::BranchInput;
use jointdiff::eval::{self, chi_square_uniform, pearson};
use jointdiff::nn::Trainable;
use jointdiff::rng::{indexed, normal, substream};
use jointdiff::sampling::{
    condition_guidance, guidance_loss_and_grad, run_plan, Branch, GuidedBranch, PlanInputs, Region, Side,
};
use jointdiff::training::{denoising_loss, sample_timesteps_disentangled, NoisedBranch, TrainRngs};
use jointdiff::{
    add_noise, attach, build_plan, detach, train, AdapterOptions, AdapterSet, Checkpoint, DenoiserConfig,
    JointDenoiser, JointDenoiser32, JointDenoiser64, JointOverrides, PairSpec, Preset, PresetParams,
    ScheduleParams, Stage, TrainConfig,
};
use ndarray::{Array1, Array4};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff<F: jointdiff::Scalar>(a: &Array4<F>, b: &Array4<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(u, v)| (u.as_f64() - v.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut r = indexed(seed, 0);
    Array4::from_shape_simple_fn(shape, || normal::<f64, _>(&mut r))
}

fn streams(seed: u64, n: usize) -> Vec<jointdiff::rng::StreamRng> {
    (0..n as u64).map(|i| indexed(seed, i)).collect()
}

/// Adapter set with every tensor moved off its initial value.
fn perturbed<F: jointdiff::Scalar>(m: &JointDenoiser<F>, opts: &AdapterOptions, seed: u64, amount: f64) -> AdapterSet<F> {
    let mut set = AdapterSet::new(m, opts, &mut substream(seed, "adapter")).unwrap();
    let names: Vec<String> = set.tensors().names().cloned().collect();
    let mut r = substream(seed, "perturb");
    for name in names {
        set.tensor_mut(&name)
            .unwrap()
            .mapv_inplace(|v| v + F::lit(amount * normal::<f64, _>(&mut r)));
    }
    set
}

fn predict<F: jointdiff::Scalar>(m: &JointDenoiser<F>, z: &[(&Array4<F>, &[usize])]) -> Vec<Array4<F>> {
    let inputs: Vec<BranchInput<F>> = z
        .iter()
        .map(|(a, t)| BranchInput {
            z: a.view(),
            timesteps: t,
        })
        .collect();
    m.predict(&inputs).unwrap()
}

// ---------------------------------------------------------------------------
// Trained models shared by several criteria.

const BLOB_PRETRAIN_STEPS: usize = 2000;
const BLOB_ADAPT_STEPS: usize = 5000;
const BLOB_BATCH: usize = 16;
const BLOB_LR: f64 = 2e-3;
const BLOB_LEVELS: usize = 25;

const GAUSS_RHO: f64 = 0.8;
const GAUSS_PRETRAIN_STEPS: usize = 3000;
const GAUSS_ADAPT_STEPS: usize = 3000;
const GAUSS_BATCH: usize = 64;

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("JOINTDIFF_ACCEPTANCE_CACHE").map(PathBuf::from)
}

/// Pretrains and adapts a model, or loads both stages from the cache.
fn trained(tag: &str, cfg: DenoiserConfig, data: &PairSpec, pre: TrainConfig, adapt: TrainConfig) -> JointDenoiser32 {
    let cached = cache_dir().map(|d| (d.join(format!("{tag}_base.uckp")), d.join(format!("{tag}_adapter.uckp"))));
    if let Some((b, a)) = &cached {
        if b.exists() && a.exists() {
            let mut m = Checkpoint::load(b).unwrap().to_model::<f32>().unwrap();
            attach(&mut m, Checkpoint::load(a).unwrap().to_adapter_set().unwrap()).unwrap();
            eprintln!("{tag}: loaded cached checkpoints");
            return m;
        }
    }
    let t0 = Instant::now();
    let mut m = JointDenoiser32::new_base(cfg, &ScheduleParams::toy(), &mut substream(0, "init")).unwrap();
    let r = train(&pre, data, &mut m, &mut |_, _| Ok(())).unwrap();
    eprintln!(
        "{tag}: pretrained {} steps, loss {:.4} -> {:.4} ({:.0?})",
        pre.steps,
        r.median_loss(0.0, 0.1),
        r.median_loss(0.9, 1.0),
        t0.elapsed()
    );
    let base = Checkpoint::from_base(&m, Value::Null);
    let t0 = Instant::now();
    let r = train(&adapt, data, &mut m, &mut |_, _| Ok(())).unwrap();
    eprintln!(
        "{tag}: adapted {} steps, loss {:.4} -> {:.4} ({:.0?})",
        adapt.steps,
        r.median_loss(0.0, 0.1),
        r.median_loss(0.9, 1.0),
        t0.elapsed()
    );
    if let Some((b, a)) = &cached {
        std::fs::create_dir_all(b.parent().unwrap()).unwrap();
        base.save(b).unwrap();
        Checkpoint::from_adapter(&m, m.adapter(0).unwrap(), Value::Null).save(a).unwrap();
    }
    m
}

fn blob_spec() -> PairSpec {
    PairSpec::blob(1)
}

fn blob_model() -> &'static JointDenoiser32 {
    static M: OnceLock<JointDenoiser32> = OnceLock::new();
    M.get_or_init(|| {
        let stage = |stage, steps| TrainConfig {
            lr: BLOB_LR,
            ..TrainConfig::new(stage, steps, BLOB_BATCH)
        };
        trained(
            "blob",
            DenoiserConfig::default(),
            &blob_spec(),
            stage(Stage::Pretrain, BLOB_PRETRAIN_STEPS),
            stage(Stage::Adapt, BLOB_ADAPT_STEPS),
        )
    })
}

fn gauss_model() -> &'static JointDenoiser32 {
    static M: OnceLock<JointDenoiser32> = OnceLock::new();
    M.get_or_init(|| {
        let pre = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::new(Stage::Pretrain, GAUSS_PRETRAIN_STEPS, GAUSS_BATCH)
        };
        let adapt = TrainConfig {
            lr: 2e-3,
            ..TrainConfig::new(Stage::Adapt, GAUSS_ADAPT_STEPS, GAUSS_BATCH)
        };
        trained(
            "gauss",
            DenoiserConfig::pointwise(),
            &PairSpec::gauss(GAUSS_RHO, 1),
            pre,
            adapt,
        )
    })
}

// ---------------------------------------------------------------------------
// Criteria.

fn zero_init_transparency() -> Outcome {
    let mut m = JointDenoiser64::new_base(DenoiserConfig::default(), &ScheduleParams::toy(), &mut substream(1, "init"))
        .unwrap();
    let n = 100;
    let shape = (n, 1, 16, 16);
    let (zx, zy) = (randn(shape, 1), randn(shape, 2));
    let mut r = TrainRngs::new(3);
    let (tx, ty) = sample_timesteps_disentangled(n, m.schedule(), 1, &mut r.t_x, &mut r.t_y).unwrap();
    let bx = predict(&m, &[(&zx, &tx)]).remove(0);
    let by = predict(&m, &[(&zy, &ty)]).remove(0);
    let set = AdapterSet::new(&m, &AdapterOptions::default(), &mut substream(1, "adapter")).unwrap();
    attach(&mut m, set).unwrap();
    let out = predict(&m, &[(&zx, &tx), (&zy, &ty)]);
    let (dx, dy) = (max_abs_diff(&out[0], &bx), max_abs_diff(&out[1], &by));
    check(
        dx < 1e-6 && dy < 1e-6,
        format!("max |Δε̂_x| {dx:.1e}, max |Δε̂_y| {dy:.1e} over {n} inputs"),
    )
}

fn attach_detach_exactness() -> Outcome {
    let cfg = DenoiserConfig::default();
    let mut m = JointDenoiser64::new_base(cfg.clone(), &ScheduleParams::toy(), &mut substream(2, "init")).unwrap();
    let shape = (4, 1, 16, 16);
    let z = randn(shape, 1);
    let t = [3, 30, 70, 100];
    let before = predict(&m, &[(&z, &t)]).remove(0);
    let set = perturbed(&m, &AdapterOptions::default(), 3, 0.2);
    let id = attach(&mut m, set).unwrap().id;
    let with = predict(&m, &[(&z, &t), (&randn(shape, 4), &t)]).remove(0);
    detach(&mut m, id).unwrap();
    let after = predict(&m, &[(&z, &t)]).remove(0);
    let bitwise = after == before;

    let mut m = JointDenoiser32::new_base(cfg, &ScheduleParams::toy(), &mut substream(4, "init")).unwrap();
    let sum = m.base().checksum();
    let steps = 500;
    let adapt = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::new(Stage::Adapt, steps, 4)
    };
    train(&adapt, &blob_spec(), &mut m, &mut |_, _| Ok(())).unwrap();
    let unchanged = m.base().checksum() == sum;
    check(
        bitwise && unchanged && max_abs_diff(&with, &before) > 1e-4,
        format!("detach bitwise: {bitwise}; base checksum unchanged after {steps} adapt steps: {unchanged}"),
    )
}

fn forward_statistics() -> Outcome {
    let s = ScheduleParams::toy().build().unwrap();
    let n = 100_000;
    let x0 = 0.6;
    let mut r = substream(5, "forward");
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for t in [1, s.max_timestep() / 2, s.max_timestep()] {
        let eps = Array1::from_shape_simple_fn(n, || normal::<f64, _>(&mut r));
        let z = add_noise(&Array1::from_elem(n, x0), t, &eps, &s).unwrap();
        let zs: Vec<f64> = z.to_vec();
        let (mean, var) = eval::mean_var(&zs);
        let (mu, sigma2) = (s.alpha_bar(t).sqrt() * x0, 1.0 - s.alpha_bar(t));
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n as f64 - 1.0)).sqrt();
        let (em, ev) = ((mean - mu).abs() / se_mean, (var - sigma2).abs() / se_var);
        worst = worst.max(em).max(ev);
        parts.push(format!("t={t}: {em:.2}/{ev:.2} SE"));
    }
    check(
        worst < 4.0,
        format!("mean/variance deviation {} over {n} draws", parts.join(", ")),
    )
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn gradient_correctness() -> Outcome {
    let cfg = DenoiserConfig {
        base_width: 8,
        attn_heads: 2,
        head_dim: 4,
        time_embed_dim: 8,
        norm_groups: 2,
        ff_mult: 2,
        ..DenoiserConfig::pointwise()
    };
    let mut m = JointDenoiser64::new_base(cfg, &ScheduleParams::toy(), &mut substream(1, "init")).unwrap();
    let opts = AdapterOptions {
        rank: 2,
        ..AdapterOptions::default()
    };
    let set = perturbed(&m, &opts, 1, 0.3);
    attach(&mut m, set).unwrap();

    // Adapt loss with respect to every adapter entry.
    let shape = (3, 1, 1, 1);
    let branches = vec![
        NoisedBranch {
            z: randn(shape, 1),
            t: vec![3, 40, 97],
            eps: randn(shape, 2),
        },
        NoisedBranch {
            z: randn(shape, 3),
            t: vec![60, 1, 25],
            eps: randn(shape, 4),
        },
    ];
    let (_, grads) = denoising_loss(&m, &branches, true, Trainable::Adapters).unwrap();
    let h = 1e-5;
    let (mut worst_adapt, mut entries): (f64, usize) = (0.0, 0);
    for (key, g) in &grads {
        let name = key.strip_prefix("@0/").unwrap();
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut at = |delta: f64| {
                m.adapter_mut(0).unwrap().tensor_mut(name).unwrap()[[r, c]] += delta;
                let (l, _) = denoising_loss(&m, &branches, true, Trainable::Nothing).unwrap();
                m.adapter_mut(0).unwrap().tensor_mut(name).unwrap()[[r, c]] -= delta;
                l.loss_total
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            worst_adapt = worst_adapt.max(rel_err(g[[r, c]], numeric));
            entries += 1;
        }
    }

    // Guidance term with respect to both branch states.
    let shape = (2, 1, 1, 1);
    let clean = randn(shape, 7);
    let mut my = Array4::ones(shape);
    my[[0, 0, 0, 0]] = 0.0;
    let make = |zx: &Array4<f64>, zy: &Array4<f64>| {
        vec![
            GuidedBranch::from_mask(zx.clone(), 30, None, Array4::ones(shape)),
            GuidedBranch::from_mask(zy.clone(), 12, Some(clean.clone()), my.clone()),
        ]
    };
    let (zx, zy) = (randn(shape, 8), randn(shape, 9));
    let ov = JointOverrides::default();
    let (_, ggrads, _) = guidance_loss_and_grad(&m, &make(&zx, &zy), &ov).unwrap();
    let h = 1e-6;
    let mut worst_guide: f64 = 0.0;
    for (b, g) in ggrads.iter().enumerate() {
        for idx in ndarray::indices(shape) {
            let loss_at = |delta: f64| {
                let (mut px, mut py) = (zx.clone(), zy.clone());
                if b == 0 {
                    px[idx] += delta;
                } else {
                    py[idx] += delta;
                }
                guidance_loss_and_grad(&m, &make(&px, &py), &ov).unwrap().0
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            worst_guide = worst_guide.max(rel_err(g[idx], numeric));
        }
    }
    check(
        entries == m.num_adapter_parameters() && worst_adapt < 1e-4 && worst_guide < 1e-4,
        format!(
            "worst relative error {worst_adapt:.1e} over {entries} adapter entries, {worst_guide:.1e} on the guidance term"
        ),
    )
}

fn gaussian_conditional() -> Outcome {
    let m = gauss_model();
    let n = 2000;
    let r = eval::gaussian_conditional_check(m, GAUSS_RHO, 1.0, n, 50, 5).unwrap();
    check(
        r.mean_err <= 0.1 && (0.27..=0.45).contains(&r.var),
        format!(
            "mean {:.3} (target 0.8, |err| {:.3} <= 0.1), variance {:.3} (target [0.27, 0.45]) over {n} samples; \
             {GAUSS_ADAPT_STEPS} adapt steps",
            r.mean, r.mean_err, r.var
        ),
    )
}

fn timestep_disentanglement() -> Outcome {
    let s = ScheduleParams::toy().build().unwrap();
    let n = 100_000;
    let mut r = TrainRngs::new(6);
    let (tx, ty) = sample_timesteps_disentangled(n, &s, 1, &mut r.t_x, &mut r.t_y).unwrap();
    let f = |v: &[usize]| v.iter().map(|&t| t as f64).collect::<Vec<_>>();
    let rho = pearson(&f(&tx), &f(&ty)).unwrap();
    let cx = chi_square_uniform(&tx, 1, s.max_timestep()).unwrap();
    let cy = chi_square_uniform(&ty, 1, s.max_timestep()).unwrap();
    check(
        rho.abs() < 0.01 && cx.p_value > 0.01 && cy.p_value > 0.01,
        format!(
            "ρ = {rho:+.4}, uniformity p = {:.3} (t_x), {:.3} (t_y) over {n} draws",
            cx.p_value, cy.p_value
        ),
    )
}

fn preset_conformance() -> Outcome {
    let s = 50;
    let descending = |f: &dyn Fn(usize) -> (usize, usize)| (0..=s).rev().map(f).collect::<Vec<_>>();
    let mut estimation: Vec<(usize, usize)> = (1..=s).rev().map(|i| (5, i)).collect();
    estimation.push((0, 0));
    let coarse = PresetParams {
        t_y_start: Some(25),
        ..PresetParams::default()
    };
    let partial = |guided| PresetParams {
        guided,
        ..PresetParams::default()
    };
    let rows: Vec<(&str, Preset, PresetParams, Vec<(usize, usize)>)> = vec![
        ("p(x,y)", Preset::Joint, PresetParams::default(), descending(&|i| (i, i))),
        ("p(x|y_0)", Preset::XGivenY, PresetParams::default(), descending(&|i| (i, 0))),
        ("p(y|x_0)", Preset::YGivenX, PresetParams::default(), descending(&|i| (0, i))),
        // (50,25), (49,25), (48,24), (47,24), ..., (1,1), (0,0)
        ("p(x|y_25)", Preset::Coarse, coarse, descending(&|i| (i, i.div_ceil(2)))),
        ("p(x,y|y_0^m)", Preset::Partial, partial(false), descending(&|i| (i, i))),
        ("p(x,y|g(y_0^m))", Preset::Partial, partial(true), descending(&|i| (i, i))),
        ("p(y|x_5)", Preset::Estimation, PresetParams::default(), estimation),
    ];
    let mut bad = Vec::new();
    for (row, preset, params, want) in &rows {
        let plan = build_plan(*preset, s, params).unwrap();
        let replaced = plan.replacement.as_ref().map(|r| r.branch);
        let ok = plan.steps == *want
            && match *row {
                "p(x,y|y_0^m)" => replaced == Some(Branch::Y) && plan.guidance.is_none(),
                "p(x,y|g(y_0^m))" => replaced == Some(Branch::Y) && plan.guidance.is_some(),
                _ => replaced.is_none() && plan.guidance.is_none(),
            };
        if !ok {
            bad.push(*row);
        }
    }
    check(
        bad.is_empty(),
        format!("{} rows at S={s} compared step by step; mismatched: {bad:?}", rows.len()),
    )
}

fn coarse_monotonicity() -> Outcome {
    let n = 200;
    let r = eval::coarse_monotonicity(blob_model(), &blob_spec(), n, BLOB_LEVELS, &[0.0, 0.2, 0.5, 0.8, 1.0], 5)
        .unwrap();
    let fid: Vec<String> = r.mean_fidelity.iter().map(|v| format!("{v:.4}")).collect();
    check(
        r.non_decreasing && r.spearman.rho > 0.0 && r.spearman.p_greater < 0.01,
        format!(
            "fidelity at t_y_start = 0, .2T, .5T, .8T, T: [{}]; Spearman ρ {:.3}, p {:.1e}; {n} seeds",
            fid.join(", "),
            r.spearman.rho,
            r.spearman.p_greater
        ),
    )
}

fn guidance_efficacy() -> Outcome {
    let n = 100;
    let known = Region::Half { side: Side::Left };
    let guidance = jointdiff::sampling::Guidance::reference(known.clone());
    let r = eval::guidance_gain(blob_model(), &blob_spec(), n, BLOB_LEVELS, &known, &guidance, 9).unwrap();
    check(
        r.ratio <= 0.7,
        format!(
            "known-region error {:.4} guided vs {:.4} replacement only, ratio {:.3} (<= 0.7); guidance better on {}/{n} seeds",
            r.guided, r.replacement_only, r.ratio, r.wins
        ),
    )
}

fn combination_and_condition_guidance() -> Outcome {
    let base = blob_model();
    let spec = blob_spec();
    let n = 8;
    let (_, y) = eval::eval_pairs::<f32>(&spec, n, 21).unwrap();
    let dims = spec.dims();

    // Single model against the same model plus a second, different one at
    // weights (1, 0).
    let single = base.clone();
    let mut pair = base.clone();
    let mut second = pair.adapter(0).unwrap().clone();
    let names: Vec<String> = second.tensors().names().cloned().collect();
    let mut r = substream(8, "perturb");
    for name in names {
        second
            .tensor_mut(&name)
            .unwrap()
            .mapv_inplace(|v| v + 0.05 * normal::<f32, _>(&mut r));
    }
    attach(&mut pair, second).unwrap();
    let plan = build_plan(Preset::XGivenY, BLOB_LEVELS, &PresetParams::default()).unwrap();
    let one = run_plan(&single, &plan, &PlanInputs::pair(n, dims, None, Some(y.clone())), &mut streams(3, n)).unwrap();
    let mut weighted = plan.clone();
    weighted.combination = Some(vec![(1.0, 1.0), (0.0, 0.0)]);
    let inputs = PlanInputs {
        n,
        dims,
        x: None,
        conditions: vec![Some(y.clone()), Some(y.clone())],
    };
    let two = run_plan(&pair, &weighted, &inputs, &mut streams(3, n)).unwrap();
    let comb = max_abs_diff(&one.x, &two.x);
    let mut other = plan.clone();
    other.combination = Some(vec![(0.0, 0.0), (1.0, 1.0)]);
    let swapped = max_abs_diff(&one.x, &run_plan(&pair, &other, &inputs, &mut streams(3, n)).unwrap().x);

    // Condition guidance endpoints on real predictions.
    let mut r = indexed(4, 0);
    let zx = Array4::from_shape_simple_fn((n, dims.0, dims.1, dims.2), || normal::<f32, _>(&mut r));
    let (tx, ty) = (vec![60; n], vec![0; n]);
    let joint = predict(base, &[(&zx, &tx), (&y, &ty)]).remove(0);
    let sep = predict(base, &[(&zx, &tx)]).remove(0);
    let exact = condition_guidance(&joint, &sep, 1.0).unwrap() == joint
        && condition_guidance(&joint, &sep, 0.0).unwrap() == sep
        && max_abs_diff(&joint, &sep) > 0.0;
    check(
        comb < 1e-6 && swapped > 1e-3 && exact,
        format!(
            "(1,0) vs single model max diff {comb:.1e} (other adapter alone differs by {swapped:.2}); \
             k=1 -> ε_joint, k=0 -> ε_sep exactly: {exact}"
        ),
    )
}

fn baseline_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/blob_baseline.json")
}

fn conditional_beats_unconditional() -> Outcome {
    let n = 100;
    let r = eval::blob_fidelity(blob_model(), &blob_spec(), n, BLOB_LEVELS, 3).unwrap();
    if std::env::var_os("JOINTDIFF_RECORD_BASELINE").is_some() {
        let record = json!({
            "unconditional_fidelity": r.unconditional,
            "n": n,
            "levels": BLOB_LEVELS,
            "pretrain_steps": BLOB_PRETRAIN_STEPS,
            "batch_size": BLOB_BATCH,
            "lr": BLOB_LR,
            "seed": 3,
        });
        std::fs::create_dir_all(baseline_path().parent().unwrap()).unwrap();
        std::fs::write(baseline_path(), serde_json::to_string_pretty(&record).unwrap() + "\n").unwrap();
    }
    let recorded: Value = serde_json::from_slice(&std::fs::read(baseline_path()).map_err(|e| e.to_string())?).unwrap();
    let baseline = recorded["unconditional_fidelity"].as_f64().unwrap();
    check(
        r.conditional < 0.5 * baseline,
        format!(
            "conditional fidelity {:.4} vs recorded baseline {baseline:.4} (ratio {:.3}, needs < 0.5); \
             this run's unconditional {:.4}",
            r.conditional,
            r.conditional / baseline,
            r.unconditional
        ),
    )
}

const BIN: &str = env!("CARGO_BIN_EXE_jointdiff");

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn cli_pipeline(dir: &Path) -> Result<(), String> {
    let config = |stage: &str| {
        json!({
            "model": {"base_width": 16, "attn_heads": 2, "head_dim": 8, "time_embed_dim": 16, "norm_groups": 4},
            "data": {"kind": "blob2d", "size": 16},
            "train": {"stage": stage, "steps": 30, "batch_size": 4, "lr": 0.002, "save_every": 10},
            "output_dir": "run",
            "seed": 17
        })
    };
    for stage in ["pretrain", "adapt"] {
        std::fs::write(dir.join(format!("{stage}.json")), config(stage).to_string()).map_err(|e| e.to_string())?;
    }
    cli(dir, &["pretrain", "--config", "pretrain.json"])?;
    cli(dir, &["adapt", "--config", "adapt.json", "--base", "run/base.uckp"])?;
    cli(dir, &["export-data", "--config", "adapt.json", "--n", "6", "--out", "inputs"])?;
    for (plan, out) in [("x_given_y", "cond"), ("joint", "joint")] {
        cli(
            dir,
            &[
                "sample", "--base", "run/base.uckp", "--adapter", "run/adapter.uckp", "--plan", plan, "--levels",
                "10", "--inputs", "inputs", "--n", "6", "--seed", "5", "--out", out,
            ],
        )?;
    }
    Ok(())
}

fn reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        cli_pipeline(d.path())?;
    }
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for e in std::fs::read_dir(dirs[0].path().join(&rel)).unwrap() {
            let e = e.unwrap();
            let r = rel.join(e.file_name());
            if e.file_type().unwrap().is_dir() {
                stack.push(r);
            } else {
                files.push(r);
            }
        }
    }
    files.sort();
    // Metrics logs carry a wall-clock column; everything else must match
    // byte for byte.
    let content = |root: &Path, f: &Path| -> Option<Vec<u8>> {
        let bytes = std::fs::read(root.join(f)).ok()?;
        if f.extension().is_some_and(|e| e == "csv") {
            let text = String::from_utf8(bytes).ok()?;
            let trimmed: Vec<&str> = text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect();
            return Some(trimmed.join("\n").into_bytes());
        }
        Some(bytes)
    };
    let differing: Vec<String> = files
        .iter()
        .filter(|f| content(dirs[0].path(), f) != content(dirs[1].path(), f))
        .map(|f| f.display().to_string())
        .collect();
    let kinds = |ext: &str| files.iter().filter(|f| f.extension().is_some_and(|e| e == ext)).count();
    check(
        differing.is_empty() && kinds("uckp") >= 2 && kinds("npy") >= 4 && kinds("json") >= 2,
        format!(
            "{} files from two identical runs ({} checkpoints, {} arrays); differing: {differing:?}",
            files.len(),
            kinds("uckp"),
            kinds("npy")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("zero-init transparency", zero_init_transparency),
        ("attach/detach exactness", attach_detach_exactness),
        ("forward-process statistics", forward_statistics),
        ("gradient correctness", gradient_correctness),
        ("analytic conditional recovery", gaussian_conditional),
        ("timestep disentanglement", timestep_disentanglement),
        ("schedule-preset conformance", preset_conformance),
        ("coarse-fidelity monotonicity", coarse_monotonicity),
        ("guidance efficacy", guidance_efficacy),
        ("combination and condition-guidance degeneracies", combination_and_condition_guidance),
        ("conditional beats unconditional", conditional_beats_unconditional),
        ("reproducibility", reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::args()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .map(|a| a.split(',').filter_map(|s| s.parse().ok()).collect::<Vec<_>>())
        .filter(|ids| !ids.is_empty());
    let mut outcomes = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        outcomes.push((id, outcome.is_ok()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{id:>2}] {name}: {detail} ({:.1?})", t0.elapsed());
    }
    let failing: Vec<String> = outcomes.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        outcomes.len() - failing.len(),
        outcomes.len(),
        if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
    );
    let strict = std::env::args().any(|a| a == "--strict") || std::env::var_os("JOINTDIFF_ACCEPTANCE_STRICT").is_some();
    if strict && !failing.is_empty() {
        std::process::exit(1);
    }
}
