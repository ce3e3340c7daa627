//! Subcommand implementations. Each returns a JSON summary that `main`
//! prints on success.

use std::path::{Path, PathBuf};

use jointdiff::checkpoint::Checkpoint;
use jointdiff::data::PairSpec;
use jointdiff::eval::{blob_fidelity, coarse_monotonicity, gaussian_conditional_check, guidance_gain};
use jointdiff::rng::{indexed, substream, substream_seed};
use jointdiff::sampling::{build_plan, run_plan, Guidance, PlanDocument, PlanInputs, Preset, PresetParams, SamplingPlan};
use jointdiff::training::{train, write_metrics_csv, Stage, TrainReport};
use jointdiff::{attach, Error, JointDenoiser, Result};
use ndarray::Array4;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::io::{read_npy, sha256_array, sha256_file, write_json, write_npy, write_png};

type Model = JointDenoiser<f32>;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_metrics(path: &Path, report: &TrainReport) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_metrics_csv(std::io::BufWriter::new(f), &report.rows)?;
    Ok(())
}

fn provenance(cfg: &RunConfig, data: &PairSpec, report: &TrainReport) -> Result<Value> {
    let train = cfg.resolved_train()?;
    Ok(json!({
        "stage": train.stage,
        "steps": train.steps,
        "batch_size": train.batch_size,
        "lr": train.lr,
        "seed": train.seed,
        "run_seed": cfg.seed,
        "final_loss": report.final_loss(),
        "data": data,
    }))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

/// Loads a base checkpoint and checks it against an optional model section.
pub fn load_base(path: &Path, cfg: Option<&RunConfig>) -> Result<Model> {
    let ck = load_checkpoint(path)?;
    if let Some(model) = cfg.and_then(|c| c.model.as_ref()) {
        if *model != ck.meta.model {
            return Err(Error::Shape(format!(
                "config model section does not match base checkpoint {}",
                path.display()
            )));
        }
    }
    ck.to_model()
}

/// Attaches each adapter checkpoint in order; fingerprint mismatches are
/// logged and tolerated, shape mismatches are errors.
pub fn attach_adapters(model: &mut Model, paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        let set = load_checkpoint(p)?.to_adapter_set::<f32>()?;
        let report = attach(model, set)?;
        if report.fingerprint_mismatch {
            log::warn!("{}: adapter was trained on a different base", p.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    metrics: PathBuf,
    steps: usize,
    final_loss: f64,
    sha256: String,
}

pub fn pretrain(cfg: &RunConfig) -> Result<Value> {
    let train_cfg = cfg.resolved_train()?;
    if train_cfg.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain needs train.stage = \"pretrain\"".into()));
    }
    let data = cfg.data()?;
    let model_cfg = cfg
        .model
        .clone()
        .ok_or_else(|| Error::Config("config has no model section".into()))?;
    let mut model = Model::new_base(model_cfg, &cfg.schedule, &mut substream(cfg.seed, "init"))?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let report = train(&train_cfg, &data, &mut model, &mut |step, m| {
        let ck = Checkpoint::from_base(m, json!({"stage": "pretrain", "step": step}));
        ck.save(dir.join(format!("base_step{step:06}.uckp")))
    })?;
    let ck_path = dir.join("base.uckp");
    Checkpoint::from_base(&model, provenance(cfg, &data, &report)?).save(&ck_path)?;
    let metrics = dir.join("pretrain_metrics.csv");
    write_metrics(&metrics, &report)?;
    Ok(serde_json::to_value(TrainSummary {
        sha256: sha256_file(&ck_path)?,
        checkpoint: ck_path,
        metrics,
        steps: train_cfg.steps,
        final_loss: report.final_loss(),
    })?)
}

pub fn adapt(cfg: &RunConfig, base: &Path) -> Result<Value> {
    let train_cfg = cfg.resolved_train()?;
    if train_cfg.stage != Stage::Adapt {
        return Err(Error::Config("adapt needs train.stage = \"adapt\"".into()));
    }
    let data = cfg.data()?;
    let mut model = load_base(base, Some(cfg))?;
    if model.config().aligned != data.aligned() {
        return Err(Error::Alignment(format!(
            "model aligned = {}, data aligned = {}",
            model.config().aligned,
            data.aligned()
        )));
    }
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let report = train(&train_cfg, &data, &mut model, &mut |step, m| {
        let set = m.adapter(0).expect("adapter attached by train");
        let ck = Checkpoint::from_adapter(m, set, json!({"stage": "adapt", "step": step}));
        ck.save(dir.join(format!("adapter_step{step:06}.uckp")))
    })?;
    let set = model.adapter(0).expect("adapter attached by train");
    let mut prov = provenance(cfg, &data, &report)?;
    prov["base_sha256"] = json!(sha256_file(base)?);
    let ck_path = dir.join("adapter.uckp");
    Checkpoint::from_adapter(&model, set, prov).save(&ck_path)?;
    let metrics = dir.join("adapt_metrics.csv");
    write_metrics(&metrics, &report)?;
    Ok(serde_json::to_value(TrainSummary {
        sha256: sha256_file(&ck_path)?,
        checkpoint: ck_path,
        metrics,
        steps: train_cfg.steps,
        final_loss: report.final_loss(),
    })?)
}

/// A preset name, an inline JSON plan, or a path to a JSON plan file.
pub fn resolve_plan(arg: &str, levels: usize) -> Result<SamplingPlan> {
    let path = Path::new(arg);
    let doc: Option<PlanDocument> = if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("plan {arg}: {e}")))?)
    } else if arg.trim_start().starts_with('{') {
        Some(serde_json::from_str(arg).map_err(|e| Error::Config(format!("plan: {e}")))?)
    } else {
        None
    };
    match doc {
        Some(d) => d.resolve(),
        None => build_plan(arg.parse::<Preset>()?, levels, &PresetParams::default()),
    }
}

/// `1,0` gives `(w, w)` per adapter; `1,0,0.5,0.5` gives explicit pairs.
pub fn parse_combination(arg: &str, adapters: usize) -> Result<Vec<(f64, f64)>> {
    let nums: Vec<f64> = arg
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad weight {s:?} in --combine-weights")))
        })
        .collect::<Result<_>>()?;
    if nums.len() == adapters {
        Ok(nums.iter().map(|&w| (w, w)).collect())
    } else if nums.len() == 2 * adapters {
        Ok(nums.chunks(2).map(|c| (c[0], c[1])).collect())
    } else {
        Err(Error::Combination(format!(
            "{} weights for {adapters} adapters",
            nums.len()
        )))
    }
}

pub struct SampleArgs {
    pub base: PathBuf,
    pub adapters: Vec<PathBuf>,
    pub plan: String,
    pub levels: usize,
    pub inputs: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub combine_weights: Option<String>,
    pub size: Option<usize>,
}

fn read_input(dir: Option<&Path>, name: &str, n: usize) -> Result<Option<Array4<f32>>> {
    let Some(dir) = dir else { return Ok(None) };
    let p = dir.join(name);
    if !p.exists() {
        return Ok(None);
    }
    let a = read_npy(&p)?;
    if a.dim().0 < n {
        return Err(Error::Shape(format!("{} holds {} samples, need {n}", p.display(), a.dim().0)));
    }
    Ok(Some(a.slice(ndarray::s![..n, .., .., ..]).to_owned()))
}

/// Branch dimensions: inputs first, then the data spec recorded at
/// pretraining, then `--size`.
fn branch_dims(ck: &Checkpoint, inputs: &[&Option<Array4<f32>>], size: Option<usize>) -> (usize, usize, usize) {
    if let Some(a) = inputs.iter().find_map(|a| a.as_ref()) {
        let (_, c, h, w) = a.dim();
        return (c, h, w);
    }
    let c = ck.meta.model.channels_in;
    if let Some(s) = size {
        return (c, s, s);
    }
    let recorded: Option<PairSpec> = ck
        .meta
        .provenance
        .get("data")
        .and_then(|d| serde_json::from_value(d.clone()).ok());
    match recorded {
        Some(spec) => spec.dims(),
        None => (c, 16, 16),
    }
}

pub fn sample(args: &SampleArgs) -> Result<Value> {
    if args.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let ck = load_checkpoint(&args.base)?;
    let mut model: Model = ck.to_model()?;
    attach_adapters(&mut model, &args.adapters)?;
    let mut plan = resolve_plan(&args.plan, args.levels)?;
    if let Some(w) = &args.combine_weights {
        plan.combination = Some(parse_combination(w, args.adapters.len())?);
        plan.validate()?;
    }
    let dir = args.inputs.as_deref();
    let x = read_input(dir, "x.npy", args.n)?;
    let conditions: Vec<Option<Array4<f32>>> = match args.adapters.len() {
        0 => vec![],
        1 => vec![read_input(dir, "y.npy", args.n)?],
        k => (0..k)
            .map(|i| read_input(dir, &format!("y{i}.npy"), args.n))
            .collect::<Result<_>>()?,
    };
    let all: Vec<&Option<Array4<f32>>> = std::iter::once(&x).chain(conditions.iter()).collect();
    let dims = branch_dims(&ck, &all, args.size);
    let inputs = PlanInputs {
        n: args.n,
        dims,
        x,
        conditions,
    };
    let base = substream_seed(args.seed, "noise");
    let mut rngs: Vec<_> = (0..args.n as u64).map(|i| indexed(base, i)).collect();
    let out = run_plan(&model, &plan, &inputs, &mut rngs)?;

    create_dir(&args.out)?;
    let mut arrays = serde_json::Map::new();
    let mut emit = |name: &str, a: &Array4<f32>| -> Result<()> {
        write_npy(&args.out.join(format!("{name}.npy")), a)?;
        for i in 0..a.dim().0 {
            write_png(&args.out.join(format!("{name}_{i:03}.png")), a, i)?;
        }
        arrays.insert(name.to_string(), json!(sha256_array(a)));
        Ok(())
    };
    emit("x", &out.x)?;
    for (i, y) in out.conditions.iter().enumerate() {
        let name = if out.conditions.len() == 1 { "y".to_string() } else { format!("y{i}") };
        emit(&name, y)?;
    }
    let input_hashes: serde_json::Map<String, Value> = std::iter::once(("x".to_string(), &inputs.x))
        .chain(inputs.conditions.iter().enumerate().map(|(i, c)| (format!("y{i}"), c)))
        .filter_map(|(k, a)| a.as_ref().map(|a| (k, json!(sha256_array(a)))))
        .collect();
    let adapters: Vec<Value> = args
        .adapters
        .iter()
        .map(|p| Ok(json!({"path": p, "sha256": sha256_file(p)?})))
        .collect::<Result<_>>()?;
    let manifest = json!({
        "plan": plan,
        "n": args.n,
        "seed": args.seed,
        "noise_stream": base,
        "dims": [dims.0, dims.1, dims.2],
        "base": {"path": args.base, "sha256": sha256_file(&args.base)?},
        "adapters": adapters,
        "inputs": input_hashes,
        "outputs": arrays,
        "evaluations": out.evaluations,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalTask {
    GaussConditional,
    BlobFidelity,
    CoarseMonotonicity,
    GuidanceGain,
}

pub fn evaluate(cfg: &RunConfig, task: EvalTask, base: &Path, adapters: &[PathBuf]) -> Result<Value> {
    let ev = cfg.eval();
    ev.validate()?;
    let th = &ev.thresholds;
    let mut model = load_base(base, Some(cfg))?;
    attach_adapters(&mut model, adapters)?;
    if model.num_adapters() == 0 {
        return Err(Error::MissingInput("evaluation needs an adapter checkpoint".into()));
    }
    let seed = substream_seed(cfg.seed, "eval");
    let (metrics, pass) = match task {
        EvalTask::GaussConditional => {
            let r = gaussian_conditional_check(&model, ev.rho, ev.y_star, ev.n, ev.levels, seed)?;
            let target_var = 1.0 - ev.rho * ev.rho;
            let pass = r.mean_err <= th.mean_err && r.var >= th.var_low && r.var <= th.var_high;
            (json!({"result": r, "target_mean": ev.rho * ev.y_star, "target_var": target_var}), pass)
        }
        EvalTask::BlobFidelity => {
            let r = blob_fidelity(&model, &cfg.data()?, ev.n, ev.levels, seed)?;
            (json!(r), r.ratio < th.fidelity_ratio)
        }
        EvalTask::CoarseMonotonicity => {
            let r = coarse_monotonicity(&model, &cfg.data()?, ev.n, ev.levels, &ev.fractions, seed)?;
            let pass = r.non_decreasing && r.spearman.rho > 0.0 && r.spearman.p_greater < th.spearman_p;
            (json!(r), pass)
        }
        EvalTask::GuidanceGain => {
            let g = ev.guidance.clone().unwrap_or_else(|| Guidance::reference(ev.known.clone()));
            let r = guidance_gain(&model, &cfg.data()?, ev.n, ev.levels, &ev.known, &g, seed)?;
            (json!(r), r.ratio <= th.guidance_ratio)
        }
    };
    let task_name = match task {
        EvalTask::GaussConditional => "gauss_conditional",
        EvalTask::BlobFidelity => "blob_fidelity",
        EvalTask::CoarseMonotonicity => "coarse_monotonicity",
        EvalTask::GuidanceGain => "guidance_gain",
    };
    let doc = json!({
        "task": task_name,
        "metrics": metrics,
        "thresholds": th,
        "pass": pass,
        "n": ev.n,
        "levels": ev.levels,
    });
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("eval_{task_name}.json")), &doc)?;
    Ok(doc)
}

/// Writes `n` pairs as `x.npy`/`y.npy` with a manifest.
pub fn export_data(cfg: &RunConfig, n: usize, out: &Path) -> Result<Value> {
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let spec = cfg.data()?;
    let (x, y) = spec.batch::<f32>(0, n);
    create_dir(out)?;
    write_npy(&out.join("x.npy"), &x)?;
    write_npy(&out.join("y.npy"), &y)?;
    let manifest = json!({
        "count": n,
        "spec": spec,
        "seed": spec.seed(),
        "files": {"x": "x.npy", "y": "y.npy"},
        "sha256": {"x": sha256_array(&x), "y": sha256_array(&y)},
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
