//! Analytic gradients against central finite differences at 64-bit on a
//! 1×1-spatial tiny model.

use jointdiff::nn::Trainable;
use jointdiff::rng::{indexed, normal, substream};
use jointdiff::sampling::{
    broadcast_mask, guidance_loss_and_grad, reconstruction_guidance, GuidedBranch, Region,
};
use jointdiff::training::{denoising_loss, NoisedBranch};
use jointdiff::{attach, AdapterOptions, AdapterSet, DenoiserConfig, JointDenoiser64, JointOverrides, ScheduleParams};
use ndarray::Array4;

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        base_width: 8,
        attn_heads: 2,
        head_dim: 4,
        time_embed_dim: 8,
        norm_groups: 2,
        ff_mult: 2,
        ..DenoiserConfig::pointwise()
    }
}

/// Tiny base with one adapter set whose tensors are all non-zero, so every
/// gradient path is exercised.
fn model() -> JointDenoiser64 {
    let mut m = JointDenoiser64::new_base(tiny(), &ScheduleParams::toy(), &mut substream(1, "init")).unwrap();
    let opts = AdapterOptions {
        rank: 2,
        ..AdapterOptions::default()
    };
    let mut set = AdapterSet::new(&m, &opts, &mut substream(1, "adapter")).unwrap();
    let names: Vec<String> = set.tensors().names().cloned().collect();
    let mut r = substream(1, "perturb");
    for name in names {
        set.tensor_mut(&name)
            .unwrap()
            .mapv_inplace(|v| v + 0.3 * normal::<f64, _>(&mut r));
    }
    attach(&mut m, set).unwrap();
    m
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut r = indexed(seed, 0);
    Array4::from_shape_simple_fn(shape, || normal::<f64, _>(&mut r))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[test]
fn adapt_loss_gradient_matches_finite_differences() {
    let mut m = model();
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
    assert!(!grads.is_empty());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (key, g) in &grads {
        let name = key.strip_prefix("@0/").expect("adapter slot 0");
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut at = |delta: f64| {
                m.adapter_mut(0).unwrap().tensor_mut(name).unwrap()[[r, c]] += delta;
                let (l, _) = denoising_loss(&m, &branches, true, Trainable::Nothing).unwrap();
                m.adapter_mut(0).unwrap().tensor_mut(name).unwrap()[[r, c]] -= delta;
                l.loss_total
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let e = rel_err(g[[r, c]], numeric);
            assert!(e < 1e-4, "{name}[{r},{c}]: analytic {} numeric {numeric}", g[[r, c]]);
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert_eq!(checked, m.num_adapter_parameters());
    eprintln!("adapt loss: {checked} entries, worst relative error {worst:.2e}");
}

#[test]
fn guidance_gradient_matches_finite_differences() {
    let m = model();
    let shape = (2, 1, 1, 1);
    let clean = randn(shape, 7);
    // Sample 0 has its condition known, sample 1 does not.
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
    let (_, grads, _) = guidance_loss_and_grad(&m, &make(&zx, &zy), &ov).unwrap();
    let h = 1e-6;
    for (b, g) in grads.iter().enumerate() {
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
            assert!(
                rel_err(g[idx], numeric) < 1e-4,
                "branch {b} {idx:?}: analytic {} numeric {numeric}",
                g[idx]
            );
        }
    }
    // The x branch influences the known y reconstruction only through the
    // joint attention, so its gradient must be non-zero there.
    assert!(grads[0][[0, 0, 0, 0]].abs() > 1e-8);
}

#[test]
fn small_guidance_step_descends() {
    let m = model();
    let shape = (4, 1, 2, 2);
    let clean = randn(shape, 11);
    let my = broadcast_mask::<f64>(&Region::Rect { top: 0, left: 0, height: 1, width: 2 }, shape);
    let branches = vec![
        GuidedBranch::from_mask(randn(shape, 12), 45, None, Array4::ones(shape)),
        GuidedBranch::from_mask(randn(shape, 13), 45, Some(clean.clone()), my.clone()),
    ];
    let ov = JointOverrides::default();
    let (before, _, _) = guidance_loss_and_grad(&m, &branches, &ov).unwrap();
    let moved = reconstruction_guidance(&m, &branches, 1e-3, &ov).unwrap();
    let after_branches = vec![
        GuidedBranch::from_mask(moved[0].clone(), 45, None, Array4::ones(shape)),
        GuidedBranch::from_mask(moved[1].clone(), 45, Some(clean), my.clone()),
    ];
    let (after, _, _) = guidance_loss_and_grad(&m, &after_branches, &ov).unwrap();
    assert!(after < before, "{after} >= {before}");
    // Known coordinates of y stay where they were.
    for idx in ndarray::indices(shape) {
        if my[idx] == 0.0 {
            assert_eq!(moved[1][idx], branches[1].z[idx]);
        }
    }
}
