//! Randomized invariants of schedules, plans, replacement, annotation and
//! the statistics helpers.

use jointdiff::data::derive_condition;
use jointdiff::eval::{average_ranks, energy_distance, spearman};
use jointdiff::sampling::{broadcast_mask, condition_guidance, latent_replacement, Region, Side};
use jointdiff::{
    add_noise, build_interpolated_plan, build_plan, predict_x0, reverse_step, Preset, PresetParams, ScheduleParams,
};
use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;

fn arr4(v: Vec<f64>) -> Array4<f64> {
    Array4::from_shape_vec((1, 1, 2, v.len() / 2), v).unwrap()
}

fn presets() -> impl Strategy<Value = Preset> {
    prop_oneof![
        Just(Preset::Joint),
        Just(Preset::XGivenY),
        Just(Preset::YGivenX),
        Just(Preset::Coarse),
        Just(Preset::Partial),
        Just(Preset::Estimation),
        Just(Preset::Interpolated),
    ]
}

fn regions() -> impl Strategy<Value = Region> {
    prop_oneof![
        Just(Region::Nothing),
        Just(Region::All),
        (0usize..6, 0usize..6, 0usize..6, 0usize..6).prop_map(|(top, left, height, width)| Region::Rect {
            top,
            left,
            height,
            width
        }),
        prop_oneof![Just(Side::Left), Just(Side::Right), Just(Side::Top), Just(Side::Bottom)]
            .prop_map(|side| Region::Half { side }),
    ]
}

proptest! {
    #[test]
    fn noising_then_predicting_recovers_the_clean_value(
        t in 0usize..=100,
        x in prop::collection::vec(-3.0f64..3.0, 8),
        e in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let s = ScheduleParams::toy().build().unwrap();
        let (x0, eps) = (Array1::from(x), Array1::from(e));
        let z = add_noise(&x0, t, &eps, &s).unwrap();
        let back = predict_x0(&z, &eps, t, &s).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_step_with_true_noise_lands_on_the_forward_path(
        t in 1usize..=100,
        back in 1usize..=100,
        x in -2.0f64..2.0,
        e in -2.0f64..2.0,
    ) {
        let s = ScheduleParams::standard().build().unwrap();
        let t = t * 10;
        let t_next = t.saturating_sub(back * 10);
        let (x0, eps) = (Array1::from(vec![x]), Array1::from(vec![e]));
        let z = add_noise(&x0, t, &eps, &s).unwrap();
        let next = reverse_step(&z, &eps, t, t_next, 0.0, &Array1::zeros(1), &s).unwrap();
        let want = add_noise(&x0, t_next, &eps, &s).unwrap();
        prop_assert!((next[0] - want[0]).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_monotone(t in 1usize..100) {
        let s = ScheduleParams::toy().build().unwrap();
        prop_assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
    }

    #[test]
    fn every_preset_builds_a_legal_plan(
        preset in presets(),
        s in 1usize..80,
        frac in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let params = PresetParams {
            t_y_start: Some((frac * s as f64).round() as usize),
            lambda,
            ..PresetParams::default()
        };
        let plan = build_plan(preset, s, &params).unwrap();
        prop_assert!(plan.validate().is_ok());
        prop_assert_eq!(*plan.steps.last().unwrap(), (0, 0));
        for w in plan.steps.windows(2) {
            prop_assert!(w[1].0 <= w[0].0 && w[1].1 <= w[0].1 && w[1] != w[0]);
        }
        // Level to timestep: endpoints exact, monotone in between.
        prop_assert_eq!(plan.timestep(0, 100), 0);
        prop_assert_eq!(plan.timestep(s, 100), 100);
        for l in 0..s {
            prop_assert!(plan.timestep(l, 100) <= plan.timestep(l + 1, 100));
        }
        match preset {
            Preset::Coarse => prop_assert_eq!(plan.steps[0], (s, params.t_y_start.unwrap())),
            Preset::XGivenY => prop_assert!(plan.steps.iter().all(|p| p.1 == 0)),
            Preset::YGivenX => prop_assert!(plan.steps.iter().all(|p| p.0 == 0)),
            Preset::Joint | Preset::Partial => prop_assert_eq!(plan.steps.len(), s + 1),
            _ => {}
        }
    }

    #[test]
    fn interpolated_plan_starts_at_complementary_levels(s in 1usize..80, lambda in 0.0f64..=1.0) {
        let plan = build_interpolated_plan(s, lambda).unwrap();
        let (a, b) = plan.steps[0];
        prop_assert_eq!(a + b, s);
        prop_assert!(plan.validate().is_ok());
    }

    #[test]
    fn replacement_mixes_elementwise(
        mask in prop::collection::vec(prop::bool::ANY, 6),
        z in prop::collection::vec(-2.0f64..2.0, 6),
        c in prop::collection::vec(-2.0f64..2.0, 6),
        e in prop::collection::vec(-2.0f64..2.0, 6),
        t in 0usize..=100,
    ) {
        let s = ScheduleParams::toy().build().unwrap();
        let m = arr4(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
        let (z, c, e) = (arr4(z), arr4(c), arr4(e));
        let out = latent_replacement(&z, &c, &m, t, &e, &s).unwrap();
        let noised = add_noise(&c, t, &e, &s).unwrap();
        for idx in ndarray::indices(z.dim()) {
            let want = if m[idx] == 1.0 { z[idx] } else { noised[idx] };
            prop_assert_eq!(out[idx], want);
        }
    }

    #[test]
    fn region_masks_are_binary_and_clipped(region in regions(), h in 1usize..9, w in 1usize..9) {
        let m = region.mask::<f64>(h, w);
        prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        let known = m.iter().filter(|&&v| v == 0.0).count();
        let expected = match region {
            Region::Nothing => 0,
            Region::All => h * w,
            Region::Rect { top, left, height, width } => {
                (top + height).min(h).saturating_sub(top) * (left + width).min(w).saturating_sub(left)
            }
            Region::Half { side } => match side {
                Side::Left | Side::Right => h * (w / 2),
                Side::Top | Side::Bottom => (h / 2) * w,
            },
        };
        prop_assert_eq!(known, expected);
        let b = broadcast_mask::<f64>(&region, (2, 1, h, w));
        prop_assert_eq!(b.slice(ndarray::s![1, 0, .., ..]), m.view());
    }

    #[test]
    fn condition_guidance_is_linear_with_exact_endpoints(
        j in prop::collection::vec(-2.0f64..2.0, 4),
        sep in prop::collection::vec(-2.0f64..2.0, 4),
        k in -3.0f64..3.0,
    ) {
        let (j, sep) = (arr4(j), arr4(sep));
        let g = condition_guidance(&j, &sep, k).unwrap();
        for idx in ndarray::indices(j.dim()) {
            prop_assert!((g[idx] - (sep[idx] + k * (j[idx] - sep[idx]))).abs() < 1e-12);
        }
        prop_assert_eq!(&condition_guidance(&j, &sep, 1.0).unwrap(), &j);
        prop_assert_eq!(&condition_guidance(&j, &sep, 0.0).unwrap(), &sep);
    }

    #[test]
    fn annotation_is_bounded_and_one_on_foreground(
        pixels in prop::collection::vec(prop::bool::weighted(0.1), 64),
    ) {
        let img = Array2::from_shape_fn((8, 8), |(i, j)| if pixels[i * 8 + j] { 1.0 } else { 0.0 });
        let c = derive_condition(img.view());
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (a, b) in img.iter().zip(c.iter()) {
            if *a == 1.0 {
                prop_assert_eq!(*b, 1.0);
            }
        }
    }

    #[test]
    fn rank_statistics_are_bounded(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ranks = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        if let Ok(s) = spearman(&x, &y) {
            prop_assert!(s.rho >= -1.0 - 1e-12 && s.rho <= 1.0 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&s.p_greater));
        }
    }

    #[test]
    fn energy_distance_is_symmetric_and_non_negative(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..12),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..12),
    ) {
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab >= -1e-12);
        prop_assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
    }
}
