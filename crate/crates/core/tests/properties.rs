mod common;

use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::Rng;
use vnnet_core::decoder::{sampling_curve, scheduled_sampling_prob};
use vnnet_core::fusion::dqam_with_weights;
use vnnet_core::graph_core::{dynamic_adjacency, static_adjacency};
use vnnet_core::interpretation::{
    contribution_report, day_groups, integrated_gradients, modal_delta, Attributable, AttributionNorm, BaselineInputs,
    IgOptions, LinearSurrogate, OutputSelection,
};
use vnnet_core::numerical_encoder::NumericalFeatures;
use vnnet_core::training::{mae_rmse, ErrorSums};
use vnnet_core::vision_encoder::VisionFeatures;
use vnnet_core::Error;
use vnnet_ingest::TargetFactor;

fn assert_stochastic(a: &Array2<f64>) -> Result<(), TestCaseError> {
    for row in a.rows() {
        prop_assert!(row.iter().all(|&v| v >= 0.0));
        prop_assert!((row.sum() - 1.0).abs() < 1e-9, "row sums to {}", row.sum());
    }
    Ok(())
}

/// `f = Σ_{s,n} c_{s,n} · exp(u·X + q·I)`: convex along any straight path,
/// so the midpoint rule error shrinks strictly with more steps.
struct ExpSurrogate {
    u: Array3<f64>,
    q: Array4<f64>,
    c: Array2<f64>,
}

impl ExpSurrogate {
    fn inner(&self, x: &Array3<f64>, i: Option<&Array4<f64>>) -> f64 {
        (&self.u * x).sum() + i.map_or(0.0, |i| (&self.q * i).sum())
    }
}

impl Attributable for ExpSurrogate {
    fn horizon(&self) -> usize {
        self.c.nrows()
    }

    fn nodes(&self) -> usize {
        self.c.ncols()
    }

    fn forecast(&self, x: &Array3<f64>, i: Option<&Array4<f64>>) -> vnnet_core::Result<Array2<f64>> {
        let e = self.inner(x, i).exp();
        Ok(self.c.mapv(|c| c * e))
    }

    fn weighted_gradient(
        &self,
        x: &Array3<f64>,
        i: Option<&Array4<f64>>,
        weights: &Array2<f64>,
    ) -> vnnet_core::Result<(f64, Array3<f64>, Option<Array4<f64>>)> {
        let e = self.inner(x, i).exp();
        let scale = (&self.c * weights).sum() * e;
        Ok((scale, &self.u * scale, i.map(|_| &self.q * scale)))
    }
}

fn random_ig(t_h: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = common::rng(seed);
    Array2::from_shape_fn((t_h, d), |_| r.random_range(0.0..1.0) * 10f64.powi(r.random_range(-3..3)))
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|c| format!("f{c}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn learned_adjacency_rows_are_distributions(seed in any::<u64>(), n in 1usize..8, d in 1usize..5, mag in 0.1f64..30.0) {
        let mut r = common::rng(seed);
        let e = common::uniform2(n, d, mag, &mut r);
        assert_stochastic(&static_adjacency(&e).unwrap())?;
        let x = common::uniform2(n, d + 1, mag, &mut r);
        let w1 = common::uniform2(d + 1, d, 1.0, &mut r);
        let w2 = common::uniform2(d + 1, d, 1.0, &mut r);
        assert_stochastic(&dynamic_adjacency(&x, &w1, &w2).unwrap())?;
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), double in any::<bool>(), mag in 0.1f64..20.0) {
        let mut r = common::rng(seed);
        let (l, n, f, c) = (2, r.random_range(1..5), r.random_range(2..5), r.random_range(1..4));
        let p = common::random_fusion(seed, l * n, f, c, double);
        let zn = NumericalFeatures { values: common::uniform3((l, n, f), mag, &mut r) };
        let zv = VisionFeatures { values: common::uniform3((r.random_range(1..4), r.random_range(1..4), c), mag, &mut r) };
        let (_, a) = dqam_with_weights(&zn, &zv, &p).unwrap();
        assert_stochastic(&a)?;
    }

    #[test]
    fn percentages_sum_to_one_hundred(seed in any::<u64>(), t_h in 1usize..40, d in 1usize..12) {
        let ig = random_ig(t_h, d, seed);
        let statics: Vec<usize> = (0..d).filter(|c| c % 4 == 3).collect();
        let rep = contribution_report(&ig, &names(d), &statics).unwrap();
        prop_assert!((rep.percentages.sum() - 100.0).abs() < 1e-6);
        let meteo: f64 = (0..d).filter(|c| !statics.contains(c)).map(|c| rep.totals[c]).sum();
        prop_assert!((meteo + rep.sic - 100.0).abs() < 1e-6);
        let grouped: f64 = rep.groups.iter().flat_map(|g| g.percent.iter()).sum();
        prop_assert!((grouped - 100.0).abs() < 1e-6);
        prop_assert!(rep.top5_mfc <= meteo + 1e-9);
        prop_assert_eq!(rep.top5_factors.len(), (d - statics.len()).min(5));
    }

    #[test]
    fn top_factors_ignore_global_scale(seed in any::<u64>(), t_h in 1usize..30, d in 1usize..12, scale in 1e-6f64..1e6) {
        let ig = random_ig(t_h, d, seed);
        let a = contribution_report(&ig, &names(d), &[0]).unwrap();
        let b = contribution_report(&(&ig * scale), &names(d), &[0]).unwrap();
        prop_assert_eq!(&a.top5_factors, &b.top5_factors);
        prop_assert!((a.top5_mfc - b.top5_mfc).abs() < 1e-8);
        prop_assert!((a.sic - b.sic).abs() < 1e-8);
    }

    #[test]
    fn modal_delta_is_a_difference_of_sums(s1 in any::<u64>(), s2 in any::<u64>(), t_h in 1usize..20, d in 2usize..10) {
        let statics = vec![d - 1];
        let uni = contribution_report(&random_ig(t_h, d, s1), &names(d), &statics).unwrap();
        let multi = contribution_report(&random_ig(t_h, d, s2), &names(d), &statics).unwrap();
        let (dm, ds) = modal_delta(&uni, &multi).unwrap();
        let top = |r: &vnnet_core::interpretation::AttributionReport| -> f64 {
            r.top5_factors.iter().map(|f| r.totals[r.factors.iter().position(|x| x == f).unwrap()]).sum()
        };
        prop_assert!((dm - (top(&multi) - top(&uni))).abs() < 1e-9);
        prop_assert!((ds - (multi.totals[d - 1] - uni.totals[d - 1])).abs() < 1e-9);
    }

    #[test]
    fn rmse_never_below_mae(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (mae, rmse) = mae_rmse(&p, &t).unwrap();
        prop_assert!(rmse >= mae - 1e-12);
    }

    #[test]
    fn chunked_metrics_match_direct_sums(seed in any::<u64>(), b in 1usize..6, t_p in 1usize..5, n in 1usize..5, chunk in 1usize..4) {
        let mut r = common::rng(seed);
        let pred = common::uniform3((b, t_p, n), 30.0, &mut r);
        let truth = common::uniform3((b, t_p, n), 30.0, &mut r);
        let mut sums = ErrorSums::default();
        let mut start = 0;
        while start < b {
            let end = (start + chunk).min(b);
            let s = ndarray::s![start..end, .., ..];
            sums.add(&pred.slice(s).to_owned(), &truth.slice(s).to_owned());
            start = end;
        }
        let count = (b * t_p * n) as f64;
        let mut abs = 0.0;
        let mut sq = 0.0;
        for (p, t) in pred.iter().zip(truth.iter()) {
            abs += (p - t).abs();
            sq += (p - t) * (p - t);
        }
        let rep = sums.report(TargetFactor::Temperature);
        prop_assert!((rep.mae - abs / count).abs() < 1e-9);
        prop_assert!((rep.rmse - (sq / count).sqrt()).abs() < 1e-9);
        prop_assert_eq!(rep.count, b * t_p * n);
    }

    #[test]
    fn sampling_probability_follows_the_decay(i in 0u64..200_000, k in 1.0f64..5000.0) {
        let p = scheduled_sampling_prob(i, k).unwrap();
        prop_assert_eq!(p, k / (k + (i as f64 / k).exp()));
        prop_assert!(p > 0.0 || i as f64 / k > 700.0);
        prop_assert!(p <= scheduled_sampling_prob(i.saturating_sub(1), k).unwrap());
        prop_assert!((sampling_curve(k * k.ln(), k).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn linear_attribution_is_exact(seed in any::<u64>(), m in 1usize..40, t_h in 1usize..6, n in 1usize..4, d in 1usize..4, t_p in 1usize..4, with_vision in any::<bool>()) {
        let mut r = common::rng(seed);
        let f = LinearSurrogate {
            w: common::uniform3((t_h, n, d), 1.0, &mut r),
            v: with_vision.then(|| Array4::from_shape_fn((t_h, 2, 2, 1), |_| r.random_range(-1.0..1.0))),
            horizon: t_p,
            nodes: n,
        };
        let x = common::uniform3((t_h, n, d), 2.0, &mut r);
        let i = with_vision.then(|| Array4::from_shape_fn((t_h, 2, 2, 1), |_| r.random_range(0.0..1.0)));
        let base = BaselineInputs {
            numerical: common::uniform3((t_h, n, d), 0.5, &mut r),
            vision: with_vision.then(|| Array4::zeros((t_h, 2, 2, 1))),
        };
        let opts = IgOptions { m_steps: m, ..IgOptions::default() };
        let ig = integrated_gradients(&f, &x, i.as_ref(), &base, opts).unwrap();
        let c: f64 = (0..t_p).flat_map(|s| (0..n).map(move |k| 1.0 + (s + k) as f64)).sum();
        let scale = 1.0 / (t_p * n * n) as f64;
        for t in 0..t_h {
            for ch in 0..d {
                let want: f64 = (0..n).map(|k| (c * f.w[[t, k, ch]] * (x[[t, k, ch]] - base.numerical[[t, k, ch]])).abs()).sum::<f64>() * scale;
                prop_assert!((ig.per_step[[t, ch]] - want).abs() <= 1e-10 * (1.0 + want.abs()));
            }
        }
        let delta = ig.value_input - ig.value_baseline;
        if delta.abs() > 1e-6 {
            prop_assert!(ig.completeness_residual() < 1e-9, "{}", ig.completeness_residual());
        }
    }

    #[test]
    fn zero_displacement_gives_zero_attribution(seed in any::<u64>(), m in 1usize..20, steps in any::<bool>()) {
        let mut r = common::rng(seed);
        let (t_h, n, d) = (4, 3, 2);
        let f = ExpSurrogate {
            u: common::uniform3((t_h, n, d), 0.3, &mut r),
            q: Array4::zeros((t_h, 1, 1, 1)),
            c: Array2::from_shape_fn((2, n), |_| r.random_range(0.1..1.0)),
        };
        let x = common::uniform3((t_h, n, d), 1.0, &mut r);
        let base = BaselineInputs { numerical: x.clone(), vision: None };
        let norm = if steps { AttributionNorm::NodesAndSteps } else { AttributionNorm::Nodes };
        let ig = integrated_gradients(&f, &x, None, &base, IgOptions { m_steps: m, selection: OutputSelection::All, norm }).unwrap();
        prop_assert!(ig.per_step.iter().all(|&v| v == 0.0));
        prop_assert!(matches!(
            contribution_report(&ig.per_step, &names(d), &[]),
            Err(Error::DegenerateAttribution)
        ));
    }

    #[test]
    fn completeness_residual_shrinks_with_steps(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (t_h, n, d) = (3, 2, 2);
        let f = ExpSurrogate {
            u: common::uniform3((t_h, n, d), 0.4, &mut r),
            q: Array4::from_shape_fn((t_h, 2, 2, 1), |_| r.random_range(-0.4..0.4)),
            c: Array2::from_shape_fn((2, n), |_| r.random_range(0.1..1.0)),
        };
        let x = common::uniform3((t_h, n, d), 1.0, &mut r);
        let i = Array4::from_shape_fn((t_h, 2, 2, 1), |_| r.random_range(0.0..1.0));
        let base = BaselineInputs { numerical: Array3::zeros((t_h, n, d)), vision: Some(Array4::zeros((t_h, 2, 2, 1))) };
        let path = f.inner(&x, Some(&i));
        prop_assume!(path.abs() > 1e-3);
        let residual = |m: usize| {
            integrated_gradients(&f, &x, Some(&i), &base, IgOptions { m_steps: m, ..IgOptions::default() })
                .unwrap()
                .completeness_residual()
        };
        let (r8, r64, r512) = (residual(8), residual(64), residual(512));
        prop_assert!(r8 > r64 && r64 > r512, "{} {} {}", r8, r64, r512);
        prop_assert!(r512 < 1e-4);
    }

    #[test]
    fn day_groups_partition_the_history(t_h in 1usize..200) {
        let groups = day_groups(t_h);
        let mut next = 0;
        for (_, rows) in &groups {
            prop_assert_eq!(rows.start, next);
            prop_assert!(rows.end > rows.start);
            next = rows.end;
        }
        prop_assert_eq!(next, t_h);
    }
}

#[test]
fn per_step_norm_sums_individual_steps() {
    let mut r = common::rng(5);
    let (t_h, n, d, t_p) = (3, 2, 2, 3);
    let f = LinearSurrogate {
        w: common::uniform3((t_h, n, d), 1.0, &mut r),
        v: None,
        horizon: t_p,
        nodes: n,
    };
    let x = common::uniform3((t_h, n, d), 1.0, &mut r);
    let base = BaselineInputs {
        numerical: Array3::zeros((t_h, n, d)),
        vision: None,
    };
    let ig = integrated_gradients(
        &f,
        &x,
        None,
        &base,
        IgOptions {
            m_steps: 4,
            selection: OutputSelection::All,
            norm: AttributionNorm::NodesAndSteps,
        },
    )
    .unwrap();
    let scale = 1.0 / (t_p * n * n) as f64;
    for t in 0..t_h {
        for c in 0..d {
            let want: f64 = (0..t_p)
                .map(|s| {
                    let cs: f64 = (0..n).map(|k| 1.0 + (s + k) as f64).sum();
                    (0..n).map(|k| (cs * f.w[[t, k, c]] * x[[t, k, c]]).abs()).sum::<f64>()
                })
                .sum::<f64>()
                * scale;
            assert!((ig.per_step[[t, c]] - want).abs() < 1e-10);
        }
    }
}
