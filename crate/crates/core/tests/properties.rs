//! Randomized invariants over the public API.

use std::f64::consts::PI;

use proptest::prelude::*;

use mfglab::carleman::{
    estimate_terms, lambda_of_delta_p1, lambda_of_delta_p2, parameter_formulas, weight1, weight2, EstimateId,
    EstimateParams, Weight1Params, Weight2Params, WeightChoice,
};
use mfglab::grid::{norm, NormKind, Region};
use mfglab::mfg_system::{interaction_value, Coupling, InteractionSpec, Kernel};
use mfglab::reconstruct::{DataTraces, ReconstructionConfig, Reconstructor};
use mfglab::scenario::ScenarioSpec;
use mfglab::stability_lab::ProblemId;
use mfglab::{Field, Grid, SpatialField};

fn grid1(n: usize, nt: usize) -> Grid {
    Grid::new(&[(0.0, 1.0)], &[n], 1.0, nt).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn trapezoid_is_exact_on_multilinear_fields(
        nx in 3usize..20, ny in 3usize..20, nt in 3usize..20,
        a in -5.0..5.0f64, bx in -5.0..5.0f64, by in -5.0..5.0f64, bt in -5.0..5.0f64, bxy in -5.0..5.0f64,
        hi in 0.5..3.0f64,
    ) {
        let g = Grid::new(&[(0.0, hi), (-1.0, 1.0)], &[nx, ny], 2.0, nt).unwrap();
        let f = Field::from_fn(g, |x, t| a + bx * x[0] + by * x[1] + bt * t + bxy * x[0] * x[1] * t);
        // ∫ over (0,hi)×(−1,1)×(0,2); odd terms in x[1] vanish
        let exact = a * hi * 2.0 * 2.0 + bx * 0.5 * hi * hi * 2.0 * 2.0 + bt * hi * 2.0 * 2.0;
        let got = g.integrate(&f, Region::Full).unwrap();
        prop_assert!((got - exact).abs() <= 1e-11 * (1.0 + exact.abs()), "{got} vs {exact}");
    }

    #[test]
    fn restricted_norms_grow_with_the_slab(
        seed in 0u64..1000, lo in 0.0..0.5f64, w1 in 0.05..0.2f64, w2 in 0.0..0.3f64,
    ) {
        let g = grid1(17, 33);
        let f = Field::from_fn(g, |x, t| ((seed as f64 + 1.0) * x[0]).sin() * (1.0 + t * t) + (3.0 * t).cos());
        let small = Region::Slab { t_lo: lo, t_hi: lo + w1 };
        let big = Region::Slab { t_lo: (lo - w2).max(0.0), t_hi: (lo + w1 + w2).min(1.0) };
        for kind in [NormKind::L2Q, NormKind::H10Q, NormKind::H21Q, NormKind::H2Q] {
            let a = norm(&f, kind, small).unwrap();
            let b = norm(&f, kind, big).unwrap();
            prop_assert!(a <= b * (1.0 + 1e-14), "{kind:?}: {a} > {b}");
        }
    }

    #[test]
    fn cosine_modes_satisfy_discrete_neumann(k0 in 0usize..8, k1 in 0usize..8, n0 in 5usize..30, n1 in 5usize..30) {
        let (a0, b0, a1, b1) = (0.5, 2.0, -1.0, 0.3);
        let g = Grid::new(&[(a0, b0), (a1, b1)], &[n0, n1], 1.0, 3).unwrap();
        let f = |x0: f64, x1: f64| {
            (k0 as f64 * PI * (x0 - a0) / (b0 - a0)).cos() * (k1 as f64 * PI * (x1 - a1) / (b1 - a1)).cos()
        };
        let u = SpatialField::from_fn(g, |x| f(x[0], x[1]));
        // the closed form continued past each wall equals its mirror image
        let (h0, h1) = (g.h(0), g.h(1));
        for s in 0..g.spatial_len() {
            let x = g.spatial_coords(s);
            prop_assert!((f(a0 - h0, x[1]) - f(a0 + h0, x[1])).abs() <= 1e-13);
            prop_assert!((f(b0 + h0, x[1]) - f(b0 - h0, x[1])).abs() <= 1e-13);
            prop_assert!((f(x[0], a1 - h1) - f(x[0], a1 + h1)).abs() <= 1e-13);
            prop_assert!((f(x[0], b1 + h1) - f(x[0], b1 - h1)).abs() <= 1e-13);
        }
        // so the mirror-ghost normal derivative vanishes on every wall
        let grad = u.gradient();
        for s in 0..g.spatial_len() {
            let idx = g.spatial_multi_index(s);
            for a in 0..2 {
                if idx[a] == 0 || idx[a] + 1 == g.axis(a).nodes {
                    prop_assert!(grad[a].values()[s].abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn tanh_interaction_is_bounded_pointwise(
        gy in -2.0..2.0f64, gz in -2.0..2.0f64, sigma in 0.1..1.0f64, amp in -2.0..2.0f64, seed in 0u64..100,
    ) {
        let g = grid1(17, 5);
        let spec = InteractionSpec {
            kernel: Kernel::Gaussian { sigma, amplitude: amp },
            coupling: Coupling::Tanh { gamma_y: gy, gamma_z: gz },
        };
        let s = seed as f64;
        let m = Field::from_fn(g, |x, t| 3.0 * ((s + 1.0) * x[0] + t).cos() + s.sin());
        let spec_avg = InteractionSpec { coupling: Coupling::Linear { gamma_y: 1.0, gamma_z: 0.0 }, ..spec.clone() };
        let avg = interaction_value(&m, &spec_avg);
        let f = interaction_value(&m, &spec);
        let d1 = spec.coupling.derivative_bound();
        let f00 = spec.coupling.value(0.0, 0.0).abs();
        for i in 0..g.len() {
            let bound = f00 + d1 * (avg.values()[i].abs() + m.values()[i].abs());
            prop_assert!(f.values()[i].abs() <= bound + 1e-14);
        }
    }

    #[test]
    fn mean_value_slopes_reproduce_differences(
        gy in -2.0..2.0f64, gz in -2.0..2.0f64,
        y1 in -4.0..4.0f64, z1 in -4.0..4.0f64, y2 in -4.0..4.0f64, z2 in -4.0..4.0f64,
    ) {
        for c in [Coupling::Tanh { gamma_y: gy, gamma_z: gz }, Coupling::Linear { gamma_y: gy, gamma_z: gz }] {
            let (f1, f2) = c.mean_value_slopes((y1, z1), (y2, z2));
            let lhs = c.value(y1, z1) - c.value(y2, z2);
            let rhs = f1 * (y1 - y2) + f2 * (z1 - z2);
            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + lhs.abs()));
            let d = c.derivative_bound();
            prop_assert!(f1.abs() <= d * (1.0 + 1e-12) && f2.abs() <= d * (1.0 + 1e-12));
        }
    }

    #[test]
    fn weights_are_positive_and_monotone(
        t in 0.0..0.99f64, dt in 0.001..0.01f64, lambda in 0.5..30.0f64, k in 2.1..6.0f64, b in 0.1..2.0f64,
        c in 2.01..5.0f64, lp in 2.01..8.0f64,
    ) {
        let p = Weight1Params { b, lambda, k };
        let w = |t: f64, p: &Weight1Params| weight1(t, p).log_value;
        prop_assert!(weight1(t, &p).value > 0.0);
        prop_assert!(w(t + dt, &p) > w(t, &p));
        if t + b > 1.0 {
            let more_lambda = Weight1Params { lambda: lambda * 1.1, ..p };
            let more_k = Weight1Params { k: k + 0.1, ..p };
            prop_assert!(w(t, &more_lambda) > w(t, &p));
            prop_assert!(w(t, &more_k) > w(t, &p));
        }
        let q = Weight2Params { c, lambda: lp, horizon: 1.0 };
        prop_assert!(weight2(t, &q).value > 0.0);
        prop_assert!(weight2(t + dt, &q).log_value < weight2(t, &q).log_value);
    }

    #[test]
    fn estimate_terms_are_quadratic(s in -20.0..20.0f64, w in 0.5..4.0f64, lambda in 2.0..20.0f64) {
        let g = grid1(17, 17);
        let u = Field::from_fn(g, |x, t| (PI * x[0]).cos() * (w * t).sin() + 0.3 * (2.0 * PI * x[0]).cos());
        let v = Field::from_fn(g, |x, t| (3.0 * PI * x[0]).cos() * (1.0 + t));
        let gf = Field::from_fn(g, |x, t| 0.2 * (x[0] + t).sin());
        let w1 = WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda, k: 4.0 });
        let w2 = WeightChoice::Power(Weight2Params { c: 3.0, lambda: 2.0 + lambda / 4.0, horizon: 1.0 });
        for (id, weight) in [(EstimateId::T31, w1), (EstimateId::T32, w1), (EstimateId::T33, w2), (EstimateId::T34, w2)] {
            let p = EstimateParams { beta: 0.1, weight, k0: 4.0, allow_below_threshold: true };
            let a = estimate_terms(id, &u, Some(&v), Some(&gf), &p).unwrap();
            let b = estimate_terms(id, &u.scale(s), Some(&v.scale(s)), Some(&gf), &p).unwrap();
            for (x, y) in a.terms.iter().zip(&b.terms) {
                prop_assert!((y.value - s * s * x.value).abs() <= 1e-12 * (s * s * x.value).abs().max(1e-300), "{id:?} {}", x.name);
            }
        }
    }

    #[test]
    fn parameter_formulas_stay_in_range(t in 0.01..100.0f64, frac in 0.001..0.999f64, k in 2.0001..12.0f64, dc in 0.0001..10.0f64) {
        let p = parameter_formulas(t, frac * t, k, None).unwrap();
        prop_assert!(p.xi > 0.0 && p.xi < 1.0);
        prop_assert!(p.rho > 0.0 && p.rho < 1.0 / 6.0);
        prop_assert!(p.eta > 0.0 && p.eta < 1.0 / 6.0);
        let q = parameter_formulas(t, frac * t, k, Some(2.0 + dc)).unwrap();
        prop_assert!(q.eta < 1.0 / 6.0 && q.rho < 1.0 / 6.0);
    }

    #[test]
    fn delta_calibration_identities(log_delta in -30.0..-0.1f64, t in 0.1..5.0f64, k in 2.1..6.0f64, c in 2.01..6.0f64) {
        let delta = log_delta.exp();
        // e^{3λ(T+1)^k} δ² = δ, in logs
        let l1 = lambda_of_delta_p1(delta, t, k).unwrap();
        let lhs = 3.0 * l1 * (t + 1.0).powf(k) + 2.0 * log_delta;
        prop_assert!((lhs - log_delta).abs() <= 1e-12 * log_delta.abs());
        if delta < (-3.0f64).exp() {
            // e^{3(T+c)^λ} δ² = δ
            let l2 = lambda_of_delta_p2(delta, t, c).unwrap();
            let lhs = 3.0 * (t + c).powf(l2) + 2.0 * log_delta;
            prop_assert!((lhs - log_delta).abs() <= 1e-12 * log_delta.abs());
        }
    }

    #[test]
    fn zeroth_term_grows_with_lambda(lambda in 1.0..30.0f64, step in 0.1..5.0f64, w in 0.5..5.0f64) {
        let g = grid1(17, 17);
        let u = Field::from_fn(g, |x, t| (PI * x[0]).cos() * (1.0 + (w * t).sin().powi(2)));
        let at = |l: f64| {
            let p = EstimateParams {
                beta: 0.1,
                weight: WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: l, k: 3.0 }),
                k0: 4.0,
                allow_below_threshold: false,
            };
            let r = estimate_terms(EstimateId::T31, &u, None, None, &p).unwrap();
            r.term("zeroth").unwrap().ln() + r.log_scale
        };
        prop_assert!(at(lambda + step) > at(lambda));
    }

    #[test]
    fn projection_is_idempotent_and_feasible(seed in 0u64..1000, p2 in any::<bool>()) {
        let spec = ScenarioSpec::reference(mfglab::grid::GridSpec { extents: vec![(0.0, 1.0)], nodes: vec![9], horizon: 1.0, time_nodes: 9 });
        let mp = spec.build().unwrap();
        let g = mp.problem.grid;
        let (id, level, weight) = if p2 {
            (ProblemId::P2, 0, WeightChoice::Power(Weight2Params { c: 3.2, lambda: 3.0, horizon: 1.0 }))
        } else {
            (ProblemId::P1, g.time_len() - 1, WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 2.0, k: 3.0 }))
        };
        let data = DataTraces { u: mp.u.trace(level), m: mp.m.trace(level) };
        let rec = Reconstructor::new(&mp.problem, data, &ReconstructionConfig::new(id, weight)).unwrap();
        let s = seed as f64;
        let u = Field::from_fn(g, |x, t| (s * x[0] + t).sin());
        let m = Field::from_fn(g, |x, t| (s * t - x[0]).cos());
        let (pu, pm) = rec.project(&u, &m);
        let (qu, qm) = rec.project(&pu, &pm);
        prop_assert_eq!(pu.values(), qu.values());
        prop_assert_eq!(pm.values(), qm.values());
        let (tu, tm) = (pu.trace(level), pm.trace(level));
        let (du, dm) = (mp.u.trace(level), mp.m.trace(level));
        prop_assert_eq!(tu.values(), du.values());
        prop_assert_eq!(tm.values(), dm.values());
    }
}
