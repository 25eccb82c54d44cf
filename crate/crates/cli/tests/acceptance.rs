//! End-to-end acceptance run: one line per criterion, then a single verdict.
//!
//! Reference values are computed here from closed forms, independently of the
//! library, wherever a closed form exists.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfglab::carleman::{
    default_c, fit_and_verify, lambda0, lemma31_check, parameter_formulas, EstimateId, EstimateParams, TestFamily,
    Weight1Params, Weight2Params, WeightChoice,
};
use mfglab::forward_solver::{solve_conventional, PicardOptions};
use mfglab::grid::{norm, GridSpec, NormKind, Region};
use mfglab::mfg_system::MfgProblem;
use mfglab::reconstruct::{reconstruct_and_score, DataTraces, NoiseSpec, ReconstructionConfig, Reconstructor};
use mfglab::scenario::{ProblemSpec, ScenarioSpec};
use mfglab::spectral::{random_cosine_field, Spectrum};
use mfglab::stability_lab::{holder_experiment, DataTarget, PerturbationSpec, ProblemId, StabilityBase};
use mfglab::{Field, Grid, SpatialField};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn grid1(n: usize, nt: usize) -> GridSpec {
    GridSpec { extents: vec![(0.0, 1.0)], nodes: vec![n], horizon: 1.0, time_nodes: nt }
}

fn lemma_identity() -> Outcome {
    let g = Grid::new(&[(0.0, 1.0), (0.0, 1.0)], &[129, 129], 1.0, 3).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let u = random_cosine_field(&g, &Spectrum::default(), seed).unwrap();
        worst = worst.max(lemma31_check(&u).unwrap().relative_gap);
    }
    let cosine = SpatialField::from_fn(g, |x| (PI * x[0]).cos() * (PI * x[1]).cos());
    let c = lemma31_check(&cosine).unwrap();
    let target = PI.powi(4);
    let cos_err = ((c.lhs - target) / target).abs().max(((c.rhs - target) / target).abs());
    outcome(
        worst < 1e-6 && cos_err < 1e-4,
        format!("max gap {worst:.2e} over 50 fields; cosine lhs {:.6} rhs {:.6} vs pi^4 (rel {cos_err:.1e})", c.lhs, c.rhs),
    )
}

fn parameter_formulas_match() -> Outcome {
    // closed forms at T = 1, eps = 1/2, k = 3 with s = sqrt 5
    let s = 5f64.sqrt();
    let c = (4.0 + s) / 2.0;
    let lam0 = 164.0 + 48.0 * s;
    let xi = (12.0 + 2.0 * s) / (21.0 + 8.0 * s);
    let rho = 27.0 / 384.0;
    let eta = (5.0 + s) / (36.0 + 6.0 * s);
    let p = parameter_formulas(1.0, 0.5, 3.0, None).unwrap();
    let pairs = [("c", p.c, c), ("lambda0", p.lambda0, lam0), ("xi", p.xi, xi), ("rho", p.rho, rho), ("eta", p.eta, eta)];
    let worst = pairs.iter().map(|(_, a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);

    let mut scans_ok = true;
    for &t in &[0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
        for i in 1..20 {
            let eps = t * i as f64 / 20.0;
            for &k in &[2.01, 2.5, 3.0, 5.0, 10.0] {
                let q = parameter_formulas(t, eps, k, None).unwrap();
                scans_ok &= q.xi > 0.0 && q.xi < 1.0 && q.rho < 1.0 / 6.0 && q.eta < 1.0 / 6.0;
            }
        }
    }
    // printed reference constants, compared at their printed precision
    let printed = [("c", p.c, 3.118034, 5e-7), ("lambda0", p.lambda0, 271.33, 5e-3), ("xi", p.xi, 0.42357, 5e-6), ("rho", p.rho, 0.070312, 5e-7 + 1e-12), ("eta", p.eta, 0.146432, 5e-7)];
    let off: Vec<String> = printed
        .iter()
        .filter(|(_, v, r, tol)| (v - r).abs() > *tol)
        .map(|(n, v, r, _)| format!("{n}={v:.7} vs printed {r}"))
        .collect();
    let note = if off.is_empty() { String::new() } else { format!("; printed constants off in last digit: {}", off.join(", ")) };
    outcome(
        worst < 1e-6 && scans_ok && (lambda0(1.0, default_c(1.0)) - lam0).abs() < 1e-9,
        format!(
            "max rel deviation from closed forms {worst:.1e}; c {:.6} lambda0 {:.2} xi {:.5} rho {:.6} eta {:.7}; scans ok {scans_ok}{note}",
            p.c, p.lambda0, p.xi, p.rho, p.eta
        ),
    )
}

fn carleman_verification() -> Outcome {
    let g = grid1(65, 129).build().unwrap();
    let c = default_c(1.0);
    let poly = |k: f64| WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 5.0, k });
    let power = WeightChoice::Power(Weight2Params { c, lambda: 3.0, horizon: 1.0 });
    let large: Vec<f64> = (0..8).map(|i| 5.0 + 5.0 * i as f64).collect();
    let small: Vec<f64> = (0..8).map(|i| 3.0 + i as f64).collect();
    let cases = [
        (EstimateId::T31, poly(3.0), &large, false),
        (EstimateId::T32, poly(4.0), &large, false),
        (EstimateId::T33, power, &small, true),
        (EstimateId::T34, power, &small, true),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (id, weight, lambdas, below) in cases {
        let params = EstimateParams { beta: 0.1, weight, k0: 4.0, allow_below_threshold: below };
        let fam = TestFamily::default();
        let r = fit_and_verify(id, &g, &fam, lambdas, &params).unwrap();
        let ok = r.verified && r.slack == 1.5 && r.lambda_monotone && r.homogeneity_defect <= 1e-12 && fam.count == 20;
        pass &= ok;
        parts.push(format!(
            "{} {} (C_fit {:.2e}, smallest holdout constant {:.2e}, informative train/holdout {}/{}, homogeneity {:.0e})",
            id.label(),
            if ok { "ok" } else { "FAILED" },
            r.c_fit,
            r.samples.iter().filter(|s| !s.training).filter_map(|s| s.admissible_constant).fold(f64::INFINITY, f64::min),
            r.train_informative,
            r.holdout_informative,
            r.homogeneity_defect
        ));
    }
    outcome(pass, parts.join("; "))
}

fn rel_errors(n: usize, nt: usize) -> (f64, f64) {
    let mp = ScenarioSpec::reference(grid1(n, nt)).build().unwrap();
    let opts = PicardOptions { tol_res: 1e-10, ..PicardOptions::default() };
    let (u, m, rep) = solve_conventional(&mp.problem, &mp.u_terminal(), &mp.m_initial(), &opts).unwrap();
    assert!(rep.converged);
    let e = |a: &Field, b: &Field| norm(&a.sub(b).unwrap(), NormKind::L2Q, Region::Full).unwrap() / norm(b, NormKind::L2Q, Region::Full).unwrap();
    (e(&u, &mp.u), e(&m, &mp.m))
}

fn slopes(errs: &[(f64, f64)]) -> f64 {
    errs.windows(2)
        .flat_map(|w| [(w[0].0 / w[1].0).log2(), (w[0].1 / w[1].1).log2()])
        .fold(f64::INFINITY, f64::min)
}

fn forward_solver() -> Outcome {
    // time steps fine enough that the spatial error dominates, and vice versa
    let h_errs: Vec<_> = [9, 17, 33].iter().map(|&n| rel_errors(n, 16385)).collect();
    let t_errs: Vec<_> = [17, 33, 65].iter().map(|&nt| rel_errors(513, nt)).collect();
    let (sh, st) = (slopes(&h_errs), slopes(&t_errs));

    let g = grid1(65, 129).build().unwrap();
    let spec = ProblemSpec::default();
    let prob = MfgProblem::homogeneous(g, spec.beta, spec.elasticity, spec.interaction, spec.bounds).unwrap();
    let u_t = SpatialField::from_fn(g, |x| (PI * x[0]).cos() + 0.2 * (3.0 * PI * x[0]).cos());
    let m0 = SpatialField::from_fn(g, |x| 1.0 + 0.5 * (PI * x[0]).cos());
    let (_, m, _) = solve_conventional(&prob, &u_t, &m0, &PicardOptions::default()).unwrap();
    let drift = (1..g.time_len())
        .map(|n| ((m.trace(n).integrate() - m.trace(n - 1).integrate()) / m.trace(n - 1).integrate()).abs())
        .fold(0.0, f64::max);
    outcome(
        sh >= 1.8 && st >= 0.9 && drift <= 1e-12,
        format!("min slope in h {sh:.3}, in dt {st:.3}; max mass drift per step {drift:.1e}"),
    )
}

fn stability(id: ProblemId) -> Outcome {
    let mp = ScenarioSpec::reference(grid1(65, 129)).build().unwrap();
    let base = StabilityBase {
        u_terminal: mp.u_terminal(),
        m_initial: mp.m_initial(),
        problem: mp.problem,
        options: PicardOptions { tol_res: 1e-10, ..PicardOptions::default() },
    };
    let pert = PerturbationSpec {
        seed: 7,
        spectrum: Spectrum::default(),
        delta_levels: vec![1e-1, 1e-2, 1e-3, 1e-4],
        targets: vec![DataTarget::M0, DataTarget::UT, DataTarget::G1, DataTarget::G2],
    };
    let k_or_c = match id {
        ProblemId::P1 => 3.0,
        ProblemId::P2 => default_c(1.0),
    };
    let r = holder_experiment(id, &base, &pert, 0.5, k_or_c, 0.1).unwrap();
    // independent floors: rho = (3/4)^3 / 6, eta = (5 + s) / (36 + 6 s)
    let s = 5f64.sqrt();
    let floor = match id {
        ProblemId::P1 => 27.0 / 384.0,
        ProblemId::P2 => (5.0 + s) / (36.0 + 6.0 * s),
    };
    let slope = r.slope.unwrap_or(f64::NAN);
    let floor_ok = (r.rho_or_eta_theory - floor).abs() < 1e-12;
    outcome(
        r.pass && r.floor_holds && slope > floor && r.zero_control_lhs == 0.0 && floor_ok,
        format!(
            "slope {slope:.3} vs floor {:.6}; C_fit {:.3e}; floor bound at every level {}; zero-perturbation control {:e}",
            r.rho_or_eta_theory, r.c_fit, r.floor_holds, r.zero_control_lhs
        ),
    )
}

fn reconstruction() -> Outcome {
    let mp = ScenarioSpec::reference(grid1(33, 65)).build().unwrap();
    let problem = mp.problem.with_discrete_sources(&mp.u, &mp.m).unwrap();
    let weight = WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 2.0, k: 3.0 });
    let config = ReconstructionConfig { alpha: 1e-8, ..ReconstructionConfig::new(ProblemId::P1, weight) };

    // adjoint gradient against central differences at a perturbed point
    let g = problem.grid;
    let last = g.time_len() - 1;
    let data = DataTraces { u: mp.u.trace(last), m: mp.m.trace(last) };
    let rec = Reconstructor::new(&problem, data, &config).unwrap();
    let bu = mp.u.add(&Field::from_fn(g, |x, t| 0.05 * (1.0 - t) * (3.0 * x[0]).cos())).unwrap();
    let bm = mp.m.add(&Field::from_fn(g, |x, t| 0.03 * (1.0 - t) * (2.0 * x[0]).cos())).unwrap();
    let ov = rec.objective_and_gradient(&bu, &bm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_fd: f64 = 0.0;
    for _ in 0..20 {
        let mut dir = || {
            let mut d = Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            d.set_trace(last, &SpatialField::zeros(g));
            d
        };
        let (du, dm) = (dir(), dir());
        // fourth-order central stencil: random nodal directions are rough, so
        // the two-point truncation error is far from negligible
        let h = 1e-4;
        let j = |s: f64| rec.objective(&bu.add(&du.scale(s)).unwrap(), &bm.add(&dm.scale(s)).unwrap()).unwrap();
        let fd = (8.0 * (j(h) - j(-h)) - (j(2.0 * h) - j(-2.0 * h))) / (12.0 * h);
        let dot = |a: &Field, b: &Field| a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum::<f64>();
        let an = dot(&ov.gradient_u, &du) + dot(&ov.gradient_m, &dm);
        worst_fd = worst_fd.max((fd - an).abs() / an.abs());
    }

    let noise = NoiseSpec { seed: 13, spectrum: Spectrum::default(), delta_levels: vec![1e-2, 1e-3, 1e-4] };
    let r = reconstruct_and_score(&problem, &config, (&mp.u, &mp.m), 0.2, &noise, 1e-2).unwrap();
    let ladder: Vec<String> = r.noisy.iter().map(|e| format!("{:.3e}", e.l2_max())).collect();
    outcome(
        r.noiseless.l2_max() < 1e-2 && worst_fd <= 1e-5 && r.error_nonincreasing,
        format!(
            "noiseless rel L2 error u {:.2e} m {:.2e}; worst gradient/FD mismatch {worst_fd:.1e} over 20 directions; noisy ladder [{}] nonincreasing {}",
            r.noiseless.u_l2_rel,
            r.noiseless.m_l2_rel,
            ladder.join(", "),
            r.error_nonincreasing
        ),
    )
}

const DETERMINISM_CONFIG: &str = r#"
command = "stability"
seed = 21

[grid]
extents = [[0.0, 1.0]]
nodes = [33]
horizon = 1.0
time_nodes = 65

[stability]
problem_id = "P2"
epsilon = 0.5
delta_levels = [1e-1, 1e-2, 1e-3, 1e-4]
"#;

fn run_cli(config: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mfglab"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap()
        .code()
        .unwrap_or(-1)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let codes = (run_cli(&cfg, &a), run_cli(&cfg, &b));
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    names.sort();
    let differing: Vec<_> =
        names.iter().filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok()).cloned().collect();
    outcome(
        codes == (0, 0) && !names.is_empty() && differing.is_empty(),
        format!("exit codes {codes:?}; {} artifacts compared, differing {differing:?}", names.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("Laplacian-Hessian identity", Duration::from_secs(30), lemma_identity),
        ("parameter formulas", Duration::from_secs(1), parameter_formulas_match),
        ("Carleman estimate verification", Duration::from_secs(300), carleman_verification),
        ("forward solver convergence and mass", Duration::from_secs(120), forward_solver),
        ("Hoelder stability, terminal data", Duration::from_secs(300), || stability(ProblemId::P1)),
        ("Hoelder stability, initial data", Duration::from_secs(300), || stability(ProblemId::P2)),
        ("Carleman least-squares reconstruction", Duration::from_secs(600), reconstruction),
        ("CLI determinism", Duration::from_secs(120), determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let ok = o.pass && took <= *budget;
        println!(
            "criterion {} [{}] {name}: {} ({:.2}s, budget {}s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        if !ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
