//! End-to-end acceptance checks for the toolkit. Each test prints a single
//! `Ax PASS`/`Ax FAIL` line (visible with `--nocapture` or on failure) and
//! asserts its criterion.

use nalgebra::{Complex, DMatrix, DVector};
use netisac::beamform::{
    dca_objective, normalize_psi, optimize_beams, performance_limits, sinr_f1, subgradient_h,
    BeamformProblem, Lifted,
};
use netisac::harness::{
    auto_step_size, build_instance, msd_curve, run_experiment, run_variant, steady_msd, sweep,
    write_curves_csv, EstimatorConfig, ExperimentConfig, MsdSeries, Scenario, SweepAxis, Variant,
};
use netisac::rng::{complex_gaussian, substream};
use netisac::sensing::{
    instantaneous_gradient, run_centralized, run_distributed, EstimatorInputs, EstimatorParams,
};
use netisac::theory::{
    apply_p, assemble_p_dense, gradient_error_cov, stability_check, steady_state_mse, theory_f2,
    TheoryWorkspace,
};
use netisac::topology::{build_random_network, metropolis_weights, validate_combination};
use netisac::two_step::{estimate_data_symbols, symbol_correlation};
use netisac::waveform::{batch_rx, gen_symbols, user_signature, NoiseConfig};

type Complex64 = Complex<f64>;

fn report(tag: &str, ok: bool, detail: &str) {
    println!("{tag} {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{tag}: {detail}");
}

fn desk() -> Scenario {
    Scenario::default()
}

/// Combination-matrix contract on 100 random graphs.
#[test]
fn a1_combination_matrix() {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let n = 3 + (trial as usize * 7) % 18; // deterministic spread over [3, 20]
        let deg = (2.0 + (trial % 5) as f64 * 0.5).min(n as f64 - 1.0);
        let graph = build_random_network(n, deg, 9000 + trial).unwrap();
        let c = metropolis_weights(&graph);
        let rep = validate_combination(&c, &graph).unwrap();
        worst = worst.max(rep.max_column_sum_deviation);
        assert!(rep.negative_entries.is_empty());
        assert!(rep.support_violations.is_empty());
    }
    report("A1", worst <= 1e-12, &format!("max column-sum deviation {worst:.2e}"));
}

/// Exact recovery: noiseless, sensing beam only, no sparsity penalty, target
/// inside the span of the user signatures, per-user steps at 90% of each
/// user's stability bound.
#[test]
fn a2_exact_recovery() {
    let sc = Scenario {
        power_split: 1.0,
        ..desk()
    };
    let mut inst = build_instance(&sc, 0).unwrap();
    let n = inst.scene.n_users();
    let k = inst.scene.k();
    let a = DMatrix::from_columns(
        &(0..n)
            .map(|l| user_signature(&inst.scene, &inst.beams.w, l))
            .collect::<Vec<_>>(),
    );
    let gram = a.adjoint() * &a;
    let coef = gram.lu().solve(&(a.adjoint() * &inst.scene.roi.x)).unwrap();
    inst.scene.roi.x = &a * coef;
    inst.noise = NoiseConfig {
        sigma_o2: 0.0,
        sigma_in2: 0.0,
    };
    inst.measurements = batch_rx(&inst.scene, &inst.beams, &inst.streams, &inst.noise, 99);
    let d0 = inst.scene.roi.x.norm_squared() + 1.0;
    let mu: Vec<f64> = (0..n)
        .map(|l| {
            let lam = 2.0 * user_signature(&inst.scene, &inst.beams.w, l).norm_squared() / d0;
            0.9 * 2.0 / lam
        })
        .collect();
    let params = EstimatorParams {
        mu,
        eta1: 0.0,
        eta2: 0.0,
    };
    let u: Vec<Vec<DVector<Complex64>>> = (0..n)
        .map(|l| {
            let a_w = user_signature(&inst.scene, &inst.beams.w, l);
            (0..inst.streams.horizon())
                .map(|i| &a_w * inst.streams.s_e[i].conj())
                .collect()
        })
        .collect();
    let inputs = EstimatorInputs {
        y: &inst.measurements.y,
        u: &u,
    };
    let zero = DVector::from_element(k, Complex64::new(0.0, 0.0));
    let dist = run_distributed(&inputs, &inst.c, &params, &inst.scene.roi.grid, &zero).unwrap();
    let cent = run_centralized(&inputs, &params, &inst.scene.roi.grid, &zero).unwrap();
    let d = *msd_curve(&dist, &inst.scene.roi.x).msd_db.last().unwrap();
    let c = *msd_curve(&cent, &inst.scene.roi.x).msd_db.last().unwrap();
    report(
        "A2",
        d < -60.0 && c < -60.0,
        &format!("distributed {d:.1} dB, centralized {c:.1} dB"),
    );
}

/// Both analytic derivatives match central finite differences.
#[test]
fn a3_gradients() {
    let mut rng = substream(31, "acceptance/gradient", &[]);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..50 {
        let k = 3;
        let u = DVector::from_fn(k, |_, _| complex_gaussian(&mut rng, 1.0));
        let x = DVector::from_fn(k, |_, _| complex_gaussian(&mut rng, 1.0));
        let y = complex_gaussian(&mut rng, 1.0);
        let cost = |x: &DVector<Complex64>| {
            (y - u.dotc(x)).norm_sqr() / (x.norm_squared() + 1.0)
        };
        let g = instantaneous_gradient(y, &u, &x);
        let mut fd = DVector::from_element(k, Complex64::new(0.0, 0.0));
        for i in 0..k {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += Complex64::new(h, 0.0);
            xm[i] -= Complex64::new(h, 0.0);
            let dre = (cost(&xp) - cost(&xm)) / (2.0 * h);
            xp = x.clone();
            xm = x.clone();
            xp[i] += Complex64::new(0.0, h);
            xm[i] -= Complex64::new(0.0, h);
            let dim = (cost(&xp) - cost(&xm)) / (2.0 * h);
            fd[i] = Complex64::new(dre, dim);
        }
        let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
        worst = worst.max(rel);
    }
    // Directional finite differences of the concave communication part of
    // the penalty-DC split, along random Hermitian directions.
    let sc = desk();
    let mut worst_h = 0.0f64;
    for run in 0..10u64 {
        let p = acceptance_problem(&sc, run, 0.5);
        let limits = performance_limits(&p);
        let m = p.g.len();
        let draw_herm = |tag: u64| {
            let mut r = substream(4100 + run, "acceptance/herm", &[tag]);
            let raw = DMatrix::from_fn(m, m, |_, _| complex_gaussian(&mut r, 1.0));
            (&raw + raw.adjoint()) * Complex64::new(0.5, 0.0)
        };
        let base = Lifted {
            w_mat: {
                let r = draw_herm(0);
                &r * r.adjoint() + DMatrix::identity(m, m) * Complex64::new(0.5, 0.0)
            },
            f_mat: {
                let r = draw_herm(1);
                &r * r.adjoint() + DMatrix::identity(m, m) * Complex64::new(0.5, 0.0)
            },
        };
        let (gw, gf) = subgradient_h(&base, &p, &limits);
        let h_of = |z: &Lifted| {
            let gg = &p.g * p.g.adjoint();
            let tr = |a: &DMatrix<Complex64>, b: &DMatrix<Complex64>| -> f64 {
                a.iter().zip(b.transpose().iter()).map(|(x, y)| (x * y).re).sum()
            };
            let f1 = tr(&gg, &z.f_mat) / (p.sigma2 + tr(&gg, &z.w_mat));
            p.beta1 * (f1 - limits.f1_star) / limits.f1_star.abs()
        };
        for dir in 0..5u64 {
            let ew = draw_herm(10 + dir);
            let ef = draw_herm(20 + dir);
            let t = 1e-6;
            let shift = |s: f64| Lifted {
                w_mat: &base.w_mat + &ew * Complex64::new(s, 0.0),
                f_mat: &base.f_mat + &ef * Complex64::new(s, 0.0),
            };
            let fd = (h_of(&shift(t)) - h_of(&shift(-t))) / (2.0 * t);
            let inner = |a: &DMatrix<Complex64>, b: &DMatrix<Complex64>| -> f64 {
                a.iter().zip(b.transpose().iter()).map(|(x, y)| (x * y).re).sum()
            };
            let analytic = inner(&gw, &ew) + inner(&gf, &ef);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-9);
            worst_h = worst_h.max(rel);
        }
    }
    report(
        "A3",
        worst < 1e-5 && worst_h < 1e-5,
        &format!("gradient rel err {worst:.2e}, concave-part rel err {worst_h:.2e}"),
    );
}

/// The factored error-covariance vector and the Kronecker-factored
/// transition operator both match definitional assemblies.
#[test]
fn a4_operator_equivalence() {
    let mut worst_q = 0.0f64;
    let mut worst_p = 0.0f64;
    for trial in 0..20u64 {
        let sc = Scenario {
            m: 1 + (trial as usize) % 3,
            k_dims: (1 + (trial as usize) % 2, 2, 1),
            n_users: 2 + (trial as usize) % 2,
            avg_degree: 1.0,
            sparsity: 1,
            master_seed: 500 + trial,
            ..desk()
        };
        let inst = build_instance(&sc, 0).unwrap();
        let gc = gradient_error_cov(&inst.scene, &inst.beams.w, &inst.scene.roi.x, 0.3, 1.0);
        worst_q = worst_q.max((&gc.q_vec - &gc.q_vec_factored).norm());
        let mu = auto_step_size(&inst);
        let ws = TheoryWorkspace::build(
            &inst.scene,
            &inst.beams.w,
            &vec![mu; inst.scene.n_users()],
            &inst.c,
            0.3,
            1.0,
        )
        .unwrap();
        let p = assemble_p_dense(&ws).unwrap();
        let a = ws.a_mat();
        let mut rng = substream(600 + trial, "acceptance/pvec", &[]);
        let y = DVector::from_fn(ws.kn() * ws.kn(), |_, _| complex_gaussian(&mut rng, 1.0));
        let matrix_free = apply_p(&ws, &a, &y);
        worst_p = worst_p.max((&p * &y - matrix_free).norm());
    }
    report(
        "A4",
        worst_q <= 1e-10 && worst_p <= 1e-10,
        &format!("covariance gap {worst_q:.2e}, operator gap {worst_p:.2e}"),
    );
}

fn a5_config() -> ExperimentConfig {
    ExperimentConfig {
        scenario: Scenario {
            n_runs: 20,
            master_seed: 1,
            ..desk()
        },
        estimator: EstimatorConfig::default(),
        variants: vec![
            Variant::TwoStep,
            Variant::Step1Only,
            Variant::NoPenalty,
            Variant::ElementOnly,
        ],
        beamform: Default::default(),
        output_dir: None,
    }
}

/// Steady-state ordering of the estimator variants at SNR 10 dB.
#[test]
fn a5_variant_ordering() {
    let res = run_experiment(&a5_config()).unwrap();
    let s = &res.summary.mean_steady_msd_db;
    let two = s["two_step"];
    let elem = s["element_only"];
    let none = s["no_penalty"];
    let one = s["step1_only"];
    let ok = two + 0.5 < elem && elem + 0.5 < none && two + 0.5 < one;
    report(
        "A5",
        ok,
        &format!("two-step {two:.2}, element-only {elem:.2}, no-penalty {none:.2}, step-1-only {one:.2} dB"),
    );
}

/// The sparsity advantage shrinks as the scene fills up.
#[test]
fn a6_sparsity_trend() {
    let cfg = ExperimentConfig {
        variants: vec![Variant::TwoStep, Variant::NoPenalty],
        ..a5_config()
    };
    let rows = sweep(&cfg, SweepAxis::L, &[1.0, 4.0, 8.0]).unwrap();
    let mean = |value: f64, variant: &str| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.value == value && r.variant == variant)
            .map(|r| r.steady_msd_db)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let adv: Vec<f64> = [1.0, 4.0, 8.0]
        .iter()
        .map(|&l| mean(l, "no_penalty") - mean(l, "two_step"))
        .collect();
    report(
        "A6",
        adv[0] >= adv[1] && adv[1] >= adv[2],
        &format!("advantage over occupancy {{1, 4, 8}}: {:.2}, {:.2}, {:.2} dB", adv[0], adv[1], adv[2]),
    );
}

/// More users, better steady-state accuracy.
#[test]
fn a7_network_size_trend() {
    let cfg = ExperimentConfig {
        variants: vec![Variant::TwoStep],
        ..a5_config()
    };
    let rows = sweep(&cfg, SweepAxis::N, &[3.0, 5.0, 10.0]).unwrap();
    let mean = |value: f64| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.value == value)
            .map(|r| r.steady_msd_db)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let m = [mean(3.0), mean(5.0), mean(10.0)];
    report(
        "A7",
        m[0] >= m[1] && m[1] >= m[2],
        &format!("mean steady MSD over N {{3, 5, 10}}: {:.2}, {:.2}, {:.2} dB", m[0], m[1], m[2]),
    );
}

/// Closed-form prediction and simulation agree in trend across SNR on one
/// fixed instance (sensing beam only, stable network size).
#[test]
fn a8_theory_trend() {
    let est = EstimatorConfig::default();
    let mut mses = Vec::new();
    let mut msds = Vec::new();
    for snr in [3.0, 10.0, 20.0] {
        let sc = Scenario {
            master_seed: 7,
            k_dims: (2, 2, 1),
            snr_db: snr,
            power_split: 1.0,
            ..desk()
        };
        let inst = build_instance(&sc, 1).unwrap();
        let ws = TheoryWorkspace::build(
            &inst.scene,
            &inst.beams.w,
            &vec![auto_step_size(&inst); inst.scene.n_users()],
            &inst.c,
            inst.noise.sigma_in2,
            1.0,
        )
        .unwrap();
        assert!(stability_check(&ws).pass);
        mses.push(steady_state_mse(&ws, 0.0).unwrap().mse);
        let out = run_variant(&inst, &est, Variant::TwoStep).unwrap();
        let series = MsdSeries {
            msd_db: out.series.clone(),
        };
        msds.push(steady_msd(&series, sc.settle, sc.window).unwrap());
    }
    // Both triples strictly decreasing implies identical ranks, hence
    // Spearman correlation exactly 1.
    let ok = mses[0] > mses[1] && mses[1] > mses[2] && msds[0] > msds[1] && msds[1] > msds[2];
    report(
        "A8",
        ok,
        &format!(
            "predicted MSE {:.4}/{:.4}/{:.4}, steady MSD {:.1}/{:.1}/{:.1} dB",
            mses[0], mses[1], mses[2], msds[0], msds[1], msds[2]
        ),
    );
}

/// Data-symbol recovery quality, noisy mean and noiseless exactness.
#[test]
fn a9_symbol_recovery() {
    let sc = Scenario {
        n_runs: 20,
        master_seed: 1,
        ..desk()
    };
    let est = EstimatorConfig::default();
    let mut corr_sum = 0.0;
    for run in 0..sc.n_runs as u64 {
        let inst = build_instance(&sc, run).unwrap();
        let out = run_variant(&inst, &est, Variant::TwoStep).unwrap();
        corr_sum += out.symbol_corr.unwrap();
    }
    let mean_corr = corr_sum / sc.n_runs as f64;

    // Noiseless: residuals carry the data symbols exactly.
    let streams = gen_symbols(400, 2024).unwrap();
    let mut rng = substream(2025, "acceptance/scales", &[]);
    let residuals: Vec<DVector<Complex64>> = (0..5)
        .map(|_| {
            let c = complex_gaussian(&mut rng, 1.0);
            DVector::from_fn(400, |i, _| c * streams.s_d[i])
        })
        .collect();
    let est_symbols = estimate_data_symbols(&residuals).unwrap();
    let exact = symbol_correlation(&est_symbols, &streams.s_d);
    report(
        "A9",
        mean_corr > 0.99 && exact >= 1.0 - 1e-9,
        &format!("mean correlation {mean_corr:.5}, noiseless {exact:.12}"),
    );
}

fn acceptance_problem(sc: &Scenario, run: u64, beta1: f64) -> BeamformProblem {
    let inst = build_instance(sc, run).unwrap();
    let mu = auto_step_size(&inst);
    let ws = TheoryWorkspace::build(
        &inst.scene,
        &inst.beams.w,
        &vec![mu; inst.scene.n_users()],
        &inst.c,
        inst.noise.sigma_in2.max(1e-6),
        1.0,
    )
    .unwrap();
    let f2 = theory_f2(&ws).unwrap();
    BeamformProblem::new(
        inst.scene.channels.g_comm.clone(),
        1.0,
        sc.p_budget,
        beta1,
        &f2,
        50,
    )
    .unwrap()
}

/// Power feasibility, per-segment descent, single-antenna grid oracle, and
/// the weight-sweep tradeoff.
#[test]
fn a10_beamforming_contracts() {
    let sc = desk();
    let mut max_power = 0.0f64;
    for run in 0..10u64 {
        let p = acceptance_problem(&sc, run, 0.5);
        let (_, _, rep) = optimize_beams(&p, 1000 + run).unwrap();
        max_power = max_power.max(rep.power_used);
        let mut prev: Option<(f64, f64)> = None;
        for rec in &rep.history {
            if let Some((pd, pphi)) = prev {
                if pd == rec.delta {
                    assert!(
                        rec.phi <= pphi + 1e-9,
                        "objective rose within a penalty segment: {pphi} -> {}",
                        rec.phi
                    );
                }
            }
            prev = Some((rec.delta, rec.phi));
        }
    }
    assert!(max_power <= sc.p_budget + 1e-6, "power {max_power}");

    // Single-antenna instances against a 200x200 power-allocation grid.
    let sc1 = Scenario { m: 1, ..desk() };
    let mut worst_gap = 0.0f64;
    for run in 0..10u64 {
        let p = acceptance_problem(&sc1, run, 0.5);
        let limits = performance_limits(&p);
        let (w, f, _) = optimize_beams(&p, 77 + run).unwrap();
        let obj = |pw: f64, pf: f64| {
            let g2 = p.g.norm_squared();
            let f1 = g2 * pf / (g2 * pw + p.sigma2);
            let f2v = p.f2_c0 + p.f2_kernel[(0, 0)].re * pw;
            p.beta2 * normalize_psi(f2v, limits.f2_star).unwrap()
                - p.beta1 * normalize_psi(f1, limits.f1_star).unwrap()
        };
        let mut best = f64::INFINITY;
        for i in 0..200 {
            for j in 0..200 {
                let pw = p.p_budget * i as f64 / 199.0;
                let pf = p.p_budget * j as f64 / 199.0;
                if pw + pf <= p.p_budget + 1e-12 {
                    best = best.min(obj(pw, pf));
                }
            }
        }
        let achieved = obj(w.norm_squared(), f.norm_squared());
        let gap = achieved - best;
        worst_gap = worst_gap.max(gap);
        assert!(
            gap <= 0.02 * best.abs().max(1e-6),
            "run {run}: achieved {achieved} vs grid {best}"
        );
    }

    let mut means = Vec::new();
    for &b1 in &[0.1, 0.5, 0.9] {
        let mut f1s = 0.0;
        let mut f2s = 0.0;
        for run in 0..10u64 {
            let p = acceptance_problem(&sc, run, b1);
            let (w, f, _) = optimize_beams(&p, 5000 + run).unwrap();
            f1s += sinr_f1(&w, &f, &p.g, p.sigma2);
            f2s += p.f2_of_beam(&w);
        }
        means.push((f1s / 10.0, f2s / 10.0));
    }
    let ok = means[0].0 <= means[1].0 + 1e-9
        && means[1].0 <= means[2].0 + 1e-9
        && means[0].1 <= means[1].1 + 1e-9
        && means[1].1 <= means[2].1 + 1e-9;
    report(
        "A10",
        ok,
        &format!(
            "max power {max_power:.6}, grid gap {worst_gap:.2e}, mean SINR over weights {:.2}/{:.2}/{:.2}",
            means[0].0, means[1].0, means[2].0
        ),
    );
}

/// Repeating the full variant experiment reproduces the CSV byte for byte.
#[test]
fn a11_determinism() {
    let cfg = a5_config();
    let mut first = Vec::new();
    let mut second = Vec::new();
    write_curves_csv(&run_experiment(&cfg).unwrap().rows, &mut first).unwrap();
    write_curves_csv(&run_experiment(&cfg).unwrap().rows, &mut second).unwrap();
    report(
        "A11",
        !first.is_empty() && first == second,
        &format!("{} CSV bytes identical", first.len()),
    );
}

// Touch the DCA objective export so the penalty split stays part of the
// public surface exercised here.
#[allow(dead_code)]
fn _objective_surface(p: &BeamformProblem) {
    let limits = performance_limits(p);
    let z = Lifted::scaled_identity(p.g.len(), p.p_budget);
    let _ = dca_objective(&z, 1.0, p, &limits);
}
