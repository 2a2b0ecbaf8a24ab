// Scratch exploration for acceptance parameter tuning. Not shipped.

use nalgebra::DVector;
use odesa::experiments::*;
use odesa::learners::*;
use odesa::spectral::*;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "gaps" => gaps(),
        "gtd" => convergence(Algorithm::Gtd),
        "etd" => convergence(Algorithm::Etd),
        "star" => star(),
        _ => println!("usage: gaps|gtd|etd|star"),
    }
}

fn gaps() {
    for seed in 0..5 {
        let bundle = random_offpolicy(seed, 5, 2, 3).unwrap();
        for lambda in [0.0, 0.5, 0.9] {
            let gtd = gtd_expected_system(&bundle.mdp, &bundle.target, &bundle.behavior, lambda, &bundle.features).unwrap();
            let block = spectral_report(&gtd.a_block, None);
            let etd = etd_expected_system(&bundle.mdp, &bundle.target, &bundle.behavior, lambda, &bundle.interest_or_ones(), &bundle.features).unwrap();
            let er = etd.report();
            let theta_gtd = gtd.fixed_point().unwrap();
            let theta_etd = etd.fixed_point().unwrap();
            println!(
                "seed {seed} λ={lambda}: gtd gap {:.4} ‖θ*‖ {:.3} cond {:.1e} | etd symgap {:.4} ‖θ*‖ {:.3}",
                -block.max_real_part, theta_gtd.norm(), block.condition_number,
                -er.max_symmetric_eigenvalue / 2.0, theta_etd.norm()
            );
        }
    }
}

fn convergence(algorithm: Algorithm) {
    let n_steps = 2_000_000u64;
    for lambda in [0.0, 0.5, 0.9] {
        for env_seed in [0u64] {
            let bundle = random_offpolicy(env_seed, 5, 2, 3).unwrap();
            let gtd = gtd_expected_system(&bundle.mdp, &bundle.target, &bundle.behavior, lambda, &bundle.features).unwrap();
            let interest = bundle.interest_or_ones();
            let etd = etd_expected_system(&bundle.mdp, &bundle.target, &bundle.behavior, lambda, &interest, &bundle.features).unwrap();
            let (fixed, gap) = match algorithm {
                Algorithm::Gtd => {
                    let block = spectral_report(&gtd.a_block, None);
                    (gtd.fixed_point().unwrap(), -block.max_real_part)
                }
                Algorithm::Etd => {
                    let report = etd.report();
                    (etd.fixed_point().unwrap(), -report.max_real_part)
                }
                _ => unreachable!(),
            };
            for (b1_scale, b2_scale) in [(2.0, 20.0), (4.0, 40.0)] {
                let b1 = (b1_scale / gap).clamp(0.5, 25.0);
                let b2 = b2_scale * b1;
                let schedule = Schedule::new(b1, b2, 1.0).unwrap();
                let mut ok = 0;
                let start = Instant::now();
                let mut worst: f64 = 0.0;
                for seed in 0..5 {
                    let params = RunParams {
                        mdp: &bundle.mdp,
                        target: &bundle.target,
                        behavior: &bundle.behavior,
                        features: &bundle.features,
                        algorithm,
                        lambda,
                        schedule,
                        n_steps,
                        seed,
                        record_stride: 10_000,
                        interest: Some(&interest),
                        theta0: None,
                    };
                    let trajectory = run(&params).unwrap();
                    let err = (trajectory.final_theta() - &fixed).norm() / fixed.norm();
                    worst = worst.max(err);
                    let tol = if algorithm == Algorithm::Gtd { 0.05 } else { 0.10 };
                    if err < tol { ok += 1; }
                }
                println!(
                    "{algorithm} λ={lambda} env={env_seed} gap={gap:.3} B1={b1:.2} B2={b2:.1}: {ok}/5 ok, worst {worst:.4}, {:.2}s total",
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
}

fn star() {
    let bundle = divergence_star().unwrap();
    let (a, _) = td_mean_field(&bundle.mdp, &bundle.target, &bundle.behavior, 0.0, &bundle.features).unwrap();
    let report = spectral_report(&a, None);
    println!("star TD mean-field max Re = {:.4}", report.max_real_part);
    let mut theta0 = DVector::from_element(8, 1.0);
    theta0[6] = 10.0;
    for (b1, b2, beta) in [(1.0, 10.0, 0.6), (1.0, 10.0, 0.51), (0.5, 10.0, 0.6), (1.0, 10.0, 1.0)] {
        let schedule = Schedule::new(b1, b2, beta).unwrap();
        let mut div_steps = Vec::new();
        let mut gtd_ok = 0;
        let mut gtd_max: f64 = 0.0;
        for seed in 0..5 {
            let params = RunParams {
                mdp: &bundle.mdp,
                target: &bundle.target,
                behavior: &bundle.behavior,
                features: &bundle.features,
                algorithm: Algorithm::OffpolicyTd,
                lambda: 0.0,
                schedule,
                n_steps: 1_000_000,
                seed,
                record_stride: 10_000,
                interest: None,
                theta0: Some(&theta0),
            };
            let t = run(&params).unwrap();
            div_steps.push(t.diverged_at);
            let gtd_params = RunParams { algorithm: Algorithm::Gtd, ..params };
            let g = run(&gtd_params).unwrap();
            let sr = odesa::diagnostics::stability_monitor(&g);
            if sr.bounded_consistent { gtd_ok += 1; }
            gtd_max = gtd_max.max(sr.overall_max);
        }
        println!("B1={b1} B2={b2} β={beta}: td diverged_at {div_steps:?}, gtd bounded {gtd_ok}/5 (max {gtd_max:.2})");
    }
}
