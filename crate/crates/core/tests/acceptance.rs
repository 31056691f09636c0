//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Most criteria go through the experiment runner, so they exercise the same
//! code path as `gbo-lab run`.

use std::process::ExitCode;
use std::time::Instant;

use gbo_lab::cli_runner::{hamilton_sample, parse_config, run_experiment, ResultRecord};
use gbo_lab::normal_forms::{dyadic_sweep, resonance_equiv_check};

type Outcome = anyhow::Result<(bool, String)>;

fn run(config: &str) -> anyhow::Result<ResultRecord> {
    let cfg = parse_config(config)?;
    Ok(run_experiment(&cfg)?)
}

fn metric(rec: &ResultRecord, name: &str) -> anyhow::Result<f64> {
    rec.metric(name).ok_or_else(|| anyhow::anyhow!("record {} has no metric {name}", rec.experiment))
}

fn conservation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [1.0, 1.5, 2.0] {
        let rec = run(&format!("experiment=conserve\nalpha={alpha}\nN=512\ndt=1e-3\nT=1"))?;
        let (dm, de, h1) = (metric(&rec, "mass_relative_drift")?, metric(&rec, "energy_relative_drift")?, metric(&rec, "h1_norm_initial")?);
        ok &= dm <= 1e-6 && de <= 1e-6 && h1 <= 0.1 && rec.wall_clock <= 30.0;
        parts.push(format!("α={alpha}: ΔM={dm:.1e} ΔE={de:.1e} ({:.1}s)", rec.wall_clock));
    }
    Ok((ok, format!("{} [tol 1e-6, ≤30 s/run]", parts.join("; "))))
}

fn scaling() -> Outcome {
    let mut worst = 0.0f64;
    for alpha in [1.0, 1.5, 2.0] {
        worst = worst.max(metric(&run(&format!("experiment=scaling\nalpha={alpha}"))?, "commutation_relative_error")?);
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} over α ∈ {{1, 1.5, 2}} [tol 1e-6]")))
}

fn cancellation() -> Outcome {
    let mut worst = 0.0f64;
    for alpha in [1.0, 1.5, 2.0] {
        for k in [4, 5] {
            let rec = run(&format!("experiment=nf-cancel\nalpha={alpha}\nk={k}\nK_L=0\nN=256"))?;
            worst = worst.max(metric(&rec, "relative_residual_max")?);
        }
    }
    Ok((worst <= 1e-9, format!("max relative residual {worst:.2e} over all symbols, α ∈ {{1, 1.5, 2}}, k ∈ {{4, 5}} [tol 1e-9]")))
}

fn cubic_residual() -> Outcome {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for alpha in [1.0, 1.5, 2.0] {
        for k in [4, 5, 6] {
            let rec = run(&format!("experiment=nf-residual\nalpha={alpha}\nk={k}\nK_L=0\nN=512\neps=1e-2"))?;
            for name in ["exponent_1", "exponent_2"] {
                let e = metric(&rec, name)?;
                lo = lo.min(e);
                hi = hi.max(e);
            }
        }
    }
    Ok(((2.7..=3.3).contains(&lo) && (2.7..=3.3).contains(&hi), format!("halving exponents in [{lo:.4}, {hi:.4}] [target [2.7, 3.3]]")))
}

fn dispersive_decay() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [2.0, 2.5, 3.0] {
        let rec = run(&format!("experiment=dispersive-decay\nm={m}"))?;
        let dev = metric(&rec, "slope_max_deviation")?;
        let lam = metric(&rec, "lambda_exponent")?;
        let target = (2.0 - m) / 2.0;
        ok &= dev <= 0.1 && (lam - target).abs() <= 0.15;
        parts.push(format!("m={m}: |slope+0.5|≤{dev:.3}, λ-exp {lam:.3} (δ={target})"));
    }
    Ok((ok, format!("{} [tol 0.1 / 0.15]", parts.join("; "))))
}

fn bilinear() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [1.0, 2.0] {
        let rec = run(&format!("experiment=bilinear\nalpha={alpha}\nmu=8"))?;
        let e = metric(&rec, "lambda_exponent")?;
        ok &= (e + alpha / 2.0).abs() <= 0.15;
        parts.push(format!("α={alpha}: exponent {e:.3} (target {})", -alpha / 2.0));
    }
    Ok((ok, format!("{} [tol 0.15]", parts.join("; "))))
}

fn gauge() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [1.0, 1.5, 2.0] {
        let mut stats = Vec::new();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for n in [512, 1024, 2048] {
            let rec = run(&format!("experiment=gauge-kernel\nalpha={alpha}\nk=4\nK_L=0\nN={n}"))?;
            stats.push(metric(&rec, "decay_statistic")?);
            lo = lo.min(metric(&rec, "l2_ratio_min")?);
            hi = hi.max(metric(&rec, "l2_ratio_max")?);
        }
        let spread = stats.iter().map(|s| (s / stats[0] - 1.0).abs()).fold(0.0, f64::max);
        ok &= spread <= 0.2 && lo >= 1.0 / 3.0 && hi <= 3.0;
        parts.push(format!("α={alpha}: spread {:.1}%, L² ratio [{lo:.3}, {hi:.3}]", 100.0 * spread));
    }
    Ok((ok, format!("{} [tol ±20%, C = 3]", parts.join("; "))))
}

fn fbi() -> Outcome {
    let rec = run("experiment=fbi\nN=256")?;
    let (iso, inv) = (metric(&rec, "isometry_ratio")?, metric(&rec, "inversion_error")?);
    Ok(((iso - 1.0).abs() <= 1e-6 && inv <= 1e-6, format!("isometry ratio {iso:.15}, inversion error {inv:.2e} [tol 1e-6]")))
}

fn hamilton() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [2.0, 2.5, 3.0] {
        let lambda = 64.0f64;
        let free = m * (m - 1.0);
        for tau in [lambda.powf(-m), 0.05, 1.0] {
            let (mut dev, mut lo, mut hi) = (0.0f64, f64::INFINITY, 0.0f64);
            for seed in 0..50 {
                let s = hamilton_sample(m, lambda, tau, seed)?;
                dev = dev.max((s.x_x - 1.0).abs());
                lo = lo.min(s.x_xi_rate / free);
                hi = hi.max(s.x_xi_rate / free);
            }
            ok &= dev <= 0.5 && lo >= 0.5 && hi <= 2.0;
            if tau == 0.05 {
                parts.push(format!("m={m}: |∂x−1|≤{dev:.1e}, ∂ξx/(t·m(m−1)) ∈ [{lo:.4}, {hi:.4}]"));
            }
        }
    }
    Ok((ok, format!("{} [tol 1/2, [c, C] = [0.5, 2]; 50 fields, τ ∈ {{λ^-m, 0.05, 1}}]", parts.join("; "))))
}

fn resonance() -> Outcome {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for alpha in [1.0, 1.5, 2.0] {
        let stats = resonance_equiv_check(alpha, &dyadic_sweep(12))?;
        lo = lo.min(stats.min);
        hi = hi.max(stats.max);
    }
    Ok((lo >= 0.05 && hi <= 20.0, format!("ratio in [{lo:.4}, {hi:.4}] [target [0.05, 20]]")))
}

fn convergence() -> Outcome {
    let rec = run("experiment=lwp-converge\nalpha=1.5\ns=0\neps=0.01\nK_L=2\nN=4096\nT=1")?;
    let (rate, env) = (metric(&rec, "rate_exponent")?, metric(&rec, "envelope_constant")?);
    Ok((rate <= -0.35 && env <= 10.0, format!("rate exponent {rate:.3}, envelope constant {env:.3} [tol ≤ -0.35, ≤ 10]")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, f64); 11] = [
        ("conservation", conservation, 90.0),
        ("scaling symmetry", scaling, 60.0),
        ("normal-form cancellation", cancellation, 60.0),
        ("cubic residual", cubic_residual, 600.0),
        ("dispersive decay", dispersive_decay, 900.0),
        ("bilinear decay", bilinear, 900.0),
        ("gauge operator", gauge, 300.0),
        ("FBI transform", fbi, 60.0),
        ("Hamilton flow", hamilton, 300.0),
        ("resonance equivalence", resonance, 10.0),
        ("convergence scheme", convergence, 1200.0),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok((pass, detail)) => (pass && secs <= budget, detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {detail} ({secs:.1}s of {budget:.0}s)", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
