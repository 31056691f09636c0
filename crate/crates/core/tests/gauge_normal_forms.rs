//! Gauge operator bounds and normal-form identities on independent inputs.

use gbo_lab::gauge::{apply_exp_gauge, build_gauge, conjugated_variable, gauge_kernel};
use gbo_lab::normal_forms::{
    apply_bilinear, guard_scan, nf_cancellation_check, renormalize_linearized, renormalize_nonlinear, resonance,
    BilinearSymbol, CorrectionSet, FnSymbol, NormalFormCorrection, SymbolId, NF_CONSTANT,
};
use gbo_lab::spectral_core::{chi_block, lp_project, make_grid, Field, Grid, Projection, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_block(grid: &Grid, k: i32, rng: &mut ChaCha8Rng) -> Field {
    let spec: Vec<C64> = grid
        .freqs()
        .iter()
        .map(|&xi| {
            let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if chi_block(k, xi) > 0.0 {
                c
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    lp_project(&Field::from_spectrum(grid, spec, false).unwrap(), Projection::Block(k)).unwrap()
}

fn potential(grid: &Grid) -> Field {
    Field::from_fn(grid, |x| 0.8 * (x + 0.3).cos() + 0.5 * (3.0 * x).sin() + 0.3 * (5.0 * x + 1.0).cos())
}

#[test]
fn lp_norms_are_equivalent_over_random_inputs() {
    let grid = make_grid(0, 512).unwrap();
    let g = build_gauge(&potential(&grid), 1.5, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut extremes = [(f64::INFINITY, 0.0f64); 3];
    for _ in 0..20 {
        let f = random_block(&grid, 5, &mut rng);
        let out = apply_exp_gauge(&g, &f).unwrap();
        for (slot, p) in [1.0, 2.0, f64::INFINITY].into_iter().enumerate() {
            let r = out.lp_norm(p) / f.lp_norm(p);
            extremes[slot] = (extremes[slot].0.min(r), extremes[slot].1.max(r));
        }
    }
    for (lo, hi) in extremes {
        assert!(lo >= 1.0 / 3.0 && hi <= 3.0, "[{lo}, {hi}]");
    }
}

#[test]
fn output_stays_in_the_band() {
    let grid = make_grid(0, 512).unwrap();
    let g = build_gauge(&potential(&grid), 1.0, 5).unwrap();
    let f = random_block(&grid, 5, &mut ChaCha8Rng::seed_from_u64(9));
    let out = lp_project(&apply_exp_gauge(&g, &f).unwrap(), Projection::BlockPos(5)).unwrap();
    let scale = out.spectrum().iter().map(|c| c.norm()).fold(0.0, f64::max);
    let tail = out.spectral_tail(|xi| xi >= 0.0 && chi_block(5, xi) > 0.0) / scale;
    assert!(tail < 1e-8, "{tail:e}");
}

#[test]
fn output_is_dominated_by_a_decaying_average() {
    // |e^{iA}f|(x) against λ ∫ ⟨λ(x-y)⟩^{-2} |f(y)| dy, λ = 2^k.
    let grid = make_grid(0, 256).unwrap();
    let k = 4;
    let lambda = 2f64.powi(k);
    let g = build_gauge(&potential(&grid), 1.5, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let f = random_block(&grid, k, &mut rng);
        let out = apply_exp_gauge(&g, &f).unwrap();
        for i in 0..grid.n() {
            let avg: f64 = (0..grid.n())
                .map(|j| {
                    let d = grid.torus_distance(grid.x(i), grid.x(j));
                    lambda * f.values()[j].norm() / (1.0 + (lambda * d).powi(2))
                })
                .sum::<f64>()
                * grid.dx();
            worst = worst.max(out.values()[i].norm() / avg);
        }
    }
    assert!(worst.is_finite() && worst <= 10.0, "{worst}");
}

#[test]
fn kernel_statistic_is_grid_independent() {
    let stats: Vec<f64> = [256, 512, 1024]
        .into_iter()
        .map(|n| {
            let grid = make_grid(0, n).unwrap();
            gauge_kernel(&build_gauge(&potential(&grid), 2.0, 4).unwrap()).unwrap().decay_statistic()
        })
        .collect();
    for s in &stats {
        assert!((s / stats[0] - 1.0).abs() <= 0.2, "{stats:?}");
    }
}

#[test]
fn zero_background_leaves_positive_modes() {
    let grid = make_grid(0, 256).unwrap();
    let f = Field::from_complex_fn(&grid, |x| C64::from_polar(1.0, 16.0 * x));
    let psi = conjugated_variable(&f, &Field::zeros(&grid), 1.5, 4).unwrap();
    assert!(psi.max_diff(&f) < 1e-12);
}

#[test]
fn guards_hold_for_every_symbol() {
    for n in [128, 256] {
        let grid = make_grid(0, n).unwrap();
        for alpha in [1.0, 1.5, 2.0] {
            for id in [SymbolId::Q2k, SymbolId::QexpI, SymbolId::QexpII, SymbolId::Qexph(0.3), SymbolId::Qlin] {
                guard_scan(&BilinearSymbol::new(id, 5, alpha).localized(), &grid).unwrap();
            }
        }
    }
}

#[test]
fn cancellation_on_random_linear_waves() {
    let grid = make_grid(0, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let low = |rng: &mut ChaCha8Rng| {
        let spec: Vec<C64> = grid
            .freqs()
            .iter()
            .map(|&xi| if xi.abs() <= 40.0 { C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) } else { C64::new(0.0, 0.0) })
            .collect();
        Field::from_spectrum(&grid, spec, false).unwrap()
    };
    let (u, v) = (low(&mut rng), low(&mut rng));
    for alpha in [1.0, 1.5, 2.0] {
        for id in [SymbolId::Q2k, SymbolId::QexpI, SymbolId::QexpII, SymbolId::Qexph(0.7), SymbolId::Qlin, SymbolId::Paradifferential] {
            let corr = NormalFormCorrection::new(id, 4, alpha, &grid).unwrap();
            let r = nf_cancellation_check(&u, &v, 0.9, &corr).unwrap();
            assert!(r.relative() <= 1e-9, "{id:?} α={alpha}: {}", r.relative());
        }
    }
}

#[test]
fn linearized_and_nonlinear_variables_at_v_equal_phi() {
    // w̃ - ψ̃ = -c·P_k^+ e^{iA}(B2(φ,φ) + B_lin(φ,φ)) with c the normal-form constant.
    let grid = make_grid(0, 256).unwrap();
    let phi = Field::from_fn(&grid, |x| 0.01 * (-(x - 3.0).powi(2) / 0.01).exp());
    let (alpha, k) = (1.5, 4);
    let w = renormalize_linearized(&phi, &phi, alpha, k).unwrap();
    let psi = renormalize_nonlinear(&phi, alpha, k).unwrap();
    assert!(w.conjugated.max_diff(&psi.conjugated) < 1e-15);
    let set = CorrectionSet::new(alpha, k, &grid).unwrap();
    let extra = apply_bilinear(&set.b2, &phi, &phi).unwrap().add(&apply_bilinear(&set.lin, &phi, &phi).unwrap()).unwrap();
    let g = build_gauge(&phi, alpha, k).unwrap();
    let expect = lp_project(&apply_exp_gauge(&g, &extra).unwrap(), Projection::BlockPos(k)).unwrap().scale_complex(-NF_CONSTANT);
    let diff = w.renormalized.sub(&psi.renormalized).unwrap();
    let operand = w.renormalized.sup_norm().max(psi.renormalized.sup_norm());
    // Roundoff is set by the operands of the subtraction, not by the (much smaller) difference.
    assert!(diff.max_diff(&expect) <= 1e-12 * operand, "{:e}", diff.max_diff(&expect));
    assert!(diff.max_diff(&expect) <= 1e-9 * expect.sup_norm());
}

#[test]
fn high_low_correction_decays_with_the_block() {
    // ‖B(u_high, v_low)‖_{L²} / (‖u‖_{L²}‖v‖_{L^∞}) for u in block k and v at |ξ| ≤ 2:
    // the resonance is ≈ |ξ_low| 2^{αk}, so the Q2k correction scales like 2^{-αk}.
    let grid = make_grid(0, 2048).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for alpha in [1.0, 2.0] {
        let ks: Vec<i32> = (4..=8).collect();
        let norms: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let corr = NormalFormCorrection::new(SymbolId::Q2k, k, alpha, &grid).unwrap();
                (0..50)
                    .map(|_| {
                        let u = random_block(&grid, k, &mut rng);
                        let (a, b, ph) = (rng.gen_range(0.5..1.0), rng.gen_range(0.0..0.5), rng.gen_range(0.0..6.0));
                        let v = Field::from_fn(&grid, |x| a * (x + ph).cos() + b * (2.0 * x).sin());
                        apply_bilinear(&corr, &u, &v).unwrap().l2_norm() / (u.l2_norm() * v.sup_norm())
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
        let ys: Vec<f64> = norms.iter().map(|n| n.log2()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + alpha).abs() <= 0.3, "α = {alpha}: slope {slope}, norms {norms:?}");
    }
}

#[test]
fn constant_symbol_obeys_hoelder_uniformly_in_n() {
    for n in [256, 512, 1024] {
        let grid = make_grid(0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let u = random_block(&grid, 3, &mut rng);
        let v = random_block(&grid, 4, &mut rng);
        let out = apply_bilinear(&FnSymbol(|_: f64, _: f64| C64::new(1.0, 0.0)), &u, &v).unwrap();
        assert!(out.l2_norm() <= u.l2_norm() * v.sup_norm() * (1.0 + 1e-12));
    }
}

#[test]
fn resonance_vanishes_only_on_the_axes() {
    assert_eq!(resonance(0.0, 3.0, 1.5), 0.0);
    assert!(resonance(2.0, 3.0, 1.5).abs() > 1.0);
}
