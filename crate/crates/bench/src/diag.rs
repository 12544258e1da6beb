//! The `diag` suites with fixed seeds: structure identities, energy balance
//! under step halving, contraction on random SPD quadratics, defect
//! accounting and the stochastic floor.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shape_core::diagnostics::*;
use shape_core::dynamics::{PhasePoint, StepConfig, StructureOps, LYAPUNOV_EPS};
use shape_core::ShapeError;

pub const ENERGY_STEPS: [f64; 3] = [0.05, 0.025, 0.0125];
pub const ENERGY_RATIO: f64 = 2.0;
pub const ENERGY_RATIO_TOL: f64 = 0.3;
pub const CONTRACTION_STAGES: usize = 20;
pub const CONTRACTION_H: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    /// `(item, key, value)` fitted constants for the CSV.
    pub constants: Vec<(String, String, f64)>,
}

/// Quadratic stage with coupling, PSD damping and non-unit mass; ports off.
pub fn structured_stage(d: usize, seed: u64) -> LinearStage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_spd(d, 0.5, 4.0, &mut rng);
    let rank = 2.min(d);
    let mut ops = StructureOps::plain(d, rank);
    ops.mass = (0..d).map(|_| rng.gen_range(0.5..2.0)).collect();
    ops.u_omega = gaussian_vec(d * rank, 0.5, &mut rng);
    ops.v_omega = gaussian_vec(d * rank, 0.5, &mut rng);
    ops.b_d = gaussian_vec(d * rank, 0.3, &mut rng);
    ops.d_d = (0..d).map(|_| rng.gen_range(0.3..1.0)).collect();
    LinearStage { a, q_star: gaussian_vec(d, 0.5, &mut rng), ops, alpha_j: 1.0, alpha_r: 1.0 }
}

fn random_start(d: usize, seed: u64) -> PhasePoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    PhasePoint { q: gaussian_vec(d, 1.0, &mut rng), p: gaussian_vec(d, 1.0, &mut rng) }
}

pub fn structure(samples: usize) -> Result<SuiteResult, ShapeError> {
    let r = structure_suite(samples, 2024)?;
    Ok(SuiteResult {
        name: "structure",
        pass: r.pass,
        detail: format!("{} controller outputs, max skew rel {:.3e}, min vDv {:.3e}", r.samples, r.max_skew_rel, r.min_psd),
        constants: vec![("all".into(), "max_skew_rel".into(), r.max_skew_rel), ("all".into(), "min_psd".into(), r.min_psd)],
    })
}

pub fn energy() -> Result<SuiteResult, ShapeError> {
    let stage = structured_stage(4, 31);
    let study = energy_halving_study(&stage, &random_start(4, 31), &ENERGY_STEPS, 2.0)?;
    let pass = study.ratios.iter().all(|r| (r - ENERGY_RATIO).abs() <= ENERGY_RATIO_TOL);
    let mut constants: Vec<(String, String, f64)> =
        study.steps.iter().zip(&study.defect).map(|(h, d)| (format!("h={h}"), "mean_abs_residual".into(), *d)).collect();
    constants.extend(study.ratios.iter().enumerate().map(|(i, r)| (format!("pair{i}"), "ratio".into(), *r)));
    Ok(SuiteResult {
        name: "energy_balance",
        pass,
        detail: format!("d=4, ratios {:?}", study.ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()),
        constants,
    })
}

pub fn contraction() -> Result<SuiteResult, ShapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut constants = Vec::new();
    let mut pass = true;
    let mut worst_r2 = 1.0f64;
    let mut min_rate = f64::INFINITY;
    for k in 0..CONTRACTION_STAGES {
        let d = rng.gen_range(1..=8);
        let stage = LinearStage::damped(random_spd(d, 0.5, 4.0, &mut rng));
        let r = contraction_fit(&stage, &random_start(d, k as u64), CONTRACTION_H, LYAPUNOV_EPS, 200.0)?;
        pass &= r.pass;
        worst_r2 = worst_r2.min(r.r2);
        min_rate = min_rate.min(r.rate);
        constants.push((format!("stage{k}_d{d}"), "rate".into(), r.rate));
        constants.push((format!("stage{k}_d{d}"), "r2".into(), r.r2));
    }
    Ok(SuiteResult {
        name: "contraction",
        pass,
        detail: format!("{CONTRACTION_STAGES} SPD stages, min c {min_rate:.4}, worst R2 {worst_r2:.5}"),
        constants,
    })
}

pub fn defects() -> Result<SuiteResult, ShapeError> {
    let mut constants = Vec::new();
    let mut pass = true;
    let mut detail = Vec::new();
    let stage = structured_stage(3, 5);
    let c = stage.continuous_rate(LYAPUNOV_EPS);
    let x0 = random_start(3, 5);
    let mut trunc = Vec::new();
    for h in [0.02, 0.01] {
        let run = stage.simulate(&x0, &StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY }, (8.0 / h) as usize)?;
        let l = defect_suite(&stage, &run, h, c, LYAPUNOV_EPS)?;
        pass &= l.holds && l.projection == 0.0;
        trunc.push(l.truncation);
        for (k, v) in [("c", l.rate), ("C1", l.c1), ("C2", l.c2), ("truncation", l.truncation), ("terminal", l.terminal), ("total_error", l.total_error)] {
            constants.push((format!("smooth_h={h}"), k.into(), v));
        }
    }
    let ratio = trunc[0] / trunc[1];
    pass &= (ratio - 2.0).abs() < 0.4;
    detail.push(format!("truncation ratio {ratio:.3}"));
    let mut clipped = LinearStage::damped(DMatrix::identity(2, 2));
    clipped.q_star = vec![1.5, -1.5];
    let run = clipped.simulate(&PhasePoint::at_rest(vec![0.0, 0.0]), &StepConfig { h: 0.05, p_max: 10.0, q_max: 1.0 }, 200)?;
    let l = defect_suite(&clipped, &run, 0.05, clipped.continuous_rate(LYAPUNOV_EPS), LYAPUNOV_EPS)?;
    pass &= l.holds && l.projection > 0.0;
    detail.push(format!("clipped projection {:.3e}", l.projection));
    constants.push(("clipped".into(), "projection".into(), l.projection));
    Ok(SuiteResult { name: "defects", pass, detail: detail.join(", "), constants })
}

pub fn floor() -> Result<SuiteResult, ShapeError> {
    let stage = LinearStage::damped(DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 1.0]));
    let x0 = PhasePoint::at_rest(vec![0.0, 0.0]);
    let rep = stochastic_floor_suite(&stage, &x0, 0.05, &[0.0, 0.5, 1.0, 2.0], LYAPUNOV_EPS, (600, 1500, 64), 1)?;
    let mut constants: Vec<(String, String, f64)> =
        rep.sigmas.iter().zip(&rep.floors).map(|(s, f)| (format!("sigma={s}"), "floor".into(), *f)).collect();
    constants.push(("fit".into(), "slope".into(), rep.fit.slope));
    constants.push(("fit".into(), "r2".into(), rep.fit.r2));
    Ok(SuiteResult {
        name: "stochastic_floor",
        pass: rep.pass,
        detail: format!("slope {:.4e}, R2 {:.4}", rep.fit.slope, rep.fit.r2),
        constants,
    })
}

pub fn all(structure_samples: usize) -> Result<Vec<SuiteResult>, ShapeError> {
    Ok(vec![structure(structure_samples)?, energy()?, contraction()?, defects()?, floor()?])
}
