//! Central finite-difference check of the analytic representation gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{expand_semantics, SemanticTable};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::objective::{
    objective_parts, representation_gradient, GradientMode, Hyperparams, Modality, Representations,
    Similarities,
};
use crate::sae::SaeWeights;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const GRADCHECK_FLOOR: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSetup {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub classes: usize,
    pub seed: u64,
    pub hp: Hyperparams,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            n: 8,
            d: 6,
            k: 4,
            classes: 3,
            seed: 0,
            hp: Hyperparams::default(),
        }
    }
}

/// Deliberate error added to one analytic gradient entry, to show the
/// harness catches it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub modality: Modality,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateError {
    pub mode: GradientMode,
    pub modality: Modality,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub tolerance: f64,
    /// Worst coordinate for each (mode, modality) pair.
    pub checks: Vec<CoordinateError>,
    pub worst: CoordinateError,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

struct Instance {
    reps: Representations,
    sims: Similarities,
    s: Matrix,
    w: SaeWeights,
}

fn instance(setup: &GradcheckSetup) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut rnd = |r: usize, c: usize, scale: f64| {
        Matrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
    };
    let (n, d, k) = (setup.n, setup.d, setup.k);
    let reps = Representations {
        f: rnd(d, n, 1.0),
        h: rnd(d, n, 1.0),
        g: rnd(d, n, 1.0),
    };
    let mut table = rnd(k, setup.classes, 1.0);
    for mut col in table.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    let w = SaeWeights {
        w_f: rnd(k, d, 0.5),
        w_h: rnd(k, d, 0.5),
        w_g: rnd(k, d, 0.5),
        w_e: rnd(k, 2 * d, 0.5),
    };
    let labels: Vec<usize> = (0..n).map(|i| i % setup.classes).collect();
    let s = expand_semantics(&SemanticTable::new(table, true)?, &labels)?;
    Ok(Instance {
        reps,
        sims: Similarities::from_labels(&labels),
        s,
        w,
    })
}

fn slot(reps: &mut Representations, m: Modality) -> &mut Matrix {
    match m {
        Modality::Image => &mut reps.f,
        Modality::Keyframe => &mut reps.h,
        Modality::Video => &mut reps.g,
    }
}

/// Compare analytic gradients with central differences for every modality
/// in both gradient modes.
pub fn gradcheck(
    setup: &GradcheckSetup,
    corruption: Option<Corruption>,
) -> Result<GradcheckReport> {
    let inst = instance(setup)?;
    let cols: Vec<usize> = (0..setup.n).collect();
    let mut checks = Vec::new();
    for mode in [GradientMode::Full, GradientMode::StrictPaper] {
        let objective = |reps: &Representations| -> Result<f64> {
            Ok(objective_parts(reps, &inst.sims, &inst.s, &inst.w, &setup.hp)?.for_mode(mode))
        };
        for m in Modality::ALL {
            let mut analytic = representation_gradient(
                m, &cols, &inst.reps, &inst.sims, &inst.s, &inst.w, &setup.hp, mode,
            )?;
            if let Some(c) = corruption.filter(|c| c.modality == m) {
                analytic[(c.row, c.col)] += c.delta;
            }
            let mut reps = inst.reps.clone();
            let mut worst: Option<CoordinateError> = None;
            for col in 0..setup.n {
                for row in 0..setup.d {
                    let orig = slot(&mut reps, m)[(row, col)];
                    slot(&mut reps, m)[(row, col)] = orig + STEP;
                    let up = objective(&reps)?;
                    slot(&mut reps, m)[(row, col)] = orig - STEP;
                    let down = objective(&reps)?;
                    slot(&mut reps, m)[(row, col)] = orig;
                    let numeric = (up - down) / (2.0 * STEP);
                    let a = analytic[(row, col)];
                    let err = CoordinateError {
                        mode,
                        modality: m,
                        row,
                        col,
                        analytic: a,
                        numeric,
                        rel_error: relative_error(a, numeric),
                    };
                    if worst.is_none_or(|w| err.rel_error > w.rel_error) {
                        worst = Some(err);
                    }
                }
            }
            checks.extend(worst);
        }
    }
    let worst = *checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .unwrap_or_else(|| unreachable!());
    Ok(GradcheckReport {
        passed: worst.rel_error <= GRADCHECK_TOLERANCE,
        tolerance: GRADCHECK_TOLERANCE,
        checks,
        worst,
    })
}
