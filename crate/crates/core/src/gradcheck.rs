//! Central finite-difference verification of the analytic gradients.
//!
//! Every parameter entry is perturbed by ±h and the mined loss re-evaluated;
//! the worst guarded relative error per parameter group goes into the
//! report. The checker reports, it never panics.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{BBox, FeatureGrid, Proposal};
use crate::loss::mined_loss;
use crate::model::{backward, forward, ModelConfig, ModelParams};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed guarded relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= self.threshold)
            .map(|g| g.name.as_str())
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<18} entries {:>5}  max rel err {:.3e}  {}",
                g.name,
                g.entries,
                g.max_rel_error,
                if g.max_rel_error < self.threshold { "ok" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "gradcheck: {} (max {:.3e}, threshold {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.threshold
        )
    }
}

/// Deterministic random sample for the checker: a positive grid, in-range
/// boxes, and a mixed label vector.
pub fn random_check_sample(
    cfg: &ModelConfig,
    seed: u64,
) -> (FeatureGrid, Vec<Proposal>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = FeatureGrid::new(Array4::from_shape_fn(
        (cfg.t, cfg.h, cfg.w, cfg.c),
        |_| rng.random_range(0.0..1.0),
    ))
    .expect("finite grid");
    let mut proposals = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let x1 = rng.random_range(0.0..0.55);
        let y1 = rng.random_range(0.0..0.55);
        let bbox = BBox::new(
            x1,
            y1,
            x1 + rng.random_range(0.15..0.4),
            y1 + rng.random_range(0.15..0.4),
        )
        .expect("valid box");
        // deterministic mix of positives and negatives
        let label = u8::from(i % 3 == 0);
        proposals.push(Proposal::object(bbox, label));
        labels.push(label);
    }
    (grid, proposals, labels)
}

/// Compare analytic gradients against central differences on a seeded
/// random sample.
pub fn gradient_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(cfg, seed, None)
}

/// As [`gradient_check`], optionally doubling one group's analytic gradient
/// first — a corruption hook for testing that the checker itself catches
/// wrong gradients.
pub fn gradient_check_with(
    cfg: &ModelConfig,
    seed: u64,
    corrupt_group: Option<&str>,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (grid, proposals, labels) = random_check_sample(cfg, seed);
    let params = ModelParams::init(cfg, seed);

    let (_, _, tape) = forward(&grid, &proposals, &params, cfg)?;
    let (_, grads) = backward(&tape, &labels, &params, cfg)?;

    let loss_at = |p: &ModelParams| -> f64 {
        let (scores, _, _) = forward(&grid, &proposals, p, cfg).expect("forward");
        mined_loss(&scores, &labels).expect("loss").total
    };

    let analytic = grads.named_arrays();
    let mut groups = Vec::with_capacity(analytic.len());
    for (name, shape, mut grad_values) in analytic {
        if corrupt_group == Some(name.as_str()) {
            for g in &mut grad_values {
                *g *= 2.0;
            }
        }
        let count: usize = shape.iter().product();
        let mut max_rel: f64 = 0.0;
        for k in 0..count {
            let mut plus = params.clone();
            perturb(&mut plus, &name, k, FD_STEP);
            let mut minus = params.clone();
            perturb(&mut minus, &name, k, -FD_STEP);
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            let a = grad_values[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        groups.push(GroupReport {
            name,
            entries: count,
            max_rel_error: max_rel,
        });
    }
    let pass = groups.iter().all(|g| g.max_rel_error < GRADCHECK_TOL);
    Ok(GradCheckReport {
        groups,
        threshold: GRADCHECK_TOL,
        pass,
    })
}

fn perturb(params: &mut ModelParams, name: &str, flat_index: usize, delta: f64) {
    params.for_each_array_mut(|arr_name, values| {
        if arr_name == name {
            for (i, v) in values.enumerate() {
                if i == flat_index {
                    *v += delta;
                    break;
                }
            }
        }
    });
}
