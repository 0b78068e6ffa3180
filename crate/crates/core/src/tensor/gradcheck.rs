//! Finite-difference gradient checking.
//!
//! `grad_check` compares the tape's analytic gradient of a scalar-valued
//! tensor function against central differences. The probe step is applied in
//! f32 and the actually-realized step (`x+h` minus `x-h` after rounding) is
//! used as the divisor, so representable fixtures check exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{ScalarFn, Tape, TensorId};
use super::Tensor5;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckSpec {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Number of coordinates to probe; `None` probes all of them.
    pub probes: Option<usize>,
    /// Seed for probe coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            step: 1e-3,
            tolerance: 1e-3,
            probes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ProbeRecord>,
    pub probes: usize,
    /// Probes discarded because the perturbation crossed a ReLU or pooling
    /// kink, where a central difference does not estimate the gradient.
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the analytic gradient of `f` with respect to `input`.
///
/// `f` builds a graph on the provided tape from the input leaf and returns a
/// scalar head (value, output id, seed gradient). It must be deterministic.
///
/// Per-probe errors are measured relative to the larger of the analytic and
/// numeric gradient magnitudes at their scale: |a - n| / max-magnitude. With
/// f32 tensor storage the central difference carries a fixed absolute noise
/// floor, so coordinates whose true gradient vanishes would otherwise report
/// unbounded relative error for a correct implementation.
pub fn grad_check<F>(f: F, input: &Tensor5, spec: &GradCheckSpec) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<ScalarFn>,
{
    // Analytic gradient via one forward + backward.
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let head = f(&mut tape, x)?;
    if !head.value.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check scalar output".into(),
        });
    }
    tape.backward(head.output, &head.seed)?;
    let analytic: Vec<f64> = tape
        .grad(x)
        .map(|g| g.iter().map(|&v| v as f64).collect())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let candidates: Vec<usize> = match spec.probes {
        None => (0..input.numel()).collect(),
        Some(k) => {
            // oversample so kink-crossing probes can be replaced
            let want = (4 * k).min(input.numel());
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut picked = Vec::with_capacity(want);
            let mut seen = std::collections::HashSet::new();
            while picked.len() < want {
                let i = rng.gen_range(0..input.numel());
                if seen.insert(i) {
                    picked.push(i);
                }
            }
            picked
        }
    };
    let target = spec.probes.unwrap_or(input.numel()).min(input.numel());

    let mut coords = Vec::with_capacity(target);
    let mut numeric = Vec::with_capacity(target);
    let mut skipped_kinks = 0usize;
    for &i in &candidates {
        if coords.len() >= target {
            break;
        }
        let x0 = input.data()[i];
        let xp = (x0 as f64 + spec.step) as f32;
        let xm = (x0 as f64 - spec.step) as f32;
        let (fp, sig_p) = eval_at(&f, input, i, xp)?;
        let (fm, sig_m) = eval_at(&f, input, i, xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check probe at coordinate {i}"),
            });
        }
        if sig_p != sig_m {
            skipped_kinks += 1;
            continue;
        }
        let span = xp as f64 - xm as f64;
        coords.push(i);
        numeric.push((fp - fm) / span);
    }
    if coords.is_empty() {
        return Err(Error::Usage(
            "every probe crossed a kink; the check point is degenerate".into(),
        ));
    }

    let scale = analytic
        .iter()
        .map(|v| v.abs())
        .chain(numeric.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);

    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (&i, &n) in coords.iter().zip(numeric.iter()) {
        let a = analytic[i];
        let rel = if scale == 0.0 {
            0.0
        } else {
            (a - n).abs() / scale
        };
        if rel >= max_rel {
            max_rel = rel;
            worst = Some(ProbeRecord {
                index: i,
                analytic: a,
                numeric: n,
                rel_error: rel,
            });
        }
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        probes: coords.len(),
        skipped_kinks,
        tolerance: spec.tolerance,
        passed: max_rel < spec.tolerance,
    })
}

fn eval_at<F>(f: &F, input: &Tensor5, coord: usize, value: f32) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, TensorId) -> Result<ScalarFn>,
{
    let mut perturbed = input.clone();
    perturbed.data_mut()[coord] = value;
    let mut tape = Tape::new();
    let x = tape.leaf(perturbed);
    let value = f(&mut tape, x)?.value;
    Ok((value, tape.kink_signature()))
}
