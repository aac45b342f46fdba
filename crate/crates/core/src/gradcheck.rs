//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step of the fourth-order stencil
/// `(8·(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Its O(h⁴)
/// truncation error allows a step large enough to keep rounding noise near
/// 1e-12 for losses of order one.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms; below it the
/// O(ε/h) rounding noise of the difference quotient dominates.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every entry of every parameter.
pub fn check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_params(
        &params.to_vec(),
        |tape, p| {
            let vars = p.register_all(tape);
            f(tape, &vars)
        },
        None,
    )
}

/// Checks `samples` entries drawn uniformly over all parameter entries.
pub fn check_sampled<F>(params: &[Tensor], f: F, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_params(
        &params.to_vec(),
        |tape, p| {
            let vars = p.register_all(tape);
            f(tape, &vars)
        },
        Some((samples, seed)),
    )
}

/// Checks a structured component. `f` must register `params` on the tape
/// before anything else, in [`Parameters::tensors`] order, as every
/// `register` method in this crate does.
pub fn check_params<P, F>(params: &P, f: F, samples: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&mut Tape, &P) -> Result<Var>,
{
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let entries: Vec<(usize, usize)> = match samples {
        None => shapes
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |e| (p, e)))
            .collect(),
        Some((count, seed)) => {
            let total: usize = shapes.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut p = 0;
                    while flat >= shapes[p] {
                        flat -= shapes[p];
                        p += 1;
                    }
                    (p, flat)
                })
                .collect()
        }
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if tape.param_count() != shapes.len() {
        return Err(Error::Contract(format!(
            "{} tensors registered for a component with {}",
            tape.param_count(),
            shapes.len()
        )));
    }
    let grads = tape.backward(loss)?;
    let value = |p: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    for (p, e) in entries {
        let orig = work.tensors()[p].data()[e];
        let mut at = |offset: f64| -> Result<f64> {
            work.tensors_mut()[p].data_mut()[e] = orig + offset;
            value(&work)
        };
        let h = FD_STEP;
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        work.tensors_mut()[p].data_mut()[e] = orig;

        let numeric = (8.0 * near - far) / (12.0 * h);
        let analytic = grads.0[p].data()[e];
        let err = rel_err(analytic, numeric);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst = (p, e);
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Redraws every tensor of `params` from N(0, std²).
pub fn randomize<P: Parameters + ?Sized>(params: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut() {
        *t = random_tensor(t.shape(), std, rng);
    }
}

/// A tensor of the given shape with entries drawn from N(0, std²) via a
/// Box-Muller transform over a seeded generator.
pub fn random_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}
