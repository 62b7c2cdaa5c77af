//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub path: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err <= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let mark = if t.max_rel_err <= self.tolerance { "ok " } else { "BAD" };
            writeln!(
                f,
                "{mark} {:<48} n={:<3} rel={:.3e} abs={:.3e}",
                t.path, t.coordinates, t.max_rel_err, t.max_abs_err
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParamTree) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.value(loss)
        .item()
        .ok_or_else(|| Error::GradCheck("closure did not produce a scalar".into()))
}

/// Compares analytic gradients of `f` against central differences on
/// `samples` random coordinates of every non-frozen tensor. `f` must build
/// its loss on the graph it is handed; the graph is always in evaluation
/// mode so dropout is off.
pub fn grad_check<F>(f: F, params: &mut ParamTree, samples: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let base = g
        .value(loss)
        .item()
        .ok_or_else(|| Error::GradCheck("closure did not produce a scalar".into()))?;
    let again = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "closure is non-deterministic: {base:e} then {again:e}"
        )));
    }
    let analytic = g.param_grads(&g.backward(loss)?);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths: Vec<String> = params
        .paths()
        .filter(|p| !params.is_frozen(p))
        .map(str::to_string)
        .collect();
    let mut tensors = Vec::with_capacity(paths.len());
    for path in paths {
        let numel = params.get(&path)?.numel();
        let zeros;
        let grad = match analytic.get(&path) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; numel];
                &zeros
            }
        };
        let coords: Vec<usize> = if samples >= numel {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, samples).into_vec()
        };
        let mut check = TensorCheck {
            path: path.clone(),
            coordinates: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in coords {
            let orig = params.get(&path)?.data()[i];
            params.get_mut(&path)?.data_mut()[i] = orig + FD_STEP;
            let plus = evaluate(&f, params);
            params.get_mut(&path)?.data_mut()[i] = orig - FD_STEP;
            let minus = evaluate(&f, params);
            params.get_mut(&path)?.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            check.max_abs_err = check.max_abs_err.max((grad[i] - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(grad[i], numeric));
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tolerance, tensors })
}
