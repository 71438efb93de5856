//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Seed for every tape the check builds. Programs with stochastic ops
    /// fail with a contract error when this is `None`.
    pub seed: Option<u64>,
    /// Lower bound on the relative-error denominator. Gradient entries whose
    /// analytic and numeric values are both below it are compared absolutely.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            seed: Some(0),
            scale_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Indices of parameters over tolerance.
    pub fn flagged(&self) -> Vec<usize> {
        self.params.iter().filter(|p| !p.passed).map(|p| p.index).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, point: &[Tensor], seed: Option<u64>) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = match seed {
        Some(s) => Tape::with_seed(s),
        None => Tape::new(),
    };
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar-valued program".into()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape's gradient of `f` at `point` with central differences
/// `(f(x+eps) - f(x-eps)) / 2eps`, entry by entry.
pub fn check_gradients<F>(f: F, point: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    let (tape, vars, out) = evaluate(&f, point, opts.seed)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut shifted = point.to_vec();
    let mut params = Vec::with_capacity(point.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut worst = 0.0;
        let mut worst_entry = 0;
        for e in 0..point[pi].numel() {
            let orig = point[pi].data()[e];
            shifted[pi].data_mut()[e] = orig + opts.epsilon;
            let (t, _, o) = evaluate(&f, &shifted, opts.seed)?;
            let plus = t.value(o).item();
            shifted[pi].data_mut()[e] = orig - opts.epsilon;
            let (t, _, o) = evaluate(&f, &shifted, opts.seed)?;
            let minus = t.value(o).item();
            shifted[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let err = relative_error(a.data()[e], numeric, opts.scale_floor);
            if err > worst {
                worst = err;
                worst_entry = e;
            }
        }
        params.push(ParamCheck {
            index: pi,
            max_rel_error: worst,
            worst_entry,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}
