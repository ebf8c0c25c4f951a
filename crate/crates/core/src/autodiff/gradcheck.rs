use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Gradient magnitudes below this are compared absolutely.
const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    /// Which input tensor and which flat element.
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.passed)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares backward gradients of a scalar function against central differences.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        eps,
        tol,
    )
}

/// Multi-input variant: `f` receives one leaf per entry of `points`.
pub fn finite_difference_check_many<F>(
    f: F,
    points: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut coordinates = Vec::new();
    let mut work: Vec<Tensor> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        for element in 0..point.numel() {
            let orig = point.data()[element];
            work[input].data_mut()[element] = orig + eps;
            let plus = eval(&work)?;
            work[input].data_mut()[element] = orig - eps;
            let minus = eval(&work)?;
            work[input].data_mut()[element] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[input].data()[element];
            let rel_error = relative_error(a, numeric);
            coordinates.push(CoordinateCheck {
                input,
                element,
                analytic: a,
                numeric,
                rel_error,
                passed: rel_error < tol,
            });
        }
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        coordinates,
    })
}
