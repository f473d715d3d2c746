use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor so coordinates with vanishing gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the tape gradient of a scalar function against central differences.
///
/// `f` records its computation on the supplied tape starting from the input
/// leaf and returns the scalar output.
pub fn gradcheck<Fun>(f: Fun, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradcheck_coords(f, x, eps, tol, None)
}

/// As [`gradcheck`], restricted to a subset of coordinates when `coords` is given.
pub fn gradcheck_coords<Fun>(
    f: Fun,
    x: &Tensor<f64>,
    eps: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradcheckReport>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.numel() != 1 {
            return Err(Error::NonScalarLoss(y.shape().to_vec()));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck evaluation returned {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0;
    let mut worst_index = None;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > worst || worst_index.is_none() {
            worst = err;
            worst_index = Some(i);
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        worst_index,
        checked: coords.len(),
        tolerance: tol,
        passed: worst <= tol,
    })
}
