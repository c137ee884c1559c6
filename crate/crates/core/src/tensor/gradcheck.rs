//! Central finite-difference gradient checking.
//!
//! The check is the independent oracle for every analytic backward rule:
//! the same scalar function is evaluated through the tape twice per
//! coordinate and compared against the gradient from [`Graph::backward`].

use super::graph::{Graph, Var};
use super::{Result, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over all coordinates of `|analytic - central| / (|analytic| + 1e-8)`
/// for a scalar function of one tensor built by `build`.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_multi(|g, vars| build(g, vars[0]), &[x.clone()], h)
}

/// Same as [`finite_diff_check`] but checks the gradient w.r.t. every input.
pub fn finite_diff_check_multi<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    // Analytic gradients from one tape.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v, t.shape()))
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let central = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[j];
            let rel = (a - central).abs() / (a.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        // f = sum(x^2), grad = 2x
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum_all(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = finite_diff_check(|g, v| g.sum_all(v), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }
}
