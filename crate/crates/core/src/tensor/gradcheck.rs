use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Magnitude below which relative error falls back to absolute error.
const ABS_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences at `point`.
///
/// `f` receives a fresh graph and the variable holding the point, and must
/// return a single-element output.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got output shape {:?}",
            g.value(y).shape()
        )));
    }
    g.backward(y)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(gr) => gr.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let numeric = central_differences(&f, point, step)?;
    let (max_rel_error, worst_index) = max_rel_diff(&analytic, &numeric);
    Ok(GradCheckReport { max_rel_error, worst_index, analytic, numeric })
}

/// Central differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every
/// coordinate of `point`.
pub fn central_differences<F>(f: &F, point: &Tensor<f64>, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok(numeric)
}

/// Largest elementwise relative difference and where it occurs; absolute
/// below a magnitude of 1e-8.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs());
        let err = if scale < ABS_FALLBACK { (x - y).abs() } else { (x - y).abs() / scale };
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0, 6.0]);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let r = grad_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(4.0));
                g.sum(c)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_leaky_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = Tensor::<f64>::uniform(&[2, 2, 3, 3], 0.5, &mut rng);
        let p = Tensor::<f64>::uniform(&[1, 2, 5, 5], 1.0, &mut rng);
        let r = grad_check(
            |g, x| {
                let kv = g.constant(k.clone());
                let y = g.conv2d_same(x, kv)?;
                let y = g.leaky_relu(y, 0.1)?;
                g.mean(y)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn rejects_bad_step_and_vector_output() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|g, x| g.sum(x), &p, 1e-2).is_err());
        assert!(grad_check(|_g, x| Ok(x), &p, 1e-6).is_err());
    }
}
