//! Independent gradient oracle: central finite differences against the
//! analytic reverse pass.

use super::{Graph, Real, Tensor, TensorError, Var};

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences with step `eps`, returning the maximum over coordinates of
/// `|analytic - fd| / max(1, |fd|)`.
///
/// `f` builds a scalar-valued graph from a single input var. It must be
/// deterministic; two forward evaluations that disagree bitwise are an error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: Real) -> Result<Real, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::GradCheck("eps must be positive".into()));
    }

    let eval = |values: &[Real], requires_grad: bool| -> Result<(Graph, Var, Var), TensorError> {
        let mut t = Tensor::new(point.shape().to_vec(), values.to_vec())?;
        t.set_requires_grad(requires_grad);
        let mut g = Graph::new();
        let x = g.leaf(&t)?;
        let out = f(&mut g, x)?;
        if g.value(out).len() != 1 {
            return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok((g, x, out))
    };

    // Determinism probe: the same input twice must produce the same bits.
    let (g1, _, o1) = eval(point.values(), false)?;
    let (g2, _, o2) = eval(point.values(), false)?;
    if g1.value(o1) != g2.value(o2) {
        return Err(TensorError::NonDeterministic);
    }

    let (mut g, x, out) = eval(point.values(), true)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(<[Real]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut max_err: Real = 0.0;
    let mut probe = point.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (gp, _, op) = eval(&probe, false)?;
        let fp = gp.value(op)[0];
        probe[i] = orig - eps;
        let (gm, _, om) = eval(&probe, false)?;
        let fm = gm.value(om)[0];
        probe[i] = orig;

        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn sum_of_squares_checks_tightly() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let m = g.mean_lastdim(sq)?;
                g.scale(m, 2.0)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap();
        let err = finite_diff_check(|g, _x| g.constant(vec![1], vec![4.0]), &point, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_then_dot_checks() {
        let point = Tensor::new(vec![1, 4], vec![0.3, -1.0, 0.8, 0.1]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let s = g.softmax_lastdim(x)?;
                let w = g.constant(vec![4, 1], vec![0.9, -0.4, 1.3, 0.2])?;
                let d = g.matmul(s, w)?;
                g.reshape(d, vec![1])
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        let calls = AtomicUsize::new(0);
        let point = Tensor::new(vec![1], vec![1.0]).unwrap();
        let result = finite_diff_check(
            |g, x| {
                let n = calls.fetch_add(1, Ordering::SeqCst) as Real;
                let noise = g.constant(vec![1], vec![n])?;
                g.add(x, noise)
            },
            &point,
            1e-6,
        );
        assert!(matches!(result, Err(TensorError::NonDeterministic)));
    }
}
