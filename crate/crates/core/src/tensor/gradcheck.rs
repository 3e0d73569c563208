use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. Returns the maximum over elements of
/// `|a - b| / max(|a|, |b|, 1e-8)`.
///
/// `f` builds the function on a fresh tape given the input variable and must
/// return a single-element output.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<T>| -> Result<T> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let floor = T::lit(1e-8);
    let two_h = h + h;
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / two_h;
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at element {i}")));
        }
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::<f64>::from_fn(&[6], |i| (i as f64 * 0.7).cos() * 2.0);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn relu6_interior_point() {
        let x = Tensor::<f64>::new(vec![1], vec![3.0]).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let r = t.relu6(v);
                Ok(t.sum(r))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
