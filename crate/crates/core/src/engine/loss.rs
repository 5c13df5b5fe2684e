use ndarray::Array2;

use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

fn check(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Mean squared componentwise difference.
pub fn mse(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    check(x, x_hat)?;
    let n = x.len() as f64;
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `d mse / d x_hat`.
pub fn mse_grad(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<Array2<f64>> {
    check(x, x_hat)?;
    let n = x.len() as f64;
    Ok((x_hat - x) * (2.0 / n))
}

/// Mean squared error of each row.
pub fn mse_rows(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<Vec<f64>> {
    check(x, x_hat)?;
    let d = x.ncols() as f64;
    Ok(x.rows()
        .into_iter()
        .zip(x_hat.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / d)
        .collect())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Binary cross-entropy averaged over entries, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce(prediction: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check(prediction, target)?;
    let n = prediction.len() as f64;
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clamp_p(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// `d bce / d prediction`; zero where the clamp is active.
pub fn bce_grad(prediction: &Array2<f64>, target: &Array2<f64>) -> Result<Array2<f64>> {
    check(prediction, target)?;
    let n = prediction.len() as f64;
    let mut g = prediction.clone();
    g.zip_mut_with(target, |p, &t| {
        *p = if *p < BCE_CLAMP || *p > 1.0 - BCE_CLAMP {
            0.0
        } else {
            (-(t / *p) + (1.0 - t) / (1.0 - *p)) / n
        };
    });
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_values() {
        let x = array![[0.0, 1.0]];
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&x, &array![[0.5, 0.5]]).unwrap(), 0.25);
        assert!(mse(&x, &array![[0.5]]).is_err());
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let v = bce(&array![[0.5]], &array![[1.0]]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_clamps_extremes() {
        let v = bce(&array![[0.0, 1.0]], &array![[1.0, 0.0]]).unwrap();
        assert!(v.is_finite());
        assert!((v + (1e-7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn bce_grad_matches_difference_quotient() {
        let p = array![[0.3, 0.8]];
        let t = array![[1.0, 0.0]];
        let g = bce_grad(&p, &t).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut up = p.clone();
            up[[0, j]] += h;
            let mut dn = p.clone();
            dn[[0, j]] -= h;
            let fd = (bce(&up, &t).unwrap() - bce(&dn, &t).unwrap()) / (2.0 * h);
            assert!((fd - g[[0, j]]).abs() < 1e-7);
        }
    }
}
