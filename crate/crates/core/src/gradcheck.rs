//! Central finite differences for checking reverse-mode gradients.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for each coordinate `i` in `indices`
/// (every coordinate when `None`). `x` is restored before returning.
pub fn numeric_gradient(
    x: &mut Tensor<f64>,
    h: f64,
    indices: Option<&[usize]>,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= x.len() {
            return Err(invalid(format!("coordinate {i} outside tensor of {} values", x.len())));
        }
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = f(x);
        x.data_mut()[i] = orig - h;
        let minus = f(x);
        x.data_mut()[i] = orig;
        out.push((plus? - minus?) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared gradients differ in length");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
