//! Central finite differences.
//!
//! Used by the test suite as the differentiation oracle and by the
//! second-derivative estimators, which obtain directional second
//! derivatives as finite differences of forward-mode products.

/// Central-difference gradient of a scalar function.
pub fn central_gradient<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference directional derivative of a vector map.
pub fn central_jvp<F>(x: &[f64], v: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let xp: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi + h * vi).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi - h * vi).collect();
    let fp = f(&xp);
    let fm = f(&xm);
    fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Dense Jacobian of a vector map by central differences, row-major
/// `out_dim x in_dim`.
pub fn central_jacobian<F>(x: &[f64], h: f64, mut f: F) -> (usize, Vec<f64>)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        cols.push(fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect());
    }
    let out_dim = cols.first().map_or(0, Vec::len);
    let mut jac = vec![0.0; out_dim * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..out_dim {
            jac[i * n + j] = col[i];
        }
    }
    (out_dim, jac)
}

/// `||a - b|| / max(||b||, floor)` with a tiny floor so exact zeros compare
/// as equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_quadratic() {
        let g = central_gradient(&[1.0, 2.0], 1e-6, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let (rows, j) = central_jacobian(&[1.0, -1.0], 1e-6, |x| {
            vec![2.0 * x[0] + x[1], x[0] - 3.0 * x[1], x[1]]
        });
        assert_eq!(rows, 3);
        let expect = [2.0, 1.0, 1.0, -3.0, 0.0, 1.0];
        for (a, b) in j.iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
