//! Limited-memory BFGS with Armijo backtracking, used only to compute
//! reference optima offline.

use std::collections::VecDeque;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimise from `x0`; `fg` may fail (e.g. singular geometry), which ends the run.
pub fn lbfgs<E>(
    x0: &[f64],
    max_iter: usize,
    bound: f64,
    mut fg: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
) -> Option<(Vec<f64>, f64)> {
    let mem = 8;
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x).ok()?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    for _ in 0..max_iter {
        let gn = dot(&g, &g).sqrt();
        if gn < 1e-10 {
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
            hist.clear();
        }
        let mut step = if hist.is_empty() { (1.0 / gn).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> =
                x.iter().zip(&d).map(|(xi, di)| (xi + step * di).clamp(-bound, bound)).collect();
            if let Ok((fn_, gn_)) = fg(&xn) {
                if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn_));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn_)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn_.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > mem {
                hist.pop_front();
            }
        }
        let done = (f - fn_).abs() < 1e-14 * (1.0 + f.abs());
        x = xn;
        f = fn_;
        g = gn_;
        if done {
            break;
        }
    }
    Some((x, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_rosenbrock() {
        let (x, f) = lbfgs::<()>(&[-1.2, 1.0], 500, 10.0, |x| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((f, g))
        })
        .unwrap();
        assert!(f < 1e-12, "{f}");
        assert!((x[0] - 1.0).abs() < 1e-5);
    }
}
