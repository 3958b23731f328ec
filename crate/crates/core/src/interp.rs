//! Lagrange interpolation, differentiation and quadrature on node subsets.

/// Start index of a `width`-point stencil inside `lo..=hi` centred on `x`.
pub fn stencil(nodes: &[f64], lo: usize, hi: usize, x: f64, width: usize) -> (usize, usize) {
    let avail = hi - lo + 1;
    let w = width.min(avail);
    let sub = &nodes[lo..=hi];
    let i = lo + sub.partition_point(|&g| g <= x).saturating_sub(1).min(avail.saturating_sub(1));
    let left = (w - 1) / 2;
    let start = i.saturating_sub(left).max(lo).min(hi + 1 - w);
    (start, w)
}

/// Lagrange basis weights at `x` for the abscissae `xs`.
pub fn weights(xs: &[f64], x: f64) -> Vec<f64> {
    let n = xs.len();
    let mut w = vec![1.0; n];
    for i in 0..n {
        if x == xs[i] {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            return e;
        }
        for j in 0..n {
            if j != i {
                w[i] *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
    }
    w
}

/// Weights of the derivative of the interpolating polynomial at `x`.
pub fn derivative_weights(xs: &[f64], x: f64) -> Vec<f64> {
    let n = xs.len();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut denom = 1.0;
        for j in 0..n {
            if j != i {
                denom *= xs[i] - xs[j];
            }
        }
        // d/dx prod_{j != i} (x - xj)
        let mut sum = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            let mut prod = 1.0;
            for j in 0..n {
                if j != i && j != k {
                    prod *= x - xs[j];
                }
            }
            sum += prod;
        }
        w[i] = sum / denom;
    }
    w
}

/// Weights `w_k` such that `sum w_k f(xs_k)` integrates the interpolant of
/// `f` over `[a, b]` exactly (three-point Gauss-Legendre, exact to degree 5).
pub fn integral_weights(xs: &[f64], a: f64, b: f64) -> Vec<f64> {
    const G: [(f64, f64); 3] = [
        (-0.774_596_669_241_483_4, 5.0 / 9.0),
        (0.0, 8.0 / 9.0),
        (0.774_596_669_241_483_4, 5.0 / 9.0),
    ];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut out = vec![0.0; xs.len()];
    for (g, gw) in G {
        let lw = weights(xs, mid + half * g);
        for (o, l) in out.iter_mut().zip(lw) {
            *o += gw * half * l;
        }
    }
    out
}

/// `I[j] = int_{x_j}^{x_last} f` on nodes `xs` with values `fs`, using
/// piecewise cubic interpolation.
pub fn cumulative_tail_integral(xs: &[f64], fs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = vec![0.0; n];
    for j in (0..n.saturating_sub(1)).rev() {
        let (s, w) = stencil(xs, 0, n - 1, 0.5 * (xs[j] + xs[j + 1]), 4);
        let iw = integral_weights(&xs[s..s + w], xs[j], xs[j + 1]);
        let piece: f64 = iw.iter().zip(&fs[s..s + w]).map(|(a, b)| a * b).sum();
        out[j] = out[j + 1] + piece;
    }
    out
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
