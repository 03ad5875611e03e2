//! Adaptive Gauss–Legendre quadrature for smooth radial integrands.

use std::sync::OnceLock;

const ORDER: usize = 12;
const MAX_DEPTH: u32 = 40;

struct Rule {
    nodes: [f64; ORDER],
    weights: [f64; ORDER],
}

fn rule() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| {
        let mut nodes = [0.0; ORDER];
        let mut weights = [0.0; ORDER];
        let n = ORDER as f64;
        for i in 0..ORDER {
            // Newton iteration on P_n from the Chebyshev-like initial guess.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(ORDER, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(ORDER, x);
            dp = if d != 0.0 { d } else { dp };
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        Rule { nodes, weights }
    })
}

/// Returns `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn fixed<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> f64 {
    let r = rule();
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = 0.0;
    for (x, w) in r.nodes.iter().zip(r.weights.iter()) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Integrates `f` over `[lo, hi]`, bisecting until the two-panel estimate
/// agrees with the one-panel estimate to `rel_tol` (relative to the running
/// magnitude of the integral).
pub(crate) fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, rel_tol: f64) -> f64 {
    if lo == hi {
        return 0.0;
    }
    let whole = fixed(&f, lo, hi);
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    recurse(&f, lo, hi, whole, rel_tol, scale, 0)
}

fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    lo: f64,
    hi: f64,
    whole: f64,
    rel_tol: f64,
    scale: f64,
    depth: u32,
) -> f64 {
    let mid = 0.5 * (lo + hi);
    let left = fixed(f, lo, mid);
    let right = fixed(f, mid, hi);
    let split = left + right;
    if depth >= MAX_DEPTH || (split - whole).abs() <= rel_tol * scale.max(split.abs()) {
        return split;
    }
    recurse(f, lo, mid, left, rel_tol, scale, depth + 1)
        + recurse(f, mid, hi, right, rel_tol, scale, depth + 1)
}
