//! Small scalar numerical helpers.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a maximum of `f` on `[a, b]`; returns `(x, f(x))`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mut best = (0.5 * (a + b), f(0.5 * (a + b)));
    for (x, v) in [(a, f(a)), (b, f(b)), (c, fc), (d, fd)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

pub fn golden_min(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let (x, v) = golden_max(|x| -f(x), a, b, tol);
    (x, -v)
}

/// Maximizers of `f` over `[lo, hi]`: dense scan with `n` points, then
/// golden-section refinement of every local maximum of the scan within
/// `slack` of the best sample. Returns refined points whose value is within
/// `tie` of the best refined value, and that best value.
pub fn argmax_set(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    n: usize,
    slack: f64,
    tie: f64,
    tol: f64,
) -> (Vec<f64>, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| if i + 1 == n { hi } else { lo + i as f64 * h }).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cands = Vec::new();
    for i in 0..n {
        let left = if i == 0 { f64::NEG_INFINITY } else { ys[i - 1] };
        let right = if i + 1 == n { f64::NEG_INFINITY } else { ys[i + 1] };
        if ys[i] >= left && ys[i] >= right && ys[i] >= best - slack {
            let a = xs[i.saturating_sub(1)];
            let b = xs[(i + 1).min(n - 1)];
            cands.push(golden_max(&f, a, b, tol));
        }
    }
    let top = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let mut set: Vec<f64> = cands
        .into_iter()
        .filter(|c| c.1 >= top - tie)
        .map(|c| c.0)
        .collect();
    set.sort_by(f64::total_cmp);
    // plateaus produce neighbouring candidates; merge those closer than a cell
    set.dedup_by(|b, a| (*b - *a).abs() < 2.0 * h);
    (set, top)
}

/// Bisection for a sign change of `f` on `[a, b]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    while b - a > tol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// Ordinary least-squares line `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}
