//! Slow, obviously-correct reference implementations used to check the
//! optimised code in `nexica`. Nothing here depends on that crate.

/// Log likelihood of cells `[a00, a01, a10, a11]` at `(s, c)` under the
/// pair model, with `0 ln 0 = 0`. No domain check, so it can be probed just
/// outside the unit square.
pub fn log_likelihood(a: [u64; 4], s: f64, c: f64) -> f64 {
    // logs of the factors, with ln(1 - x) taken through ln_1p so that tiny
    // finite-difference steps survive rounding
    let (ls, l1s, l1c) = (s.ln(), (-s).ln_1p(), (-c).ln_1p());
    let ln_f = [2.0 * l1s, l1s + ls, ls + l1s + l1c, ls + (s + c - s * c).ln()];
    a.iter()
        .zip(ln_f)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, l)| if l.is_nan() { f64::NEG_INFINITY } else { n as f64 * l })
        .sum()
}

/// `d ell / d s`, term by term.
fn d_s(a: [u64; 4], s: f64, c: f64) -> f64 {
    let [a00, a01, a10, a11] = a.map(|n| n as f64);
    let mut g = 0.0;
    if a00 > 0.0 {
        g -= 2.0 * a00 / (1.0 - s);
    }
    if a01 > 0.0 {
        g += a01 * (1.0 / s - 1.0 / (1.0 - s));
    }
    if a10 > 0.0 {
        g += a10 * (1.0 / s - 1.0 / (1.0 - s));
    }
    if a11 > 0.0 {
        g += a11 * (1.0 / s + (1.0 - c) / (s + c - s * c));
    }
    g
}

/// `d ell / d c`.
fn d_c(a: [u64; 4], s: f64, c: f64) -> f64 {
    let [_, _, a10, a11] = a.map(|n| n as f64);
    let mut g = 0.0;
    if a10 > 0.0 {
        g -= a10 / (1.0 - c);
    }
    if a11 > 0.0 {
        g += a11 * (1.0 - s) / (s + c - s * c);
    }
    g
}

/// Best `s` for fixed `c`. The log likelihood is concave in `s`, so its
/// derivative is decreasing and bisection finds the root to full precision.
fn best_s(a: [u64; 4], c: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if d_s(a, mid, c) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn profile(a: [u64; 4], c: f64) -> (f64, f64) {
    let s = best_s(a, c);
    (s, log_likelihood(a, s, c))
}

/// Whether `p_c` is identifiable: the cause must fire in some compared
/// slots but not in all of them.
pub fn identifiable(a: [u64; 4]) -> bool {
    a[2] + a[3] > 0 && a[0] + a[1] > 0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maximum {
    pub s: f64,
    pub c: f64,
    pub log_likelihood: f64,
    /// Best value seen on the coarse 2-D grid.
    pub grid_best: f64,
}

/// Maximise the log likelihood over `[0, 1]^2`:
///
/// 1. a 201 x 201 grid gives a lower bound on the maximum;
/// 2. the profile `P(c) = max_s ell(s, c)` is scanned on 1001 values of `c`;
/// 3. `dP/dc` equals `d ell / d c` at the best `s`, so the maximum is either
///    an edge where that slope points outwards or a root of the slope,
///    refined by bisection inside the bracket around the best scanned `c`.
///
/// `None` when `p_c` is not identifiable.
pub fn maximise(a: [u64; 4]) -> Option<Maximum> {
    if !identifiable(a) {
        return None;
    }
    let n = 200;
    let mut grid_best = f64::NEG_INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            grid_best = grid_best.max(log_likelihood(a, i as f64 / n as f64, j as f64 / n as f64));
        }
    }
    let steps = 1000;
    let cs: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let values: Vec<f64> = cs.iter().map(|&c| profile(a, c).1).collect();
    let k = (0..values.len()).max_by(|&x, &y| values[x].total_cmp(&values[y])).unwrap();

    let slope = |c: f64| d_c(a, best_s(a, c), c);
    let c = if k == 0 && slope(0.0) <= 0.0 {
        0.0
    } else if k == steps && slope(1.0) >= 0.0 {
        1.0
    } else {
        let (mut l, mut r) = (cs[k.saturating_sub(1)], cs[(k + 1).min(steps)]);
        for _ in 0..200 {
            let mid = 0.5 * (l + r);
            if mid <= l || mid >= r {
                break;
            }
            if slope(mid) > 0.0 {
                l = mid;
            } else {
                r = mid;
            }
        }
        0.5 * (l + r)
    };
    let (s, ll) = profile(a, c);
    Some(Maximum {
        s,
        c,
        log_likelihood: ll,
        grid_best,
    })
}

/// Central-difference gradient with one Richardson step, step `h`.
pub fn numeric_gradient(a: [u64; 4], s: f64, c: f64, h: f64) -> (f64, f64) {
    let central = |h: f64| {
        (
            (log_likelihood(a, s + h, c) - log_likelihood(a, s - h, c)) / (2.0 * h),
            (log_likelihood(a, s, c + h) - log_likelihood(a, s, c - h)) / (2.0 * h),
        )
    };
    let (g1, g2) = (central(h), central(h / 2.0));
    ((4.0 * g2.0 - g1.0) / 3.0, (4.0 * g2.1 - g1.1) / 3.0)
}

/// Correspondence counts by walking every compared slot. A cause event at
/// `t` claims the earliest unclaimed effect event in `[t + lag, t + lag + tau]`.
pub fn nested_loop_counts(cause: &[bool], effect: &[bool], lag: usize, tau: usize) -> [u64; 4] {
    let window = cause.len() - lag - tau;
    let mut claimed = vec![false; effect.len()];
    let (mut a11, mut a10) = (0u64, 0u64);
    for t in 0..window {
        if !cause[t] {
            continue;
        }
        match (t + lag..=t + lag + tau).find(|&u| effect[u] && !claimed[u]) {
            Some(u) => {
                claimed[u] = true;
                a11 += 1;
            }
            None => a10 += 1,
        }
    }
    let a01 = (lag..lag + window).filter(|&u| effect[u] && !claimed[u]).count() as u64;
    [window as u64 - a11 - a10 - a01, a01, a10, a11]
}

/// Normalised Mann-Whitney U: the fraction of (positive, negative) pairs the
/// scores order correctly, ties counting one half. Exact as a rational
/// `twice_wins / (2 * positives * negatives)`.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> (u64, u64) {
    let mut twice_wins = 0;
    let mut pairs = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice_wins += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (twice_wins, 2 * pairs)
}
