//! Maximum-likelihood estimates of the spontaneous event probability `p_s`
//! and the causal probability `p_c` from correspondence counts.
//!
//! Each compared slot pair is an independent draw from
//!
//! | pair | probability                  |
//! |------|------------------------------|
//! | 00   | `(1 - p_s)^2`                |
//! | 01   | `(1 - p_s) p_s`              |
//! | 10   | `p_s (1 - p_s) (1 - p_c)`    |
//! | 11   | `p_s (p_s + p_c - p_s p_c)`  |
//!
//! and the estimate maximises `sum A_ij ln f_ij` over `[0, 1]^2`: the
//! closed-form stationary point when it lies in the square, otherwise the
//! better of the two edge maxima on `p_c = 0` and `p_c = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspond::CorrespondenceCounts;

#[derive(Debug, Error, PartialEq)]
pub enum MleError {
    #[error("probability {name} = {value} outside [0, 1]")]
    Domain { name: &'static str, value: f64 },
    #[error("counts cover no slots")]
    EmptyWindow,
}

/// Pair probabilities `(f00, f01, f10, f11)`.
pub fn pair_probabilities(p_s: f64, p_c: f64) -> Result<[f64; 4], MleError> {
    for (name, value) in [("p_s", p_s), ("p_c", p_c)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MleError::Domain { name, value });
        }
    }
    Ok(cell_probabilities(p_s, p_c))
}

#[inline]
fn cell_probabilities(p_s: f64, p_c: f64) -> [f64; 4] {
    let q = 1.0 - p_s;
    [q * q, q * p_s, p_s * q * (1.0 - p_c), p_s * (p_s + p_c - p_s * p_c)]
}

/// Log likelihood `sum A_ij ln f_ij`, with `0 ln 0 = 0`. Returns negative
/// infinity when a cell with a nonzero count has probability zero.
pub fn log_likelihood(counts: &CorrespondenceCounts, p_s: f64, p_c: f64) -> Result<f64, MleError> {
    let f = pair_probabilities(p_s, p_c)?;
    Ok(weighted_log(counts, &f))
}

fn weighted_log(counts: &CorrespondenceCounts, f: &[f64; 4]) -> f64 {
    let mut total = 0.0;
    for (&a, &fij) in counts.cells().iter().zip(f) {
        if a == 0 {
            continue;
        }
        if fij <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += a as f64 * fij.ln();
    }
    total
}

/// Stationary point of the log likelihood, ignoring the `[0, 1]` bounds.
///
/// `None` when a denominator vanishes: the cause never fires
/// (`A10 + A11 = 0`) or fires in every compared slot (`A00 + A01 = 0`).
pub fn estimate_unconstrained(counts: &CorrespondenceCounts) -> Option<(f64, f64)> {
    let Fraction { num, den } = ps_fraction(counts)?;
    let ps = num as f64 / den as f64;
    let pc = pc_fraction(counts)?;
    Some((ps, pc.num as f64 / pc.den as f64))
}

/// Exact rational `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy)]
struct Fraction {
    num: i128,
    den: i128,
}

fn cells_i128(c: &CorrespondenceCounts) -> [i128; 4] {
    [c.a00 as i128, c.a01 as i128, c.a10 as i128, c.a11 as i128]
}

fn ps_fraction(c: &CorrespondenceCounts) -> Option<Fraction> {
    let [a00, a01, a10, a11] = cells_i128(c);
    let den = 2 * (a00 + a01) + a10 + a11;
    (den > 0).then_some(Fraction {
        num: a01 + a10 + a11,
        den,
    })
}

fn pc_fraction(c: &CorrespondenceCounts) -> Option<Fraction> {
    let [a00, a01, a10, a11] = cells_i128(c);
    let den = (2 * a00 + a01) * (a10 + a11);
    (den > 0).then_some(Fraction {
        num: 2 * a00 * a11 + a01 * (a11 - a10) - a10 * a10 - a10 * a11,
        den,
    })
}

/// Maximiser of the log likelihood along the edge `p_c = 0`.
pub fn ps_on_pc0(counts: &CorrespondenceCounts) -> f64 {
    let [a00, a01, a10, a11] = counts.cells();
    (a01 + a10 + 2 * a11) as f64 / (2 * (a00 + a01 + a10 + a11)) as f64
}

/// Maximiser of the log likelihood along the edge `p_c = 1`.
pub fn ps_on_pc1(counts: &CorrespondenceCounts) -> f64 {
    let [a00, a01, _, a11] = counts.cells();
    (a01 + a11) as f64 / (2 * (a00 + a01) + a11) as f64
}

/// Which part of the parameter square the estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateCase {
    Interior,
    BoundaryPc0,
    BoundaryPc1,
    /// The cause never fires, or fires in every slot: `p_c` is not identifiable.
    Undefined,
}

impl EstimateCase {
    pub const ALL: [EstimateCase; 4] = [
        EstimateCase::Interior,
        EstimateCase::BoundaryPc0,
        EstimateCase::BoundaryPc1,
        EstimateCase::Undefined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimateCase::Interior => "interior",
            EstimateCase::BoundaryPc0 => "boundary_pc0",
            EstimateCase::BoundaryPc1 => "boundary_pc1",
            EstimateCase::Undefined => "undefined",
        }
    }
}

impl fmt::Display for EstimateCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimateCase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown estimate case '{s}'"))
    }
}

/// Constrained maximum-likelihood estimate for one tuple.
///
/// For [`EstimateCase::Undefined`] the probabilities and the log likelihood
/// are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub p_s: f64,
    pub p_c: f64,
    /// Unconstrained stationary value of `p_c`, before any boundary handling.
    pub p_c_raw: Option<f64>,
    pub log_likelihood: f64,
    pub case: EstimateCase,
}

impl CausalEstimate {
    fn undefined() -> Self {
        Self {
            p_s: f64::NAN,
            p_c: f64::NAN,
            p_c_raw: None,
            log_likelihood: f64::NAN,
            case: EstimateCase::Undefined,
        }
    }

    pub fn is_defined(&self) -> bool {
        self.case != EstimateCase::Undefined
    }
}

/// Constrained maximum-likelihood estimate of `(p_s, p_c)`.
///
/// 1. Take the stationary point if it lies in `[0, 1]^2`.
/// 2. Otherwise compare the edge maxima on `p_c = 0` and `p_c = 1` and keep
///    the one with the larger log likelihood; ties go to `p_c = 0`.
///
/// The raw `p_c` never exceeds 1 for non-negative counts, so in step 2 the
/// `p_c = 1` edge loses whenever `A10 > 0`.
pub fn estimate(counts: &CorrespondenceCounts) -> Result<CausalEstimate, MleError> {
    if counts.window == 0 || counts.cells().iter().sum::<u64>() == 0 {
        return Err(MleError::EmptyWindow);
    }
    let (Some(ps), Some(pc)) = (ps_fraction(counts), pc_fraction(counts)) else {
        return Ok(CausalEstimate::undefined());
    };
    let p_c_raw = pc.num as f64 / pc.den as f64;
    // p_s is always in [0, 1] since 2 A00 + A01 >= 0; p_c is checked exactly.
    if pc.num >= 0 && pc.num <= pc.den {
        let p_s = ps.num as f64 / ps.den as f64;
        return Ok(CausalEstimate {
            p_s,
            p_c: p_c_raw,
            p_c_raw: Some(p_c_raw),
            log_likelihood: weighted_log(counts, &cell_probabilities(p_s, p_c_raw)),
            case: EstimateCase::Interior,
        });
    }
    let ps0 = ps_on_pc0(counts);
    let ps1 = ps_on_pc1(counts);
    let ll0 = weighted_log(counts, &cell_probabilities(ps0, 0.0));
    let ll1 = weighted_log(counts, &cell_probabilities(ps1, 1.0));
    let (p_s, p_c, log_likelihood, case) = if ll1 > ll0 {
        (ps1, 1.0, ll1, EstimateCase::BoundaryPc1)
    } else {
        (ps0, 0.0, ll0, EstimateCase::BoundaryPc0)
    };
    Ok(CausalEstimate {
        p_s,
        p_c,
        p_c_raw: Some(p_c_raw),
        log_likelihood,
        case,
    })
}

/// Analytic gradient `(dl/dp_s, dl/dp_c)` of the log likelihood, summing
/// `A_ij * d ln f_ij` over cells with nonzero counts.
pub fn gradient(counts: &CorrespondenceCounts, p_s: f64, p_c: f64) -> (f64, f64) {
    let [a00, a01, a10, a11] = counts.cells().map(|a| a as f64);
    let r = p_s + p_c - p_s * p_c;
    let mut ds = 0.0;
    let mut dc = 0.0;
    if a00 > 0.0 {
        ds += a00 * 2.0 / (p_s - 1.0);
    }
    if a01 > 0.0 {
        ds += a01 * (1.0 - 2.0 * p_s) / (p_s * (1.0 - p_s));
    }
    if a10 > 0.0 {
        ds += a10 * (1.0 - 2.0 * p_s) / (p_s * (1.0 - p_s));
        dc += a10 / (p_c - 1.0);
    }
    if a11 > 0.0 {
        ds += a11 * (-2.0 * p_s * (p_c - 1.0) + p_c) / (p_s * r);
        dc += a11 * (1.0 - p_s) / r;
    }
    (ds, dc)
}
