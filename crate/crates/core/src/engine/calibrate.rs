use crate::error::{Error, Result};

/// Bracket and budget for a search over `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoSearch {
    pub lo: f64,
    pub hi: f64,
    pub max_runs: usize,
}

/// Outcome of a search: the best run found and every probe made.
#[derive(Debug, Clone)]
pub struct RhoCalibration<T> {
    pub rho: f64,
    pub value: f64,
    /// Whether `value` landed inside the requested band.
    pub hit: bool,
    pub output: T,
    pub history: Vec<(f64, f64)>,
}

fn miss(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

/// Geometric bisection for a `rho` whose run lands `value` in `band`.
/// `run` maps `rho` to a value assumed non-decreasing in `rho` (a sparsity
/// level, a FLOPs reduction) plus whatever the caller wants to keep. Returns
/// the first run inside the band, or the closest one when the budget runs
/// out.
pub fn calibrate_rho<T>(
    band: (f64, f64),
    search: RhoSearch,
    mut run: impl FnMut(f64) -> Result<(f64, T)>,
) -> Result<RhoCalibration<T>> {
    if !(search.lo > 0.0 && search.hi > search.lo && search.max_runs > 0 && band.0 <= band.1) {
        return Err(Error::config(
            "rho search needs 0 < lo < hi, a positive budget and an ordered band",
        ));
    }
    let (mut lo, mut hi) = (search.lo, search.hi);
    let mut best: Option<RhoCalibration<T>> = None;
    let mut history = Vec::new();
    for _ in 0..search.max_runs {
        let rho = (lo * hi).sqrt();
        let (value, output) = run(rho)?;
        history.push((rho, value));
        let d = miss(value, band);
        if best.as_ref().is_none_or(|b| d < miss(b.value, band)) {
            best = Some(RhoCalibration {
                rho,
                value,
                hit: d == 0.0,
                output,
                history: Vec::new(),
            });
        }
        if d == 0.0 {
            break;
        }
        if value < band.0 {
            lo = rho;
        } else {
            hi = rho;
        }
    }
    let mut best = best.expect("at least one run");
    best.history = history;
    Ok(best)
}
