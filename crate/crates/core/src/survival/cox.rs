use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 40;
const SCORE_TOL: f64 = 1e-8;
const REL_LL_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-6;
/// |beta| above this means the likelihood is monotone in that direction.
pub const MONOTONE_BETA: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub names: Vec<String>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    /// n x p covariates.
    pub x: DMatrix<f64>,
}

impl SurvivalDataset {
    pub fn new(names: Vec<String>, time: Vec<f64>, event: Vec<bool>, x: DMatrix<f64>) -> Result<Self> {
        let n = time.len();
        if event.len() != n || x.nrows() != n || x.ncols() != names.len() {
            return Err(Error::DimensionMismatch(format!(
                "survival data: {} times, {} events, {}x{} covariates, {} names",
                n,
                event.len(),
                x.nrows(),
                x.ncols(),
                names.len()
            )));
        }
        if let Some(t) = time.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Invalid(format!("survival time {t} is not positive")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariate matrix".into()));
        }
        if !event.iter().any(|&e| e) {
            return Err(Error::Invalid("survival data has no events".into()));
        }
        Ok(Self { names, time, event, x })
    }

    /// Single covariate convenience constructor.
    pub fn univariate(name: &str, time: Vec<f64>, event: Vec<bool>, x: &[f64]) -> Result<Self> {
        Self::new(
            vec![name.to_string()],
            time,
            event,
            DMatrix::from_column_slice(x.len(), 1, x),
        )
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxCoefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Wald p-value.
    pub p: f64,
}

impl CoxCoefficient {
    pub fn significant(&self) -> bool {
        !(self.ci_low <= 1.0 && 1.0 <= self.ci_high)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxResult {
    pub coefficients: Vec<CoxCoefficient>,
    pub log_likelihood: f64,
    /// Log-likelihood at the start and after every accepted step.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub monotone_likelihood: bool,
    pub n_used: usize,
    pub n_events: usize,
}

impl CoxResult {
    pub fn coefficient(&self, name: &str) -> Option<&CoxCoefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

pub(crate) struct Evaluation {
    pub ll: f64,
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
}

/// Efron partial log-likelihood with its gradient and observed information.
pub(crate) fn efron(x: &DMatrix<f64>, time: &[f64], event: &[bool], beta: &DVector<f64>) -> Evaluation {
    let (n, p) = x.shape();
    let eta: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(beta)).collect();
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));

    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);

    let mut k = 0;
    while k < n {
        let t = time[order[k]];
        let mut end = k;
        while end < n && time[order[end]] == t {
            end += 1;
        }
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        let mut d2 = DMatrix::zeros(p, p);
        let mut deaths = 0usize;
        for &i in &order[k..end] {
            let xi = x.row(i).transpose();
            s0 += w[i];
            s1 += &xi * w[i];
            s2 += &xi * xi.transpose() * w[i];
            if event[i] {
                deaths += 1;
                ll += eta[i];
                score += &xi;
                d0 += w[i];
                d1 += &xi * w[i];
                d2 += &xi * xi.transpose() * w[i];
            }
        }
        for l in 0..deaths {
            let f = l as f64 / deaths as f64;
            let a0 = s0 - f * d0;
            let a1 = &s1 - &d1 * f;
            let a2 = &s2 - &d2 * f;
            ll -= a0.ln() + shift;
            score -= &a1 / a0;
            info += &a2 / a0 - &a1 * a1.transpose() / (a0 * a0);
        }
        k = end;
    }
    Evaluation { ll, score, info }
}

fn center(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    c
}

fn check_rank(xc: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let flat: Vec<&str> = names
        .iter()
        .zip(xc.column_iter())
        .filter(|(_, col)| col.iter().all(|v| v.abs() <= 1e-12 * (1.0 + col.amax())))
        .map(|(n, _)| n.as_str())
        .collect();
    if !flat.is_empty() {
        return Err(Error::RankDeficient(format!(
            "covariate(s) without variation: {}",
            flat.join(", ")
        )));
    }
    let sv = xc.clone().svd(false, false).singular_values;
    let max = sv.max();
    if sv.iter().any(|&s| s <= 1e-10 * max) {
        return Err(Error::RankDeficient(format!(
            "covariates {} are collinear",
            names.join(", ")
        )));
    }
    Ok(())
}

fn solve(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    match info.clone().cholesky() {
        Some(ch) => Some(ch.solve(rhs)),
        None => info.clone().lu().solve(rhs),
    }
}

/// Newton-Raphson with step halving on the Efron partial likelihood.
/// Covariates are centred internally, which leaves beta unchanged.
pub fn fit_cox(data: &SurvivalDataset) -> Result<CoxResult> {
    let p = data.x.ncols();
    let n_events = data.n_events();
    if n_events < p + 1 {
        return Err(Error::Invalid(format!(
            "{n_events} events for {p} covariates; need at least {}",
            p + 1
        )));
    }
    let xc = center(&data.x);
    check_rank(&xc, &data.names)?;

    let mut beta = DVector::zeros(p);
    let mut cur = efron(&xc, &data.time, &data.event, &beta);
    let mut trace = vec![cur.ll];
    let mut converged = false;
    let mut monotone = false;
    let mut iterations = 0;

    while iterations < MAX_ITER {
        let step = solve(&cur.info, &cur.score);
        let small_step = step.as_ref().map_or(false, |s| s.amax() < STEP_TOL);
        if cur.score.amax() < SCORE_TOL && small_step {
            converged = true;
            break;
        }
        let Some(step) = step else {
            break;
        };
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &step * scale;
            let next = efron(&xc, &data.time, &data.event, &cand);
            if next.ll.is_finite() && next.ll >= cur.ll {
                accepted = Some((cand, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, next)) = accepted else {
            // no ascent left along the Newton direction
            converged = true;
            break;
        };
        let rel = (next.ll - cur.ll).abs() / cur.ll.abs().max(f64::MIN_POSITIVE);
        beta = cand;
        cur = next;
        trace.push(cur.ll);
        if beta.amax() > MONOTONE_BETA {
            monotone = true;
            break;
        }
        if rel < REL_LL_TOL && step.amax() * scale < STEP_TOL {
            converged = true;
            break;
        }
    }
    if monotone {
        log::warn!(
            "monotone partial likelihood: |beta| exceeded {MONOTONE_BETA}; covariates separate the event order"
        );
    } else if !converged {
        log::warn!("Cox fit did not converge in {MAX_ITER} iterations");
    }

    let cov = cur
        .info
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let coefficients = (0..p)
        .map(|j| {
            let b = beta[j];
            let se = cov[(j, j)].max(0.0).sqrt();
            let z = b / se;
            CoxCoefficient {
                name: data.names[j].clone(),
                beta: b,
                se,
                hr: b.exp(),
                ci_low: (b - 1.96 * se).exp(),
                ci_high: (b + 1.96 * se).exp(),
                p: 2.0 * normal.sf(z.abs()),
            }
        })
        .collect();
    Ok(CoxResult {
        coefficients,
        log_likelihood: cur.ll,
        log_likelihood_trace: trace,
        iterations,
        converged: converged && !monotone,
        monotone_likelihood: monotone,
        n_used: data.len(),
        n_events,
    })
}
