//! Site-aware stratified k-fold plans. Every contributing site is an
//! atomic unit on the test boundary of each fold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_model::Cohort;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_VAL_FRAC: f64 = 0.2;
pub const DEFAULT_TOL: f64 = 0.1;

/// Largest site count for which a failed greedy assignment is repaired by
/// enumerating every partition of sites into `k` groups.
pub const MAX_ENUMERATED_SITES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Fold {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds.get(index).ok_or_else(|| {
            Error::Invalid(format!(
                "fold {index} out of range for a {}-fold plan",
                self.k
            ))
        })
    }
}

#[derive(Debug, Clone)]
struct SiteStat {
    id: String,
    n: usize,
    pos: usize,
}

fn global_rate(labels: &BTreeMap<String, u8>, ids: &[String]) -> f64 {
    ids.iter().filter(|id| labels[*id] == 1).count() as f64 / ids.len() as f64
}

/// Sum over groups of `|positive rate − global| + |size − N/k| / N`. Empty
/// groups contribute only their size term.
fn objective(sizes: &[usize], pos: &[usize], n_total: usize, global: f64) -> f64 {
    let n = n_total as f64;
    let target = n / sizes.len() as f64;
    sizes
        .iter()
        .zip(pos)
        .map(|(&s, &p)| {
            let rate = if s > 0 {
                (p as f64 / s as f64 - global).abs()
            } else {
                0.0
            };
            rate + (s as f64 - target).abs() / n
        })
        .sum()
}

fn max_deviation(sizes: &[usize], pos: &[usize], global: f64) -> f64 {
    sizes
        .iter()
        .zip(pos)
        .map(|(&s, &p)| {
            if s > 0 {
                (p as f64 / s as f64 - global).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn group_totals(sites: &[SiteStat], assign: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut sizes = vec![0; k];
    let mut pos = vec![0; k];
    for (s, &g) in sites.iter().zip(assign) {
        sizes[g] += s.n;
        pos[g] += s.pos;
    }
    (sizes, pos)
}

fn greedy_assign(sites: &[SiteStat], k: usize, n_total: usize, global: f64) -> Vec<usize> {
    let mut assign = vec![0; sites.len()];
    let mut sizes = vec![0; k];
    let mut pos = vec![0; k];
    for (i, s) in sites.iter().enumerate() {
        let empty = sizes.iter().filter(|&&n| n == 0).count();
        let must_fill_empty = sites.len() - i <= empty;
        let mut best = (f64::INFINITY, 0);
        for g in 0..k {
            if must_fill_empty && sizes[g] > 0 {
                continue;
            }
            sizes[g] += s.n;
            pos[g] += s.pos;
            let obj = objective(&sizes, &pos, n_total, global);
            sizes[g] -= s.n;
            pos[g] -= s.pos;
            if obj < best.0 {
                best = (obj, g);
            }
        }
        assign[i] = best.1;
        sizes[best.1] += s.n;
        pos[best.1] += s.pos;
    }
    assign
}

/// Visits every partition of `n` items into exactly `k` nonempty groups as
/// a restricted growth string.
pub fn for_each_partition(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(
        i: usize,
        used: usize,
        a: &mut Vec<usize>,
        n: usize,
        k: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if n - i < k - used {
            return;
        }
        if i == n {
            visit(a);
            return;
        }
        for g in 0..=used.min(k - 1) {
            a[i] = g;
            rec(i + 1, used.max(g + 1), a, n, k, visit);
        }
    }
    if k == 0 || k > n {
        return;
    }
    let mut a = vec![0; n];
    rec(0, 0, &mut a, n, k, &mut visit);
}

/// Exhaustive search: the lowest-objective partition among those whose
/// worst group deviation is within `tol`, or `None` if no partition meets it.
fn enumerate_assign(
    sites: &[SiteStat],
    k: usize,
    n_total: usize,
    global: f64,
    tol: f64,
) -> Option<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_partition(sites.len(), k, |a| {
        let (sizes, pos) = group_totals(sites, a, k);
        if max_deviation(&sizes, &pos, global) > tol {
            return;
        }
        let obj = objective(&sizes, &pos, n_total, global);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, a.to_vec()));
        }
    });
    best.map(|(_, a)| a)
}

/// Single-site moves and pairwise swaps that lower the worst deviation,
/// for cohorts too large to enumerate.
fn local_search(sites: &[SiteStat], assign: &mut [usize], k: usize, global: f64, tol: f64) {
    let score = |a: &[usize]| {
        let (s, p) = group_totals(sites, a, k);
        max_deviation(&s, &p, global)
    };
    let mut current = score(assign);
    for _ in 0..200 {
        if current <= tol {
            return;
        }
        let mut improved = false;
        'outer: for i in 0..sites.len() {
            for g in 0..k {
                let old = assign[i];
                if g == old {
                    continue;
                }
                assign[i] = g;
                let s = score(assign);
                if s < current {
                    current = s;
                    improved = true;
                    break 'outer;
                }
                assign[i] = old;
            }
            for j in i + 1..sites.len() {
                if assign[i] == assign[j] {
                    continue;
                }
                assign.swap(i, j);
                let s = score(assign);
                if s < current {
                    current = s;
                    improved = true;
                    break 'outer;
                }
                assign.swap(i, j);
            }
        }
        if !improved {
            return;
        }
    }
}

pub fn site_aware_folds(
    cohort: &Cohort,
    labels: &BTreeMap<String, u8>,
    k: usize,
    val_frac: f64,
    seed: u64,
    tol: f64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Invalid(format!("k = {k} must be at least 2")));
    }
    if !(val_frac > 0.0 && val_frac < 0.5) {
        return Err(Error::Invalid(format!(
            "val_frac {val_frac} outside (0, 0.5)"
        )));
    }
    let ids: Vec<String> = cohort.records().keys().cloned().collect();
    if let Some(missing) = ids.iter().find(|id| !labels.contains_key(*id)) {
        return Err(Error::Invalid(format!("patient {missing} has no label")));
    }
    let mut by_site: BTreeMap<&str, SiteStat> = BTreeMap::new();
    for (id, rec) in cohort.records() {
        let s = by_site
            .entry(rec.site_id.as_str())
            .or_insert_with(|| SiteStat {
                id: rec.site_id.clone(),
                n: 0,
                pos: 0,
            });
        s.n += 1;
        s.pos += usize::from(labels[id] == 1);
    }
    if by_site.len() < k {
        return Err(Error::Invalid(format!(
            "{} sites cannot fill {k} folds",
            by_site.len()
        )));
    }
    let n_total = ids.len();
    let limit = 1.0 - 1.0 / k as f64 + tol;
    if let Some(s) = by_site
        .values()
        .find(|s| s.n as f64 / n_total as f64 > limit)
    {
        return Err(Error::SiteDominates(format!(
            "site {} holds {} of {} patients",
            s.id, s.n, n_total
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<SiteStat> = by_site.into_values().collect();
    sites.shuffle(&mut rng);
    sites.sort_by(|a, b| b.n.cmp(&a.n));

    let global = global_rate(labels, &ids);
    let mut assign = greedy_assign(&sites, k, n_total, global);
    let (sizes, pos) = group_totals(&sites, &assign, k);
    if max_deviation(&sizes, &pos, global) > tol {
        if sites.len() <= MAX_ENUMERATED_SITES {
            if let Some(a) = enumerate_assign(&sites, k, n_total, global, tol) {
                assign = a;
            }
        } else {
            local_search(&sites, &mut assign, k, global, tol);
        }
    }

    let site_group: BTreeMap<&str, usize> = sites
        .iter()
        .zip(&assign)
        .map(|(s, &g)| (s.id.as_str(), g))
        .collect();
    let mut folds = Vec::with_capacity(k);
    for g in 0..k {
        let mut fold = Fold::default();
        let mut rest: [Vec<String>; 2] = [Vec::new(), Vec::new()];
        for (id, rec) in cohort.records() {
            if site_group[rec.site_id.as_str()] == g {
                fold.test_ids.insert(id.clone());
            } else {
                rest[labels[id] as usize].push(id.clone());
            }
        }
        let mut n_val_total = 0;
        for class in rest.iter_mut() {
            class.shuffle(&mut rng);
            let n_val = (val_frac * class.len() as f64).round() as usize;
            n_val_total += n_val;
            fold.val_ids.extend(class.drain(..n_val));
        }
        if n_val_total == 0 {
            // keep at least one validation patient when the slice rounds away
            let larger = if rest[0].len() >= rest[1].len() { 0 } else { 1 };
            if rest[larger].len() > 1 {
                fold.val_ids.insert(rest[larger].remove(0));
            }
        }
        fold.train_ids.extend(rest.into_iter().flatten());
        folds.push(fold);
    }
    Ok(FoldPlan { k, folds, seed })
}

/// Absolute deviation of each fold's test positive rate from the global rate.
pub fn test_rate_deviations(plan: &FoldPlan, labels: &BTreeMap<String, u8>) -> Vec<f64> {
    let all: Vec<String> = labels.keys().cloned().collect();
    let global = global_rate(labels, &all);
    plan.folds
        .iter()
        .map(|f| {
            let test: Vec<String> = f.test_ids.iter().cloned().collect();
            if test.is_empty() {
                f64::INFINITY
            } else {
                (global_rate(labels, &test) - global).abs()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoldReport {
    pub deviations: Vec<f64>,
    pub failures: Vec<String>,
}

impl FoldReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for FoldReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.deviations.iter().enumerate() {
            writeln!(f, "fold {i}: test class-rate deviation {d:.4}")?;
        }
        if self.is_ok() {
            writeln!(f, "all fold invariants hold")
        } else {
            self.failures
                .iter()
                .try_for_each(|m| writeln!(f, "FAIL {m}"))
        }
    }
}

pub fn validate_folds(
    plan: &FoldPlan,
    cohort: &Cohort,
    labels: &BTreeMap<String, u8>,
    tol: f64,
) -> FoldReport {
    let mut failures = Vec::new();
    let everyone: BTreeSet<String> = cohort.records().keys().cloned().collect();
    if plan.folds.len() != plan.k {
        failures.push(format!(
            "plan declares k = {} but has {} folds",
            plan.k,
            plan.folds.len()
        ));
    }
    let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, f) in plan.folds.iter().enumerate() {
        let sets = [
            ("train", &f.train_ids),
            ("val", &f.val_ids),
            ("test", &f.test_ids),
        ];
        for a in 0..3 {
            for b in a + 1..3 {
                if let Some(id) = sets[a].1.intersection(sets[b].1).next() {
                    failures.push(format!(
                        "fold {i}: {id} is in both {} and {}",
                        sets[a].0, sets[b].0
                    ));
                }
            }
        }
        let union: BTreeSet<String> = f
            .train_ids
            .iter()
            .chain(&f.val_ids)
            .chain(&f.test_ids)
            .cloned()
            .collect();
        if union != everyone {
            failures.push(format!("fold {i}: sets do not cover exactly the cohort"));
        }
        let mut test_sites = BTreeSet::new();
        let mut other_sites = BTreeSet::new();
        for id in &f.test_ids {
            *tested.entry(id.as_str()).or_default() += 1;
            if let Some(s) = cohort.site_of(id) {
                test_sites.insert(s);
            }
        }
        for id in f.train_ids.iter().chain(&f.val_ids) {
            if let Some(s) = cohort.site_of(id) {
                other_sites.insert(s);
            }
        }
        for s in test_sites.intersection(&other_sites) {
            failures.push(format!("fold {i}: site leakage: {s}"));
        }
    }
    for id in &everyone {
        match tested.get(id.as_str()).copied().unwrap_or(0) {
            1 => {}
            n => failures.push(format!("{id} is tested in {n} folds")),
        }
    }
    let deviations = if labels.len() == everyone.len() {
        test_rate_deviations(plan, labels)
    } else {
        Vec::new()
    };
    if deviations.is_empty() {
        failures.push("labels do not cover the cohort".into());
    }
    for (i, d) in deviations.iter().enumerate() {
        if *d > tol {
            failures.push(format!(
                "fold {i}: test class-rate deviation {d:.4} exceeds {tol}"
            ));
        }
    }
    FoldReport {
        deviations,
        failures,
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PlanRow {
    patient_id: String,
    fold_index: usize,
    role: String,
}

pub fn write_fold_plan(path: &Path, plan: &FoldPlan) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, f) in plan.folds.iter().enumerate() {
        for (role, ids) in [
            ("train", &f.train_ids),
            ("val", &f.val_ids),
            ("test", &f.test_ids),
        ] {
            for id in ids {
                w.serialize(PlanRow {
                    patient_id: id.clone(),
                    fold_index: i,
                    role: role.into(),
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a plan written by [`write_fold_plan`]. The seed is not part of the
/// file and is set to `seed`.
pub fn read_fold_plan(path: &Path, seed: u64) -> Result<FoldPlan> {
    let mut r = csv::Reader::from_path(path)?;
    let mut folds: Vec<Fold> = Vec::new();
    for row in r.deserialize() {
        let row: PlanRow = row?;
        if folds.len() <= row.fold_index {
            folds.resize_with(row.fold_index + 1, Fold::default);
        }
        let f = &mut folds[row.fold_index];
        let set = match row.role.as_str() {
            "train" => &mut f.train_ids,
            "val" => &mut f.val_ids,
            "test" => &mut f.test_ids,
            other => {
                return Err(Error::Invalid(format!(
                    "{}: unknown role {other}",
                    path.display()
                )))
            }
        };
        set.insert(row.patient_id);
    }
    if folds.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: empty fold plan",
            path.display()
        )));
    }
    Ok(FoldPlan {
        k: folds.len(),
        folds,
        seed,
    })
}
