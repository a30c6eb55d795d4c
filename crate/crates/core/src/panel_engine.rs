//! Multi-way fixed-effects OLS with cluster-robust standard errors.
//!
//! Fixed effects are absorbed by alternating projections: each sweep
//! subtracts group means one dimension at a time (Gauss–Seidel), and every
//! pair of sweeps is followed by an Irons–Tuck extrapolation step. The slope
//! coefficients then come from OLS on the demeaned columns
//! (Frisch–Waugh–Lovell), and the covariance is the CR1 cluster sandwich.
//!
//! [`brute_force_fit`] solves the same problem with an explicit dummy matrix,
//! orthonormalized directly. It exists as an oracle for small panels.

use std::collections::HashMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps arbitrary labels to dense ids in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Codebook {
    ids: HashMap<String, u32>,
    labels: Vec<String>,
}

impl Codebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn code(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.ids.insert(label.to_string(), id);
        self.labels.push(label.to_string());
        id
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One fixed-effect dimension: a group id per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeDim {
    pub name: String,
    pub ids: Vec<u32>,
}

impl FeDim {
    pub fn from_labels<S: AsRef<str>>(name: impl Into<String>, labels: &[S]) -> Self {
        let mut book = Codebook::new();
        FeDim {
            name: name.into(),
            ids: labels.iter().map(|l| book.code(l.as_ref())).collect(),
        }
    }
}

/// One regression observation before columnar packing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub y: f64,
    pub x: Vec<f64>,
    pub fe_ids: Vec<String>,
    pub cluster_id: String,
}

/// Column-major regression panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub names: Vec<String>,
    pub fe: Vec<FeDim>,
    pub cluster: Vec<u32>,
}

impl Panel {
    pub fn new(y: Vec<f64>, x: Vec<Vec<f64>>, names: Vec<String>, fe: Vec<FeDim>, cluster: Vec<u32>) -> Result<Self> {
        let n = y.len();
        if x.len() != names.len() {
            return Err(Error::Validation(format!("{} columns but {} names", x.len(), names.len())));
        }
        for (c, name) in x.iter().zip(&names) {
            if c.len() != n {
                return Err(Error::Validation(format!("column `{name}` has {} rows, expected {n}", c.len())));
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("column `{name}` row {i} is not finite")));
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("outcome row {i} is not finite")));
        }
        for d in &fe {
            if d.ids.len() != n {
                return Err(Error::Validation(format!("fixed effect `{}` has {} rows, expected {n}", d.name, d.ids.len())));
            }
        }
        if cluster.len() != n {
            return Err(Error::Validation(format!("cluster ids have {} rows, expected {n}", cluster.len())));
        }
        Ok(Panel { y, x, names, fe, cluster })
    }

    pub fn from_rows(names: Vec<String>, fe_names: Vec<String>, rows: &[PanelRow]) -> Result<Self> {
        let p = names.len();
        let mut x = vec![Vec::with_capacity(rows.len()); p];
        let mut books = vec![Codebook::new(); fe_names.len()];
        let mut fe_ids = vec![Vec::with_capacity(rows.len()); fe_names.len()];
        let mut clusters = Codebook::new();
        let mut cluster = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != p || r.fe_ids.len() != fe_names.len() {
                return Err(Error::Validation(format!("row {i} has the wrong number of fields")));
            }
            for (col, v) in x.iter_mut().zip(&r.x) {
                col.push(*v);
            }
            for ((ids, book), label) in fe_ids.iter_mut().zip(books.iter_mut()).zip(&r.fe_ids) {
                ids.push(book.code(label));
            }
            cluster.push(clusters.code(&r.cluster_id));
        }
        let fe = fe_names.into_iter().zip(fe_ids).map(|(name, ids)| FeDim { name, ids }).collect();
        Panel::new(rows.iter().map(|r| r.y).collect(), x, names, fe, cluster)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Keep only the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Panel {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Panel {
            y: pick(&self.y),
            x: self.x.iter().map(|c| pick(c)).collect(),
            names: self.names.clone(),
            fe: self
                .fe
                .iter()
                .map(|d| FeDim {
                    name: d.name.clone(),
                    ids: rows.iter().map(|&i| d.ids[i]).collect(),
                })
                .collect(),
            cluster: rows.iter().map(|&i| self.cluster[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemeanOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub accelerate: bool,
}

impl Default for DemeanOptions {
    fn default() -> Self {
        DemeanOptions {
            tol: 1e-8,
            max_iter: 10_000,
            accelerate: true,
        }
    }
}

/// Drop observations that are alone in any fixed-effect cell, repeating until
/// no singletons remain. Returns the surviving row indices.
pub fn prune_singletons(fe: &[FeDim], n: usize) -> Vec<usize> {
    let mut alive = vec![true; n];
    loop {
        let mut changed = false;
        for d in fe {
            let levels = d.ids.iter().copied().max().map_or(0, |m| m as usize + 1);
            let mut count = vec![0u32; levels];
            for (i, &g) in d.ids.iter().enumerate() {
                if alive[i] {
                    count[g as usize] += 1;
                }
            }
            for (i, &g) in d.ids.iter().enumerate() {
                if alive[i] && count[g as usize] == 1 {
                    alive[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..n).filter(|&i| alive[i]).collect()
}

/// Dense re-indexing of one dimension over the active rows.
#[derive(Debug, Clone)]
struct GroupIndex {
    ids: Vec<u32>,
    inv_count: Vec<f64>,
}

impl GroupIndex {
    fn new(raw: &[u32]) -> Self {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut counts: Vec<f64> = Vec::new();
        let ids = raw
            .iter()
            .map(|&g| {
                let next = remap.len() as u32;
                let id = *remap.entry(g).or_insert(next);
                if id as usize == counts.len() {
                    counts.push(0.0);
                }
                counts[id as usize] += 1.0;
                id
            })
            .collect();
        GroupIndex {
            ids,
            inv_count: counts.into_iter().map(|c| 1.0 / c).collect(),
        }
    }

    fn levels(&self) -> usize {
        self.inv_count.len()
    }

    /// Subtract group means in place, summing rows in index order.
    fn sweep(&self, v: &mut [f64], sums: &mut Vec<f64>) {
        sums.clear();
        sums.resize(self.levels(), 0.0);
        for (x, &g) in v.iter().zip(&self.ids) {
            sums[g as usize] += *x;
        }
        for (s, w) in sums.iter_mut().zip(&self.inv_count) {
            *s *= w;
        }
        for (x, &g) in v.iter_mut().zip(&self.ids) {
            *x -= sums[g as usize];
        }
    }
}

fn gauss_seidel(dims: &[GroupIndex], v: &mut [f64], sums: &mut Vec<f64>) {
    for d in dims {
        d.sweep(v, sums);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Stop when the distance to the fixed point, bounded through the observed
/// contraction rate, is below `tol`. A small step alone is not enough: with a
/// rate near 1 the remaining error is about `delta / (1 - rate)`.
fn settled(delta: f64, prev_delta: Option<f64>, tol: f64) -> bool {
    if delta == 0.0 {
        return true;
    }
    match prev_delta {
        Some(p) if p > 0.0 && delta < tol => {
            let rate = delta / p;
            rate < 1.0 && delta / (1.0 - rate) < tol
        }
        _ => false,
    }
}

/// Demean one column to convergence; returns (sweeps, final delta).
fn demean_column(dims: &[GroupIndex], v: &mut [f64], opts: &DemeanOptions) -> Result<(usize, f64)> {
    let mut sums = Vec::new();
    if dims.len() == 1 {
        dims[0].sweep(v, &mut sums);
        return Ok((1, 0.0));
    }
    let mut prev = v.to_vec();
    let mut g1 = vec![0.0; v.len()];
    let mut sweeps = 0;
    let mut delta = f64::INFINITY;
    // delta of the previous plain sweep, if nothing was extrapolated since
    let mut last: Option<f64> = None;
    while sweeps < opts.max_iter {
        // x1 = G(x0)
        prev.copy_from_slice(v);
        gauss_seidel(dims, v, &mut sums);
        sweeps += 1;
        delta = max_abs_diff(v, &prev);
        if settled(delta, last, opts.tol) {
            return Ok((sweeps, delta));
        }
        last = Some(delta);
        if !opts.accelerate || sweeps >= opts.max_iter {
            continue;
        }
        // x2 = G(x1), then extrapolate along x2 - x1.
        g1.copy_from_slice(v);
        gauss_seidel(dims, v, &mut sums);
        sweeps += 1;
        delta = max_abs_diff(v, &g1);
        if settled(delta, last, opts.tol) {
            return Ok((sweeps, delta));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for ((x2, x1), x0) in v.iter().zip(&g1).zip(&prev) {
            let d1 = x2 - x1;
            let d2 = x2 - 2.0 * x1 + x0;
            num += d1 * d2;
            den += d2 * d2;
        }
        if den > 0.0 {
            let c = num / den;
            for (x2, x1) in v.iter_mut().zip(&g1) {
                *x2 -= c * (*x2 - x1);
            }
            last = None;
        } else {
            last = Some(delta);
        }
    }
    Err(Error::NotConverged {
        iterations: sweeps,
        last_delta: delta,
    })
}

/// Union-find components of the bipartite graph linking two dimensions' levels.
fn connected_components(a: &GroupIndex, b: &GroupIndex) -> usize {
    let na = a.levels();
    let mut parent: Vec<usize> = (0..na + b.levels()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for (&x, &y) in a.ids.iter().zip(&b.ids) {
        let (rx, ry) = (find(&mut parent, x as usize), find(&mut parent, na + y as usize));
        if rx != ry {
            parent[rx] = ry;
        }
    }
    (0..parent.len()).filter(|&i| find(&mut parent, i) == i).count()
}

/// Result of absorbing the fixed effects.
#[derive(Debug, Clone)]
pub struct Demeaned {
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Indices (into the input panel) of the rows that survived singleton pruning.
    pub rows: Vec<usize>,
    pub dropped_singletons: usize,
    pub iterations: usize,
    pub max_delta: f64,
    pub fe_levels: Vec<usize>,
    /// Degrees of freedom used up by the fixed effects.
    pub k_absorbed: usize,
}

/// Project all fixed effects out of `y` and every `x` column.
///
/// A panel with no fixed-effect dimensions is demeaned by its overall mean.
pub fn demean_hdfe(panel: &Panel, opts: &DemeanOptions) -> Result<Demeaned> {
    let n = panel.n_rows();
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 rows, got {n}")));
    }
    let constant;
    let fe: &[FeDim] = if panel.fe.is_empty() {
        constant = [FeDim {
            name: "_cons".into(),
            ids: vec![0; n],
        }];
        &constant
    } else {
        &panel.fe
    };
    let rows = prune_singletons(fe, n);
    if rows.len() < 2 {
        return Err(Error::Validation("fewer than 2 rows remain after dropping singletons".into()));
    }
    let dims: Vec<GroupIndex> = fe
        .iter()
        .map(|d| GroupIndex::new(&rows.iter().map(|&i| d.ids[i]).collect::<Vec<_>>()))
        .collect();
    let fe_levels: Vec<usize> = dims.iter().map(GroupIndex::levels).collect();
    let k_absorbed = match dims.len() {
        1 => fe_levels[0],
        _ => {
            let c = connected_components(&dims[0], &dims[1]);
            fe_levels[0] + fe_levels[1] - c + fe_levels[2..].iter().map(|l| l - 1).sum::<usize>()
        }
    };

    let mut cols: Vec<Vec<f64>> = std::iter::once(&panel.y)
        .chain(panel.x.iter())
        .map(|c| rows.iter().map(|&i| c[i]).collect())
        .collect();
    let stats: Vec<(usize, f64)> = cols
        .par_iter_mut()
        .map(|c| demean_column(&dims, c, opts))
        .collect::<Result<_>>()?;
    let iterations = stats.iter().map(|s| s.0).max().unwrap_or(0);
    let max_delta = stats.iter().map(|s| s.1).fold(0.0, f64::max);
    let y = cols.remove(0);
    Ok(Demeaned {
        y,
        x: cols,
        dropped_singletons: n - rows.len(),
        rows,
        iterations,
        max_delta,
        fe_levels,
        k_absorbed,
    })
}

/// Least-squares solution on already-demeaned columns.
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Indices of the columns kept after collinearity pruning.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub beta: Vec<f64>,
    /// `(X'X)^-1` over the kept columns.
    pub xtx_inv: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

/// Relative pivot below which a column counts as collinear with earlier ones.
pub const COLLINEAR_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// OLS with order-preserving collinearity pruning: columns are scaled to unit
/// norm and passed through a sequential Cholesky; any column whose pivot falls
/// below `1e-10` of the largest accepted pivot is dropped.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let p = x.len();
    let norms: Vec<f64> = x.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let g = if norms[i] > 0.0 && norms[j] > 0.0 {
                dot(&x[i], &x[j]) / (norms[i] * norms[j])
            } else {
                0.0
            };
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }

    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    let mut chol: Vec<Vec<f64>> = Vec::new(); // rows of L over kept columns
    let mut max_pivot: f64 = 0.0;
    for j in 0..p {
        if norms[j] == 0.0 {
            dropped.push(j);
            continue;
        }
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &k) in kept.iter().enumerate() {
            let s: f64 = (0..a).map(|b| row[b] * chol[a][b]).sum();
            row.push((gram[(j, k)] - s) / chol[a][a]);
        }
        let pivot = gram[(j, j)] - row.iter().map(|v| v * v).sum::<f64>();
        if pivot <= COLLINEAR_TOL * max_pivot.max(1.0) {
            dropped.push(j);
            continue;
        }
        max_pivot = max_pivot.max(pivot);
        row.push(pivot.sqrt());
        chol.push(row);
        kept.push(j);
    }
    if p > 0 && kept.is_empty() {
        return Err(Error::AllCollinear((0..p).map(|j| j.to_string()).collect()));
    }

    let q = kept.len();
    let mut l = DMatrix::<f64>::zeros(q, q);
    for (a, row) in chol.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            l[(a, b)] = *v;
        }
    }
    // (S'S)^-1 = L^-T L^-1 for the scaled columns, then undo the scaling.
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("triangular factor is singular".into()))?;
    let scaled_inv = l_inv.transpose() * &l_inv;
    let mut xtx_inv = DMatrix::<f64>::zeros(q, q);
    for a in 0..q {
        for b in 0..q {
            xtx_inv[(a, b)] = scaled_inv[(a, b)] / (norms[kept[a]] * norms[kept[b]]);
        }
    }
    let xty = DVector::from_iterator(q, kept.iter().map(|&j| dot(&x[j], y)));
    let beta_v = &xtx_inv * xty;
    let beta: Vec<f64> = beta_v.iter().copied().collect();
    let mut residuals = y.to_vec();
    for (b, &j) in beta.iter().zip(&kept) {
        for (r, v) in residuals.iter_mut().zip(&x[j]) {
            *r -= b * v;
        }
    }
    Ok(OlsFit {
        kept,
        dropped,
        beta,
        xtx_inv,
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VcovKind {
    /// Plain Liang–Zeger sandwich.
    Cr0,
    /// Sandwich scaled by `G/(G-1) * (N-1)/(N-K)`.
    #[default]
    Cr1,
}

/// Per-cluster score sums `X_g' e_g`, one row per cluster in id order.
fn cluster_scores(x: &[&[f64]], residuals: &[f64], cluster_ids: &[u32]) -> (Vec<Vec<f64>>, usize) {
    let mut remap: HashMap<u32, usize> = HashMap::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for (i, &c) in cluster_ids.iter().enumerate() {
        let next = remap.len();
        let g = *remap.entry(c).or_insert(next);
        if g == scores.len() {
            scores.push(vec![0.0; x.len()]);
        }
        let e = residuals[i];
        for (s, col) in scores[g].iter_mut().zip(x) {
            *s += col[i] * e;
        }
    }
    let g = scores.len();
    (scores, g)
}

/// Cluster-robust sandwich covariance for slope coefficients computed on
/// demeaned regressors. `k_total` counts slopes plus absorbed fixed-effect
/// degrees of freedom.
pub fn cluster_robust_vcov(
    x: &[&[f64]],
    residuals: &[f64],
    cluster_ids: &[u32],
    xtx_inv: &DMatrix<f64>,
    k_total: usize,
    kind: VcovKind,
) -> Result<DMatrix<f64>> {
    let n = residuals.len();
    let (scores, g) = cluster_scores(x, residuals, cluster_ids);
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let p = x.len();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for s in &scores {
        for a in 0..p {
            for b in 0..=a {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            meat[(b, a)] = meat[(a, b)];
        }
    }
    let scale = match kind {
        VcovKind::Cr0 => 1.0,
        VcovKind::Cr1 => {
            if n <= k_total {
                return Err(Error::Numerical(format!("no residual degrees of freedom (N = {n}, K = {k_total})")));
            }
            (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k_total as f64))
        }
    };
    let mut v = xtx_inv * meat * xtx_inv * scale;
    for a in 0..p {
        for b in 0..a {
            let m = 0.5 * (v[(a, b)] + v[(b, a)]);
            v[(a, b)] = m;
            v[(b, a)] = m;
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub demean: DemeanOptions,
    pub vcov: VcovKind,
}

/// Coefficients and cluster-robust covariance from a fixed-effects fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub dropped_singletons: usize,
    pub dropped_collinear: Vec<String>,
    pub fe_levels: Vec<usize>,
    pub k_absorbed: usize,
    pub converged: bool,
    pub iterations: usize,
    pub vcov_kind: VcovKind,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl FitResult {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.beta[i])
    }

    pub fn std_err(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.se[i])
    }

    pub fn cov(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.vcov[self.index(a)?][self.index(b)?])
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let p = self.beta.len();
        DMatrix::from_fn(p, p, |i, j| self.vcov[i][j])
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Demean, solve, and compute the clustered covariance.
pub fn fit(panel: &Panel, opts: &FitOptions) -> Result<FitResult> {
    let dm = demean_hdfe(panel, &opts.demean)?;
    let sol = ols(&dm.x, &dm.y)?;
    let xk: Vec<&[f64]> = sol.kept.iter().map(|&j| dm.x[j].as_slice()).collect();
    let clusters: Vec<u32> = dm.rows.iter().map(|&i| panel.cluster[i]).collect();
    let k_total = sol.kept.len() + dm.k_absorbed;
    let v = cluster_robust_vcov(&xk, &sol.residuals, &clusters, &sol.xtx_inv, k_total, opts.vcov)?;
    let n_clusters = {
        let mut c = clusters.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    if !sol.dropped.is_empty() {
        log::warn!(
            "dropped collinear regressors: {:?}",
            sol.dropped.iter().map(|&j| panel.names[j].as_str()).collect::<Vec<_>>()
        );
    }
    Ok(FitResult {
        names: sol.kept.iter().map(|&j| panel.names[j].clone()).collect(),
        se: (0..sol.kept.len()).map(|i| v[(i, i)].max(0.0).sqrt()).collect(),
        beta: sol.beta,
        vcov: to_rows(&v),
        n_obs: dm.rows.len(),
        n_clusters,
        dropped_singletons: dm.dropped_singletons,
        dropped_collinear: sol.dropped.iter().map(|&j| panel.names[j].clone()).collect(),
        fe_levels: dm.fe_levels,
        k_absorbed: dm.k_absorbed,
        converged: true,
        iterations: dm.iterations,
        vcov_kind: opts.vcov,
        residuals: sol.residuals,
    })
}

/// Row limit for the dense dummy-variable oracle.
pub const BRUTE_FORCE_MAX_ROWS: usize = 2000;

/// Reference fit: OLS on `[X | one indicator per fixed-effect level]`.
///
/// The indicator columns are orthonormalized one at a time (Gram-Schmidt,
/// two passes), dropping any that are already spanned, and the slope columns
/// are residualized against that basis. The CR1 sandwich is then built term
/// by term. Only for small panels.
pub fn brute_force_fit(panel: &Panel) -> Result<FitResult> {
    let n0 = panel.n_rows();
    if n0 > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::TooLarge {
            rows: n0,
            limit: BRUTE_FORCE_MAX_ROWS,
        });
    }
    // naive singleton pruning
    let mut alive = vec![true; n0];
    loop {
        let mut changed = false;
        for d in &panel.fe {
            for i in 0..n0 {
                if alive[i] && (0..n0).filter(|&j| alive[j] && d.ids[j] == d.ids[i]).count() == 1 {
                    alive[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let rows: Vec<usize> = (0..n0).filter(|&i| alive[i]).collect();
    let n = rows.len();
    let p = panel.x.len();

    let mut dummy_cols: Vec<Vec<f64>> = Vec::new();
    if panel.fe.is_empty() {
        dummy_cols.push(vec![1.0; n]);
    }
    let mut fe_levels = Vec::new();
    for d in &panel.fe {
        let mut levels: Vec<u32> = rows.iter().map(|&i| d.ids[i]).collect();
        levels.sort_unstable();
        levels.dedup();
        fe_levels.push(levels.len());
        for l in levels {
            dummy_cols.push(rows.iter().map(|&i| if d.ids[i] == l { 1.0 } else { 0.0 }).collect());
        }
    }

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let residualize = |v: &mut [f64], basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for q in basis {
                let c = dot(q, v);
                for (x, qi) in v.iter_mut().zip(q) {
                    *x -= c * qi;
                }
            }
        }
    };
    const DEPENDENT: f64 = 1e-9;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in dummy_cols {
        let norm0 = dot(&v, &v).sqrt();
        residualize(&mut v, &basis);
        let norm = dot(&v, &v).sqrt();
        if norm > DEPENDENT * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let rank_d = basis.len();

    let mut xt: Vec<Vec<f64>> = Vec::with_capacity(p);
    for col in &panel.x {
        let mut v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        let norm0 = dot(&v, &v).sqrt();
        residualize(&mut v, &basis);
        if !(dot(&v, &v).sqrt() > DEPENDENT * norm0) {
            return Err(Error::Numerical("oracle design has collinear slope columns".into()));
        }
        xt.push(v);
    }
    let mut yt: Vec<f64> = rows.iter().map(|&i| panel.y[i]).collect();
    residualize(&mut yt, &basis);
    let rank = rank_d + p;

    let xtx = DMatrix::from_fn(p, p, |a, b| dot(&xt[a], &xt[b]));
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::Numerical("oracle normal matrix is singular".into()))?;
    // influence rows: (X'X)^-1 X'
    let infl = DMatrix::from_fn(p, n, |a, i| (0..p).map(|b| inv[(a, b)] * xt[b][i]).sum::<f64>());
    let b = &infl * DVector::from_column_slice(&yt);
    let resid: Vec<f64> = (0..n).map(|i| yt[i] - (0..p).map(|a| b[a] * xt[a][i]).sum::<f64>()).collect();

    let clusters: Vec<u32> = rows.iter().map(|&i| panel.cluster[i]).collect();
    let mut uniq = clusters.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let g = uniq.len();
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for c in &uniq {
        let mut s = DVector::<f64>::zeros(p);
        for (i, &ci) in clusters.iter().enumerate() {
            if ci == *c {
                for a in 0..p {
                    s[a] += infl[(a, i)] * resid[i];
                }
            }
        }
        meat += &s * s.transpose();
    }
    let scale = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - rank as f64));
    let v = meat * scale;
    Ok(FitResult {
        names: panel.names.clone(),
        beta: b.iter().copied().collect(),
        se: (0..p).map(|i| v[(i, i)].max(0.0).sqrt()).collect(),
        vcov: to_rows(&v),
        n_obs: n,
        n_clusters: g,
        dropped_singletons: n0 - n,
        dropped_collinear: Vec::new(),
        fe_levels,
        k_absorbed: rank_d,
        converged: true,
        iterations: 0,
        vcov_kind: VcovKind::Cr1,
        residuals: resid,
    })
}

#[derive(Debug, Serialize)]
struct FitJson<'a> {
    coefficients: Vec<CoefJson<'a>>,
    vcov: &'a [Vec<f64>],
    n_obs: usize,
    n_clusters: usize,
    dropped_singletons: usize,
    dropped_collinear: &'a [String],
    fe_levels: &'a [usize],
    k_absorbed: usize,
    vcov_kind: VcovKind,
    convergence: ConvergenceJson,
}

#[derive(Debug, Serialize)]
struct CoefJson<'a> {
    name: &'a str,
    estimate: f64,
    std_error: f64,
}

#[derive(Debug, Serialize)]
struct ConvergenceJson {
    converged: bool,
    iterations: usize,
}

/// `fit.json` document.
pub fn fit_to_json(fit: &FitResult) -> Result<String> {
    let doc = FitJson {
        coefficients: fit
            .names
            .iter()
            .zip(&fit.beta)
            .zip(&fit.se)
            .map(|((name, &estimate), &std_error)| CoefJson { name, estimate, std_error })
            .collect(),
        vcov: &fit.vcov,
        n_obs: fit.n_obs,
        n_clusters: fit.n_clusters,
        dropped_singletons: fit.dropped_singletons,
        dropped_collinear: &fit.dropped_collinear,
        fe_levels: &fit.fe_levels,
        k_absorbed: fit.k_absorbed,
        vcov_kind: fit.vcov_kind,
        convergence: ConvergenceJson {
            converged: fit.converged,
            iterations: fit.iterations,
        },
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

#[derive(Debug, Deserialize)]
struct FitJsonIn {
    coefficients: Vec<CoefJsonIn>,
    vcov: Vec<Vec<f64>>,
    n_obs: usize,
    n_clusters: usize,
    dropped_singletons: usize,
    #[serde(default)]
    dropped_collinear: Vec<String>,
    #[serde(default)]
    fe_levels: Vec<usize>,
    #[serde(default)]
    k_absorbed: usize,
    #[serde(default)]
    vcov_kind: VcovKind,
    convergence: ConvergenceIn,
}

#[derive(Debug, Deserialize)]
struct CoefJsonIn {
    name: String,
    estimate: f64,
    std_error: f64,
}

#[derive(Debug, Deserialize)]
struct ConvergenceIn {
    converged: bool,
    iterations: usize,
}

pub fn fit_from_json(s: &str) -> Result<FitResult> {
    let d: FitJsonIn = serde_json::from_str(s)?;
    Ok(FitResult {
        names: d.coefficients.iter().map(|c| c.name.clone()).collect(),
        beta: d.coefficients.iter().map(|c| c.estimate).collect(),
        se: d.coefficients.iter().map(|c| c.std_error).collect(),
        vcov: d.vcov,
        n_obs: d.n_obs,
        n_clusters: d.n_clusters,
        dropped_singletons: d.dropped_singletons,
        dropped_collinear: d.dropped_collinear,
        fe_levels: d.fe_levels,
        k_absorbed: d.k_absorbed,
        converged: d.convergence.converged,
        iterations: d.convergence.iterations,
        vcov_kind: d.vcov_kind,
        residuals: Vec::new(),
    })
}

/// Read `panel.csv`: `y`, regressors `x_*` (any other non-reserved column),
/// `fe_user`, `fe_date`, `fe_adm1month`, `cluster`.
pub fn read_panel_csv<R: Read>(reader: R, source: &str) -> Result<Panel> {
    const FE: [&str; 3] = ["fe_user", "fe_date", "fe_adm1month"];
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| crate::io::schema_err(source, &e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Schema {
        path: source.to_string(),
        line: 1,
        message: format!("missing column `{name}`"),
    };
    let y_col = find("y").ok_or_else(|| missing("y"))?;
    let cl_col = find("cluster").ok_or_else(|| missing("cluster"))?;
    let fe_cols: Vec<(usize, &str)> = FE.iter().filter_map(|f| find(f).map(|i| (i, *f))).collect();
    let x_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != y_col && i != cl_col && !fe_cols.iter().any(|(c, _)| *c == i))
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| crate::io::schema_err(source, &e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Schema {
                path: source.to_string(),
                line,
                message: format!("column `{}`: {e}", &headers[i]),
            })
        };
        rows.push(PanelRow {
            y: num(y_col)?,
            x: x_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            fe_ids: fe_cols.iter().map(|(i, _)| rec[*i].to_string()).collect(),
            cluster_id: rec[cl_col].to_string(),
        });
    }
    Panel::from_rows(
        x_cols.iter().map(|&i| headers[i].to_string()).collect(),
        fe_cols.iter().map(|(_, n)| n.to_string()).collect(),
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(x: Vec<f64>, groups: Vec<u32>) -> Panel {
        let n = x.len();
        Panel::new(
            x.clone(),
            vec![x],
            vec!["x".into()],
            vec![FeDim { name: "g".into(), ids: groups }],
            (0..n as u32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_group_subtracts_mean() {
        let dm = demean_hdfe(&toy(vec![1.0, 2.0, 3.0], vec![0, 0, 0]), &DemeanOptions::default()).unwrap();
        assert_eq!(dm.x[0], vec![-1.0, 0.0, 1.0]);
        assert_eq!(dm.k_absorbed, 1);
    }

    #[test]
    fn saturated_dimension_gives_zero() {
        // every row its own group would be all singletons; pair rows instead and
        // use identical values within pairs
        let p = toy(vec![1.0, 1.0, 5.0, 5.0], vec![0, 0, 1, 1]);
        let dm = demean_hdfe(&p, &DemeanOptions::default()).unwrap();
        assert!(dm.x[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn singletons_pruned_to_fixed_point() {
        // row 3 is alone in dim a; after dropping it, row 2 is alone in dim b
        let fe = vec![
            FeDim { name: "a".into(), ids: vec![0, 0, 1, 2] },
            FeDim { name: "b".into(), ids: vec![0, 0, 1, 1] },
        ];
        assert_eq!(prune_singletons(&fe, 4), vec![0, 1]);
    }

    #[test]
    fn ols_exact_and_duplicate_column() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let f = ols(&[x.clone()], &y).unwrap();
        assert!((f.beta[0] - 2.0).abs() < 1e-14);

        let z: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let y2: Vec<f64> = x.iter().zip(&z).map(|(a, b)| 1.5 * a - b).collect();
        let base = ols(&[x.clone(), z.clone()], &y2).unwrap();
        let dup = ols(&[x.clone(), z.clone(), x.clone()], &y2).unwrap();
        assert_eq!(dup.kept, vec![0, 1]);
        assert_eq!(dup.dropped, vec![2]);
        for (a, b) in base.beta.iter().zip(&dup.beta) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(ols(&[vec![0.0; 10]], &y), Err(Error::AllCollinear(_))));
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let x: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.3 * x[0][i] - 1.2 * x[1][i] + 0.7 * x[2][i] + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let xm = DMatrix::from_fn(n, 3, |i, j| x[j][i]);
        let yv = DVector::from_vec(y.clone());
        let oracle = (xm.transpose() * &xm).lu().solve(&(xm.transpose() * yv)).unwrap();
        let f = ols(&x, &y).unwrap();
        for j in 0..3 {
            assert!((f.beta[j] - oracle[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_residuals_give_zero_vcov() {
        let x = vec![1.0, -1.0, 2.0, -2.0];
        let inv = DMatrix::from_element(1, 1, 0.1);
        let v = cluster_robust_vcov(&[&x], &[0.0; 4], &[0, 0, 1, 1], &inv, 1, VcovKind::Cr1).unwrap();
        assert_eq!(v[(0, 0)], 0.0);
        assert!(matches!(
            cluster_robust_vcov(&[&x], &[1.0; 4], &[0; 4], &inv, 1, VcovKind::Cr1),
            Err(Error::TooFewClusters(1))
        ));
    }

    #[test]
    fn sandwich_matches_hand_computation() {
        // 3 clusters, 2 regressors
        let x1 = [1.0, 2.0, -1.0, 0.5, -2.0, 0.0];
        let x2 = [0.5, -1.0, 1.0, 2.0, 0.0, -1.5];
        let e = [0.3, -0.2, 0.1, 0.4, -0.5, 0.2];
        let cl = [0u32, 0, 1, 1, 2, 2];
        let xm = DMatrix::from_fn(6, 2, |i, j| if j == 0 { x1[i] } else { x2[i] });
        let inv = (xm.transpose() * &xm).try_inverse().unwrap();
        let v = cluster_robust_vcov(&[&x1, &x2], &e, &cl, &inv, 2, VcovKind::Cr1).unwrap();

        let mut meat = DMatrix::<f64>::zeros(2, 2);
        for g in 0..3 {
            let s0: f64 = (0..6).filter(|&i| cl[i] == g).map(|i| x1[i] * e[i]).sum();
            let s1: f64 = (0..6).filter(|&i| cl[i] == g).map(|i| x2[i] * e[i]).sum();
            meat[(0, 0)] += s0 * s0;
            meat[(0, 1)] += s0 * s1;
            meat[(1, 0)] += s1 * s0;
            meat[(1, 1)] += s1 * s1;
        }
        let expected = &inv * meat * &inv * (3.0 / 2.0) * (5.0 / 4.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((v[(i, j)] - expected[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singleton_clusters_reduce_to_hc1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let xtx: f64 = x.iter().map(|v| v * v).sum();
        let inv = DMatrix::from_element(1, 1, 1.0 / xtx);
        let cl: Vec<u32> = (0..n as u32).collect();
        let v = cluster_robust_vcov(&[&x], &e, &cl, &inv, 1, VcovKind::Cr1).unwrap()[(0, 0)];
        let hc0: f64 = x.iter().zip(&e).map(|(a, b)| a * a * b * b).sum::<f64>() / (xtx * xtx);
        let nf = n as f64;
        let hc1 = hc0 * nf / (nf - 1.0);
        assert!((v - hc1).abs() < 1e-12 * hc1);
    }

    fn random_panel(seed: u64, n: usize, levels: &[u32], clusters: u32) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fe: Vec<FeDim> = levels
            .iter()
            .enumerate()
            .map(|(d, &l)| FeDim {
                name: format!("fe{d}"),
                ids: (0..n).map(|_| rng.random_range(0..l)).collect(),
            })
            .collect();
        let x: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|i| rng.random::<f64>() * 4.0 + fe[0].ids[i] as f64 * 0.3).collect())
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.0 - 0.3 * x[0][i] + 0.8 * x[1][i] + fe.iter().map(|d| d.ids[i] as f64 * 0.7).sum::<f64>() + rng.random::<f64>())
            .collect();
        let cluster = (0..n).map(|_| rng.random_range(0..clusters)).collect();
        Panel::new(y, x, vec!["a".into(), "b".into()], fe, cluster).unwrap()
    }

    #[test]
    fn crossed_toy_matches_dummy_regression() {
        // 6 rows, 2 crossed dimensions: demeaned x equals the residual of x on all dummies
        let x = vec![1.0, 4.0, 2.0, 7.0, 3.0, 5.0];
        let a = vec![0, 0, 1, 1, 2, 2];
        let b = vec![0, 1, 0, 1, 0, 1];
        let p = Panel::new(
            x.clone(),
            vec![x.clone()],
            vec!["x".into()],
            vec![FeDim { name: "a".into(), ids: a.clone() }, FeDim { name: "b".into(), ids: b.clone() }],
            vec![0, 1, 2, 3, 4, 5],
        )
        .unwrap();
        let dm = demean_hdfe(&p, &DemeanOptions::default()).unwrap();
        // full-rank basis: three `a` indicators plus `b == 1`
        let d = DMatrix::from_fn(6, 4, |i, j| if j < 3 { (a[i] == j as u32) as u8 as f64 } else { b[i] as f64 });
        let xv = DVector::from_vec(x);
        let coef = (d.transpose() * &d).cholesky().unwrap().solve(&(d.transpose() * &xv));
        let resid = xv - d * coef;
        for i in 0..6 {
            assert!((dm.x[0][i] - resid[i]).abs() < 1e-8);
        }
        assert_eq!(dm.k_absorbed, 4);
    }

    #[test]
    fn fit_agrees_with_oracle_on_random_panel() {
        let p = random_panel(42, 300, &[25, 15, 8], 12);
        let a = fit(&p, &FitOptions::default()).unwrap();
        let b = brute_force_fit(&p).unwrap();
        assert_eq!(a.k_absorbed, b.k_absorbed);
        assert_eq!(a.n_obs, b.n_obs);
        for j in 0..2 {
            assert!((a.beta[j] - b.beta[j]).abs() < 1e-8, "{} vs {}", a.beta[j], b.beta[j]);
            for k in 0..2 {
                let rel = (a.vcov[j][k] - b.vcov[j][k]).abs() / b.vcov[j][k].abs();
                assert!(rel < 1e-6, "vcov rel diff {rel}");
            }
        }
    }

    #[test]
    fn intercept_only_panel() {
        let y = vec![1.0, 3.0, 10.0, 14.0];
        let p = Panel::new(y, vec![], vec![], vec![FeDim { name: "g".into(), ids: vec![0, 0, 1, 1] }], vec![0, 0, 1, 1]).unwrap();
        let b = brute_force_fit(&p).unwrap();
        assert!(b.beta.is_empty());
        let expect = [-1.0, 1.0, -2.0, 2.0];
        for (r, e) in b.residuals.iter().zip(expect) {
            assert!((r - e).abs() < 1e-12);
        }
        let a = fit(&p, &FitOptions::default()).unwrap();
        assert!(a.beta.is_empty());
        assert_eq!(a.residuals, expect.to_vec());
    }

    #[test]
    fn oracle_size_guard() {
        let p = random_panel(1, 2001, &[10], 5);
        assert!(matches!(brute_force_fit(&p), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn non_convergence_reports_delta() {
        let p = random_panel(3, 300, &[40, 30, 9], 12);
        let opts = DemeanOptions {
            tol: 1e-14,
            max_iter: 2,
            accelerate: false,
        };
        match demean_hdfe(&p, &opts) {
            Err(Error::NotConverged { iterations, last_delta }) => {
                assert_eq!(iterations, 2);
                assert!(last_delta > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fit_json_roundtrip() {
        let p = random_panel(9, 200, &[20, 10], 8);
        let f = fit(&p, &FitOptions::default()).unwrap();
        let back = fit_from_json(&fit_to_json(&f).unwrap()).unwrap();
        assert_eq!(back.beta, f.beta);
        assert_eq!(back.vcov, f.vcov);
        assert_eq!(back.names, f.names);
    }

    #[test]
    fn panel_csv_columns() {
        let csv = "y,x_1,x_2,fe_user,fe_date,fe_adm1month,cluster\n\
                   1,0.5,1,u1,d1,a-2016-01,a\n\
                   2,0.7,0,u1,d2,a-2016-01,a\n\
                   3,0.1,1,u2,d1,b-2016-01,b\n";
        let p = read_panel_csv(csv.as_bytes(), "panel.csv").unwrap();
        assert_eq!(p.names, vec!["x_1", "x_2"]);
        assert_eq!(p.fe.len(), 3);
        assert_eq!(p.fe[0].ids, vec![0, 0, 1]);
        assert_eq!(p.cluster, vec![0, 0, 1]);
        let bad = "y,x_1,cluster\n1,zz,a\n";
        match read_panel_csv(bad.as_bytes(), "panel.csv") {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
