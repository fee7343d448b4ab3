use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::linalg::{inverse_spd, solve_spd_ridge};
use super::{
    CalibrationResult, CalibrationSpec, Constraint, Covariance, CovarianceMethod, GroupDist, ItemEstimate,
    LogitNormalPrior, NormalDist, ParamKey, ParamKind, PosteriorMasses,
};
use crate::data::ResponseMatrix;
use crate::error::Result;
use crate::irt::{logistic, logit, ItemParams, Model, QuadratureGrid};

const CHUNK: usize = 256;
const A_BOUNDS: (f64, f64) = (0.05, 10.0);
const B_BOUNDS: (f64, f64) = (-10.0, 10.0);
const GAMMA_BOUNDS: (f64, f64) = (-9.0, 1.5);
const P_FLOOR: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;
const START_C: f64 = 0.15;

#[derive(Clone, Debug)]
struct ItemState {
    model: Model,
    shared: bool,
    a: Vec<f64>,
    b: Vec<f64>,
    gamma: f64,
    excluded: bool,
}

impl ItemState {
    fn slot(&self, g: usize) -> usize {
        if self.shared {
            0
        } else {
            g
        }
    }

    fn n_slots(&self) -> usize {
        self.a.len()
    }

    fn c(&self) -> f64 {
        match self.model {
            Model::TwoPL => 0.0,
            Model::ThreePL => logistic(self.gamma),
        }
    }

    fn n_params(&self) -> usize {
        2 * self.n_slots() + usize::from(self.model == Model::ThreePL)
    }

    fn pack(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_params());
        for s in 0..self.n_slots() {
            x.push(self.a[s]);
            x.push(self.b[s]);
        }
        if self.model == Model::ThreePL {
            x.push(self.gamma);
        }
        x
    }

    fn unpack(&mut self, x: &[f64]) {
        for s in 0..self.n_slots() {
            self.a[s] = x[2 * s];
            self.b[s] = x[2 * s + 1];
        }
        if self.model == Model::ThreePL {
            self.gamma = x[2 * self.n_slots()];
        }
    }

    fn params(&self, g: usize, scaling: f64) -> ItemParams {
        let s = self.slot(g);
        ItemParams {
            a: self.a[s],
            b: self.b[s],
            c: self.c(),
            model: self.model,
            scaling,
        }
    }
}

fn clamp_params(x: &mut [f64], model: Model) {
    let n_ab = if model == Model::ThreePL { x.len() - 1 } else { x.len() };
    for (i, v) in x[..n_ab].iter_mut().enumerate() {
        let (lo, hi) = if i % 2 == 0 { A_BOUNDS } else { B_BOUNDS };
        *v = v.clamp(lo, hi);
    }
    if model == Model::ThreePL {
        let last = x.len() - 1;
        x[last] = x[last].clamp(GAMMA_BOUNDS.0, GAMMA_BOUNDS.1);
    }
}

/// Probability and its derivatives with respect to `(a, b, gamma)`.
#[inline]
fn prob_and_grad(a: f64, b: f64, gamma: Option<f64>, d: f64, theta: f64) -> (f64, [f64; 3]) {
    let s = logistic(d * a * (theta - b));
    let c = gamma.map_or(0.0, logistic);
    let p = c + (1.0 - c) * s;
    let ds = (1.0 - c) * s * (1.0 - s);
    let dg = if gamma.is_some() { c * (1.0 - c) * (1.0 - s) } else { 0.0 };
    (p, [ds * d * (theta - b), -ds * d * a, dg])
}

fn log_prior(gamma: f64, prior: &LogitNormalPrior) -> f64 {
    let z = (gamma - prior.mean) / prior.sd;
    -0.5 * z * z
}

fn penalty(items: &[ItemState], prior: Option<&LogitNormalPrior>) -> f64 {
    match prior {
        None => 0.0,
        Some(pr) => items
            .iter()
            .filter(|i| !i.excluded && i.model == Model::ThreePL)
            .map(|i| log_prior(i.gamma, pr))
            .sum(),
    }
}

/// Log prior weights of a discretized normal on `nodes`.
fn log_normal_weights(nodes: &[f64], mu: f64, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = nodes
        .iter()
        .map(|t| {
            let z = (t - mu) / sigma;
            -0.5 * z * z
        })
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + raw.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    raw.into_iter().map(|l| l - lse).collect()
}

struct Tables {
    /// `[g][j][q]` flattened: log P and log(1 - P).
    log_p: Vec<f64>,
    log_q: Vec<f64>,
    /// `[g][q]` log prior weights.
    log_w: Vec<f64>,
}

fn build_tables(
    items: &[ItemState],
    dists: &[NormalDist],
    nodes: &[f64],
    scaling: f64,
) -> Tables {
    let (g_n, k, q_n) = (dists.len(), items.len(), nodes.len());
    let mut log_p = vec![0.0; g_n * k * q_n];
    let mut log_q = vec![0.0; g_n * k * q_n];
    for g in 0..g_n {
        for (j, item) in items.iter().enumerate() {
            if item.excluded {
                continue;
            }
            let par = item.params(g, scaling);
            let base = (g * k + j) * q_n;
            for (q, &t) in nodes.iter().enumerate() {
                let p = par.prob(t).clamp(P_FLOOR, 1.0 - P_FLOOR);
                log_p[base + q] = p.ln();
                log_q[base + q] = (1.0 - p).ln();
            }
        }
    }
    let log_w = dists
        .iter()
        .flat_map(|d| log_normal_weights(nodes, d.mu, d.sigma))
        .collect();
    Tables { log_p, log_q, log_w }
}

struct EStep {
    loglik: f64,
    posterior: Vec<f64>,
    /// Expected number of responses / correct responses, `[g][j][q]`.
    n: Vec<f64>,
    r: Vec<f64>,
    /// Aggregated posterior mass, `[g][q]`.
    mass: Vec<f64>,
}

struct Partial {
    loglik: f64,
    n: Vec<f64>,
    r: Vec<f64>,
    mass: Vec<f64>,
}

fn e_step(data: &ResponseMatrix, items: &[ItemState], tables: &Tables, q_n: usize) -> EStep {
    let (n_p, k, g_n) = (data.n_persons(), data.n_items(), data.n_groups());
    let mut posterior = vec![0.0; n_p * q_n];
    let partials: Vec<Partial> = posterior
        .par_chunks_mut(CHUNK * q_n)
        .enumerate()
        .map(|(ci, post_chunk)| {
            let mut part = Partial {
                loglik: 0.0,
                n: vec![0.0; g_n * k * q_n],
                r: vec![0.0; g_n * k * q_n],
                mass: vec![0.0; g_n * q_n],
            };
            let mut acc = vec![0.0; q_n];
            for (off, post) in post_chunk.chunks_mut(q_n).enumerate() {
                let p = ci * CHUNK + off;
                let g = data.group(p);
                let row = data.row(p);
                acc.copy_from_slice(&tables.log_w[g * q_n..(g + 1) * q_n]);
                for (j, cell) in row.iter().enumerate() {
                    if items[j].excluded {
                        continue;
                    }
                    let base = (g * k + j) * q_n;
                    let t = match cell {
                        Some(true) => &tables.log_p[base..base + q_n],
                        Some(false) => &tables.log_q[base..base + q_n],
                        None => continue,
                    };
                    for (a, v) in acc.iter_mut().zip(t) {
                        *a += v;
                    }
                }
                let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, a) in post.iter_mut().zip(&acc) {
                    *o = (a - max).exp();
                    sum += *o;
                }
                part.loglik += max + sum.ln();
                for o in post.iter_mut() {
                    *o /= sum;
                }
                let mass = &mut part.mass[g * q_n..(g + 1) * q_n];
                for (m, o) in mass.iter_mut().zip(post.iter()) {
                    *m += o;
                }
                for (j, cell) in row.iter().enumerate() {
                    let Some(x) = cell else { continue };
                    if items[j].excluded {
                        continue;
                    }
                    let base = (g * k + j) * q_n;
                    for (nq, o) in part.n[base..base + q_n].iter_mut().zip(post.iter()) {
                        *nq += o;
                    }
                    if *x {
                        for (rq, o) in part.r[base..base + q_n].iter_mut().zip(post.iter()) {
                            *rq += o;
                        }
                    }
                }
            }
            part
        })
        .collect();

    let mut out = EStep {
        loglik: 0.0,
        posterior,
        n: vec![0.0; g_n * k * q_n],
        r: vec![0.0; g_n * k * q_n],
        mass: vec![0.0; g_n * q_n],
    };
    for part in partials {
        out.loglik += part.loglik;
        for (o, v) in out.n.iter_mut().zip(&part.n) {
            *o += v;
        }
        for (o, v) in out.r.iter_mut().zip(&part.r) {
            *o += v;
        }
        for (o, v) in out.mass.iter_mut().zip(&part.mass) {
            *o += v;
        }
    }
    out
}

/// Expected counts of one item, one entry per parameter slot.
struct ItemCounts {
    n: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

fn item_counts(estep: &EStep, item: &ItemState, j: usize, k: usize, g_n: usize, q_n: usize) -> ItemCounts {
    let slots = item.n_slots();
    let mut n = vec![vec![0.0; q_n]; slots];
    let mut r = vec![vec![0.0; q_n]; slots];
    for g in 0..g_n {
        let s = item.slot(g);
        let base = (g * k + j) * q_n;
        for q in 0..q_n {
            n[s][q] += estep.n[base + q];
            r[s][q] += estep.r[base + q];
        }
    }
    ItemCounts { n, r }
}

struct ItemProblem<'a> {
    counts: &'a ItemCounts,
    nodes: &'a [f64],
    model: Model,
    scaling: f64,
    prior: Option<&'a LogitNormalPrior>,
}

impl ItemProblem<'_> {
    fn gamma(&self, x: &[f64]) -> Option<f64> {
        (self.model == Model::ThreePL).then(|| x[x.len() - 1])
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let gamma = self.gamma(x);
        let mut total = 0.0;
        for s in 0..self.counts.n.len() {
            for (q, &t) in self.nodes.iter().enumerate() {
                let n = self.counts.n[s][q];
                if n == 0.0 {
                    continue;
                }
                let r = self.counts.r[s][q];
                let (p, _) = prob_and_grad(x[2 * s], x[2 * s + 1], gamma, self.scaling, t);
                let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
                total += r * p.ln() + (n - r) * (1.0 - p).ln();
            }
        }
        if let (Some(g), Some(pr)) = (gamma, self.prior) {
            total += log_prior(g, pr);
        }
        total
    }

    fn score_and_information(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let dim = x.len();
        let gamma = self.gamma(x);
        let mut grad = DVector::zeros(dim);
        let mut info = DMatrix::zeros(dim, dim);
        let mut idx = [0usize; 3];
        for s in 0..self.counts.n.len() {
            idx[0] = 2 * s;
            idx[1] = 2 * s + 1;
            idx[2] = dim - 1;
            let used = if gamma.is_some() { 3 } else { 2 };
            for (q, &t) in self.nodes.iter().enumerate() {
                let n = self.counts.n[s][q];
                if n == 0.0 {
                    continue;
                }
                let r = self.counts.r[s][q];
                let (p, dp) = prob_and_grad(x[2 * s], x[2 * s + 1], gamma, self.scaling, t);
                let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
                let v = p * (1.0 - p);
                let resid = (r - n * p) / v;
                for u in 0..used {
                    grad[idx[u]] += resid * dp[u];
                    for w in 0..used {
                        info[(idx[u], idx[w])] += n * dp[u] * dp[w] / v;
                    }
                }
            }
        }
        if let (Some(g), Some(pr)) = (gamma, self.prior) {
            grad[dim - 1] -= (g - pr.mean) / (pr.sd * pr.sd);
            info[(dim - 1, dim - 1)] += 1.0 / (pr.sd * pr.sd);
        }
        (grad, info)
    }
}

/// Fisher scoring with step-halving; never lowers the item objective.
fn maximize_item(problem: &ItemProblem<'_>, x: &mut Vec<f64>, iterations: usize, max_halvings: usize) {
    let mut current = problem.objective(x);
    for _ in 0..iterations {
        let (grad, info) = problem.score_and_information(x);
        let Some(step) = solve_spd_ridge(&info, &grad) else { return };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..=max_halvings {
            let mut cand: Vec<f64> = x.iter().zip(step.iter()).map(|(v, d)| v + t * d).collect();
            clamp_params(&mut cand, problem.model);
            let val = problem.objective(&cand);
            if val.is_finite() && val >= current {
                let moved = cand.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                *x = cand;
                current = val;
                improved = moved > 1e-9;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return;
        }
    }
}

/// Maximizes the expected complete-data log-likelihood of a discretized
/// normal on the grid by Newton steps in its natural parameters.
fn update_group_dist(nodes: &[f64], mass: &[f64], current: NormalDist, max_halvings: usize) -> NormalDist {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return current;
    }
    let t1: f64 = nodes.iter().zip(mass).map(|(t, m)| t * m).sum::<f64>() / total;
    let t2: f64 = nodes.iter().zip(mass).map(|(t, m)| t * t * m).sum::<f64>() / total;
    let lse = |e1: f64, e2: f64| {
        let v: Vec<f64> = nodes.iter().map(|t| e1 * t + e2 * t * t).collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    };
    let obj = |e1: f64, e2: f64| e1 * t1 + e2 * t2 - lse(e1, e2);
    let mut e1 = current.mu / (current.sigma * current.sigma);
    let mut e2 = -0.5 / (current.sigma * current.sigma);
    let mut f = obj(e1, e2);
    for _ in 0..50 {
        let z = lse(e1, e2);
        let (mut m1, mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0, 0.0);
        for t in nodes {
            let w = (e1 * t + e2 * t * t - z).exp();
            m1 += w * t;
            m2 += w * t * t;
            m3 += w * t * t * t;
            m4 += w * t * t * t * t;
        }
        let g = DVector::from_vec(vec![t1 - m1, t2 - m2]);
        let h = DMatrix::from_row_slice(2, 2, &[m2 - m1 * m1, m3 - m1 * m2, m3 - m1 * m2, m4 - m2 * m2]);
        let Some(step) = solve_spd_ridge(&h, &g) else { break };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=max_halvings.max(20) {
            let (c1, c2) = (e1 + t * step[0], e2 + t * step[1]);
            if c2 < 0.0 {
                let fc = obj(c1, c2);
                if fc.is_finite() && fc >= f {
                    moved = (c1 - e1).abs().max((c2 - e2).abs()) > 1e-12;
                    e1 = c1;
                    e2 = c2;
                    f = fc;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let sigma = (-0.5 / e2).sqrt();
    NormalDist {
        mu: e1 * sigma * sigma,
        sigma,
    }
}

fn start_items(data: &ResponseMatrix, spec: &CalibrationSpec, warnings: &mut Vec<String>) -> Vec<ItemState> {
    let g_n = data.n_groups();
    (0..data.n_items())
        .map(|j| {
            let model = spec.models[j];
            let shared = spec.constraints[j] == Constraint::SharedAcrossGroups;
            let slots = if shared { 1 } else { g_n };
            let (mut right, mut seen) = (0usize, 0usize);
            for p in 0..data.n_persons() {
                if let Some(x) = data.get(p, j) {
                    seen += 1;
                    right += usize::from(x);
                }
            }
            let excluded = seen == 0 || right == 0 || right == seen;
            if excluded {
                let msg = format!(
                    "item `{}` has no response variation and was excluded",
                    data.item_ids()[j]
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            let (a, b, gamma) = match &spec.start {
                Some(start) => {
                    let per = &start.items[j];
                    let pick = |g: usize| per[g];
                    let a: Vec<f64> = (0..slots).map(|s| pick(s).a).collect();
                    let b: Vec<f64> = (0..slots).map(|s| pick(s).b).collect();
                    let c = per[0].c.max(1e-4);
                    (a, b, logit(c))
                }
                None => {
                    let p = if seen == 0 { 0.5 } else { right as f64 / seen as f64 };
                    let c0 = if model == Model::ThreePL { START_C } else { 0.0 };
                    let adj = ((p - c0) / (1.0 - c0)).clamp(0.02, 0.98);
                    (vec![1.0; slots], vec![-logit(adj); slots], logit(START_C))
                }
            };
            let mut x = Vec::new();
            for s in 0..slots {
                x.push(a[s]);
                x.push(b[s]);
            }
            if model == Model::ThreePL {
                x.push(gamma);
            }
            clamp_params(&mut x, model);
            let mut item = ItemState {
                model,
                shared,
                a: vec![0.0; slots],
                b: vec![0.0; slots],
                gamma: 0.0,
                excluded,
            };
            item.unpack(&x);
            item
        })
        .collect()
}

/// Marginal log-likelihood of `data` at the given per-item, per-group
/// parameters and group distributions.
pub fn marginal_loglik(
    data: &ResponseMatrix,
    items: &[Vec<ItemParams>],
    dists: &[NormalDist],
    grid: &QuadratureGrid,
) -> f64 {
    let q_n = grid.len();
    let k = data.n_items();
    let mut total = 0.0;
    let log_w: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| log_normal_weights(grid.nodes(), d.mu, d.sigma))
        .collect();
    for p in 0..data.n_persons() {
        let g = data.group(p);
        let mut acc = log_w[g].clone();
        for j in 0..k {
            let Some(x) = data.get(p, j) else { continue };
            for (q, &t) in grid.nodes().iter().enumerate() {
                let pr = items[j][g].prob(t).clamp(P_FLOOR, 1.0 - P_FLOOR);
                acc[q] += if x { pr.ln() } else { (1.0 - pr).ln() };
            }
        }
        let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += max + acc.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        debug_assert_eq!(acc.len(), q_n);
    }
    total
}

#[derive(Clone, Debug)]
struct State {
    items: Vec<ItemState>,
    dists: Vec<NormalDist>,
}

impl State {
    /// Free parameters as one vector; group spreads on the log scale.
    fn flatten(&self, spec: &CalibrationSpec) -> Vec<f64> {
        let mut x = Vec::new();
        for item in self.items.iter().filter(|i| !i.excluded) {
            x.extend(item.pack());
        }
        for (d, kind) in self.dists.iter().zip(&spec.group_dists) {
            if *kind == GroupDist::Free {
                x.push(d.mu);
                x.push(d.sigma.ln());
            }
        }
        x
    }

    fn unflatten(&mut self, spec: &CalibrationSpec, x: &[f64]) {
        let mut at = 0;
        for item in self.items.iter_mut().filter(|i| !i.excluded) {
            let n = item.n_params();
            let mut v = x[at..at + n].to_vec();
            clamp_params(&mut v, item.model);
            item.unpack(&v);
            at += n;
        }
        for (d, kind) in self.dists.iter_mut().zip(&spec.group_dists) {
            if *kind == GroupDist::Free {
                d.mu = x[at].clamp(-4.0, 4.0);
                d.sigma = x[at + 1].clamp(-3.0, 2.0).exp();
                at += 2;
            }
        }
    }
}

struct Evaluated {
    state: State,
    estep: EStep,
    objective: f64,
}

struct Engine<'a> {
    data: &'a ResponseMatrix,
    spec: &'a CalibrationSpec,
}

impl Engine<'_> {
    fn evaluate(&self, state: State) -> Evaluated {
        let nodes = self.spec.grid.nodes();
        let tables = build_tables(&state.items, &state.dists, nodes, self.spec.scaling);
        let estep = e_step(self.data, &state.items, &tables, nodes.len());
        let objective = estep.loglik + penalty(&state.items, self.spec.c_prior.as_ref());
        Evaluated {
            state,
            estep,
            objective,
        }
    }

    fn m_step(&self, at: &Evaluated) -> State {
        let spec = self.spec;
        let nodes = spec.grid.nodes();
        let (k, g_n, q_n) = (self.data.n_items(), self.data.n_groups(), nodes.len());
        let mut state = at.state.clone();
        for (j, item) in state.items.iter_mut().enumerate() {
            if item.excluded {
                continue;
            }
            let counts = item_counts(&at.estep, item, j, k, g_n, q_n);
            let problem = ItemProblem {
                counts: &counts,
                nodes,
                model: item.model,
                scaling: spec.scaling,
                prior: spec.c_prior.as_ref(),
            };
            let mut x = item.pack();
            maximize_item(&problem, &mut x, spec.settings.m_step_iterations, spec.settings.max_halvings);
            item.unpack(&x);
        }
        for g in 0..g_n {
            if spec.group_dists[g] == GroupDist::Free {
                state.dists[g] = update_group_dist(
                    nodes,
                    &at.estep.mass[g * q_n..(g + 1) * q_n],
                    state.dists[g],
                    spec.settings.max_halvings,
                );
            }
        }
        state
    }
}

/// SQUAREM step length choice `-|r| / |v|`, capped at -1.
fn squarem_point(x0: &[f64], x1: &[f64], x2: &[f64]) -> Option<Vec<f64>> {
    let r: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = x2.iter().zip(x1).zip(&r).map(|((a, b), r)| a - b - r).collect();
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nv > 0.0) || !nr.is_finite() {
        return None;
    }
    let alpha = (-nr / nv).min(-1.0);
    if alpha > -1.0 - 1e-9 {
        return None;
    }
    Some(
        x0.iter()
            .zip(&r)
            .zip(&v)
            .map(|((x, r), v)| x - 2.0 * alpha * r + alpha * alpha * v)
            .collect(),
    )
}

/// Multi-group MML calibration by EM.
///
/// ```
/// use mgdif::estimation::AnalysisSetup;
/// use mgdif::irt::Model;
/// use mgdif::simgen::toy_dataset;
///
/// let data = toy_dataset(400, 8, 2, 11);
/// let setup = AnalysisSetup::new(vec![Model::TwoPL; 8]);
/// let fit = mgdif::estimation::calibrate(&data, &setup.concurrent(2)).unwrap();
/// assert!(fit.converged);
/// assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
/// ```
pub fn calibrate(data: &ResponseMatrix, spec: &CalibrationSpec) -> Result<CalibrationResult> {
    spec.validate(data)?;
    let g_n = data.n_groups();
    let mut warnings = Vec::new();
    let items = start_items(data, spec, &mut warnings);
    let dists: Vec<NormalDist> = spec
        .group_dists
        .iter()
        .enumerate()
        .map(|(g, d)| match d {
            GroupDist::Fixed { mu, sigma } => NormalDist { mu: *mu, sigma: *sigma },
            GroupDist::Free => spec
                .start
                .as_ref()
                .map(|s| s.group_dists[g])
                .unwrap_or(NormalDist { mu: 0.0, sigma: 1.0 }),
        })
        .collect();
    let engine = Engine { data, spec };
    let settings = spec.settings;

    let mut current = engine.evaluate(State { items, dists });
    let mut trace = vec![current.objective];
    let mut converged = false;
    let mut cycles = 0;
    // Each pass takes two plain EM steps and then tries a squared
    // extrapolation, kept only if it beats the second EM step.
    'outer: while cycles < settings.max_cycles {
        let mut path = Vec::with_capacity(2);
        for _ in 0..2 {
            let next = engine.evaluate(engine.m_step(&current));
            cycles += 1;
            let gain = next.objective - current.objective;
            trace.push(next.objective);
            path.push(current.state.flatten(spec));
            current = next;
            if gain.abs() < settings.tol {
                converged = true;
                break 'outer;
            }
            if cycles >= settings.max_cycles {
                break 'outer;
            }
        }
        let x2 = current.state.flatten(spec);
        let Some(jump) = squarem_point(&path[0], &path[1], &x2) else { continue };
        let mut proposal = current.state.clone();
        proposal.unflatten(spec, &jump);
        let proposal = engine.evaluate(proposal);
        if !proposal.objective.is_finite() {
            continue;
        }
        let stabilized = engine.evaluate(engine.m_step(&proposal));
        cycles += 1;
        if stabilized.objective > current.objective {
            let gain = stabilized.objective - current.objective;
            trace.push(stabilized.objective);
            current = stabilized;
            if gain < settings.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        let msg = format!("EM did not converge within {} cycles", settings.max_cycles);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let covariance = covariance(&engine, &current.state, &current.estep.posterior, &mut warnings);
    let Evaluated { state: State { items, dists }, estep, .. } = current;
    let q_n = spec.grid.len();
    let item_estimates = items
        .iter()
        .enumerate()
        .map(|(j, item)| ItemEstimate {
            constraint: spec.constraints[j],
            per_group: (0..g_n).map(|g| item.params(g, spec.scaling)).collect(),
            excluded: item.excluded,
        })
        .collect();
    Ok(CalibrationResult {
        items: item_estimates,
        group_dists: dists,
        covariance,
        loglik: estep.loglik,
        trace,
        cycles,
        converged,
        grid: spec.grid.clone(),
        warnings,
        posterior: PosteriorMasses::new(q_n, estep.posterior),
    })
}

/// Keys of all free parameters, in covariance order, plus a lookup from
/// (item, slot) to the index of its `a` parameter.
fn parameter_layout(spec: &CalibrationSpec, items: &[ItemState]) -> (Vec<ParamKey>, Vec<Vec<usize>>, Vec<Option<usize>>, Vec<Option<usize>>) {
    let mut keys = Vec::new();
    let mut ab_index = Vec::with_capacity(items.len());
    let mut gamma_index = Vec::with_capacity(items.len());
    for (j, item) in items.iter().enumerate() {
        let mut slots = Vec::new();
        if item.excluded {
            ab_index.push(slots);
            gamma_index.push(None);
            continue;
        }
        for s in 0..item.n_slots() {
            let group = (!item.shared).then_some(s);
            slots.push(keys.len());
            keys.push(ParamKey::Item { item: j, group, kind: ParamKind::A });
            keys.push(ParamKey::Item { item: j, group, kind: ParamKind::B });
        }
        ab_index.push(slots);
        if item.model == Model::ThreePL {
            gamma_index.push(Some(keys.len()));
            keys.push(ParamKey::Item { item: j, group: None, kind: ParamKind::LogitC });
        } else {
            gamma_index.push(None);
        }
    }
    let mut group_index = Vec::with_capacity(spec.group_dists.len());
    for (g, d) in spec.group_dists.iter().enumerate() {
        if *d == GroupDist::Free {
            group_index.push(Some(keys.len()));
            keys.push(ParamKey::GroupMean(g));
            keys.push(ParamKey::GroupSd(g));
        } else {
            group_index.push(None);
        }
    }
    (keys, ab_index, gamma_index, group_index)
}

struct ScoreStats {
    keys: Vec<ParamKey>,
    gamma_index: Vec<Option<usize>>,
    /// Sum over persons of score outer products.
    cross_products: DMatrix<f64>,
    /// Marginal log-likelihood gradient.
    gradient: DVector<f64>,
}

/// Per-person marginal scores, aggregated.
fn score_statistics(
    data: &ResponseMatrix,
    spec: &CalibrationSpec,
    items: &[ItemState],
    dists: &[NormalDist],
    posterior: &[f64],
    cross_products: bool,
) -> ScoreStats {
    let nodes = spec.grid.nodes();
    let q_n = nodes.len();
    let (k, g_n) = (items.len(), dists.len());
    let (keys, ab_index, gamma_index, group_index) = parameter_layout(spec, items);
    let dim = keys.len();

    // Per (g, j, q): score factors for a correct and an incorrect response.
    let mut right = vec![[0.0; 3]; g_n * k * q_n];
    let mut wrong = vec![[0.0; 3]; g_n * k * q_n];
    for g in 0..g_n {
        for (j, item) in items.iter().enumerate() {
            if item.excluded {
                continue;
            }
            let s = item.slot(g);
            let gamma = (item.model == Model::ThreePL).then_some(item.gamma);
            for (q, &t) in nodes.iter().enumerate() {
                let (p, dp) = prob_and_grad(item.a[s], item.b[s], gamma, spec.scaling, t);
                let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
                let i = (g * k + j) * q_n + q;
                for u in 0..3 {
                    right[i][u] = dp[u] / p;
                    wrong[i][u] = -dp[u] / (1.0 - p);
                }
            }
        }
    }
    // Per (g, q): derivatives of the log prior weight in mu and sigma.
    let mut dw = vec![[0.0; 2]; g_n * q_n];
    for g in 0..g_n {
        if group_index[g].is_none() {
            continue;
        }
        let NormalDist { mu, sigma } = dists[g];
        let w = log_normal_weights(nodes, mu, sigma);
        let raw_mu: Vec<f64> = nodes.iter().map(|t| (t - mu) / (sigma * sigma)).collect();
        let raw_sd: Vec<f64> = nodes.iter().map(|t| (t - mu).powi(2) / sigma.powi(3)).collect();
        let e_mu: f64 = w.iter().zip(&raw_mu).map(|(l, v)| l.exp() * v).sum();
        let e_sd: f64 = w.iter().zip(&raw_sd).map(|(l, v)| l.exp() * v).sum();
        for q in 0..q_n {
            dw[g * q_n + q] = [raw_mu[q] - e_mu, raw_sd[q] - e_sd];
        }
    }

    let n_p = data.n_persons();
    let chunks: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n_p.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut info = if cross_products { DMatrix::zeros(dim, dim) } else { DMatrix::zeros(0, 0) };
            let mut grad = DVector::zeros(dim);
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(3 * k + 2);
            for p in ci * CHUNK..((ci + 1) * CHUNK).min(n_p) {
                entries.clear();
                let g = data.group(p);
                let post = &posterior[p * q_n..(p + 1) * q_n];
                for (j, cell) in data.row(p).iter().enumerate() {
                    let Some(x) = cell else { continue };
                    let item = &items[j];
                    if item.excluded {
                        continue;
                    }
                    let base = (g * k + j) * q_n;
                    let table = if *x { &right[base..base + q_n] } else { &wrong[base..base + q_n] };
                    let mut sc = [0.0; 3];
                    for (w, f) in post.iter().zip(table) {
                        sc[0] += w * f[0];
                        sc[1] += w * f[1];
                        sc[2] += w * f[2];
                    }
                    let ia = ab_index[j][item.slot(g)];
                    entries.push((ia, sc[0]));
                    entries.push((ia + 1, sc[1]));
                    if let Some(ig) = gamma_index[j] {
                        entries.push((ig, sc[2]));
                    }
                }
                if let Some(ig) = group_index[g] {
                    let mut sc = [0.0; 2];
                    for (w, d) in post.iter().zip(&dw[g * q_n..(g + 1) * q_n]) {
                        sc[0] += w * d[0];
                        sc[1] += w * d[1];
                    }
                    entries.push((ig, sc[0]));
                    entries.push((ig + 1, sc[1]));
                }
                for &(u, vu) in &entries {
                    grad[u] += vu;
                    if cross_products {
                        for &(w, vw) in &entries {
                            info[(u, w)] += vu * vw;
                        }
                    }
                }
            }
            (info, grad)
        })
        .collect();
    let mut total = if cross_products { DMatrix::zeros(dim, dim) } else { DMatrix::zeros(0, 0) };
    let mut gradient = DVector::zeros(dim);
    for (c, g) in chunks {
        total += c;
        gradient += g;
    }
    let cross_products = total;
    ScoreStats {
        keys,
        gamma_index,
        cross_products,
        gradient,
    }
}

/// Group that a parameter belongs to, or `None` when shared.
fn owner(key: &ParamKey) -> Option<usize> {
    match *key {
        ParamKey::Item { group, .. } => group,
        ParamKey::GroupMean(g) | ParamKey::GroupSd(g) => Some(g),
    }
}

/// Negative Hessian of the marginal log-likelihood, by central differences
/// of the analytic score. Parameters owned by different groups never
/// interact, so one parameter per group is perturbed in each pass.
/// Parameters held at a bound get one-sided differences.
fn observed_information(engine: &Engine, state: &State, keys: &[ParamKey]) -> DMatrix<f64> {
    let spec = engine.spec;
    let x0 = state.flatten(spec);
    let n = x0.len();
    let g_n = state.dists.len();
    let natural = |i: usize, v: f64| match keys[i] {
        ParamKey::GroupSd(_) => v.exp(),
        _ => v,
    };
    let shifted = |x: &mut [f64], i: usize, sign: f64| {
        if let ParamKey::GroupSd(_) = keys[i] {
            x[i] = (x0[i].exp() + sign * FD_STEP).ln();
        } else {
            x[i] = x0[i] + sign * FD_STEP;
        }
    };
    // Gradient at `x` plus every coordinate's value after clamping.
    let score = |x: &[f64]| {
        let mut st = state.clone();
        st.unflatten(spec, x);
        let moved: Vec<f64> = st.flatten(spec).iter().enumerate().map(|(i, v)| natural(i, *v)).collect();
        let ev = engine.evaluate(st);
        let g = score_statistics(engine.data, spec, &ev.state.items, &ev.state.dists, &ev.estep.posterior, false).gradient;
        (g, moved)
    };

    let shared: Vec<usize> = (0..n).filter(|&i| owner(&keys[i]).is_none()).collect();
    let mut owned = vec![Vec::new(); g_n];
    for i in 0..n {
        if let Some(g) = owner(&keys[i]) {
            owned[g].push(i);
        }
    }
    let rounds = owned.iter().map(Vec::len).max().unwrap_or(0);
    let passes: Vec<Vec<usize>> = shared
        .iter()
        .map(|&i| vec![i])
        .chain((0..rounds).map(|r| owned.iter().filter_map(|o| o.get(r).copied()).collect()))
        .collect();

    let (g_mid, t_mid) = score(&x0);
    let results: Vec<(DVector<f64>, Vec<f64>, DVector<f64>, Vec<f64>)> = passes
        .par_iter()
        .map(|idx| {
            let (mut up, mut down) = (x0.clone(), x0.clone());
            for &i in idx {
                shifted(&mut up, i, 1.0);
                shifted(&mut down, i, -1.0);
            }
            let (gu, tu) = score(&up);
            let (gd, td) = score(&down);
            (gu, tu, gd, td)
        })
        .collect();

    let mut hess = DMatrix::zeros(n, n);
    for (idx, (gu, tu, gd, td)) in passes.iter().zip(&results) {
        for &i in idx {
            let column = if tu[i] - td[i] > 0.5 * FD_STEP {
                (gu - gd) / (tu[i] - td[i])
            } else if tu[i] - t_mid[i] > t_mid[i] - td[i] {
                (gu - &g_mid) / (tu[i] - t_mid[i])
            } else if t_mid[i] - td[i] > 0.0 {
                (&g_mid - gd) / (t_mid[i] - td[i])
            } else {
                continue;
            };
            match owner(&keys[i]) {
                None => hess.set_column(i, &column),
                Some(g) => {
                    for &r in &owned[g] {
                        hess[(r, i)] = column[r];
                    }
                }
            }
        }
    }
    for &i in &shared {
        for r in 0..n {
            if owner(&keys[r]).is_some() {
                hess[(i, r)] = hess[(r, i)];
            }
        }
    }
    -(&hess + hess.transpose()) * 0.5
}

fn covariance(engine: &Engine, state: &State, posterior: &[f64], warnings: &mut Vec<String>) -> Covariance {
    let spec = engine.spec;
    let cross = spec.settings.covariance == CovarianceMethod::CrossProduct;
    let stats = score_statistics(engine.data, spec, &state.items, &state.dists, posterior, cross);
    let mut info = match spec.settings.covariance {
        CovarianceMethod::CrossProduct => stats.cross_products,
        CovarianceMethod::ObservedInformation => observed_information(engine, state, &stats.keys),
    };
    if let Some(pr) = &spec.c_prior {
        for ig in stats.gamma_index.iter().flatten() {
            info[(*ig, *ig)] += 1.0 / (pr.sd * pr.sd);
        }
    }
    let (matrix, pseudo_inverse) = inverse_spd(&info);
    if pseudo_inverse {
        let msg = "information matrix is singular; covariance uses a pseudo-inverse".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Covariance {
        keys: stats.keys,
        matrix,
        pseudo_inverse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{reference_fixed, AnalysisSetup, EmSettings};
    use crate::irt::make_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate(
        items: &[Vec<ItemParams>],
        groups: &[(usize, f64, f64)],
        seed: u64,
    ) -> ResponseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = items.len();
        let mut ids = Vec::new();
        let mut gp = Vec::new();
        let mut resp = Vec::new();
        for (g, &(n, mu, sigma)) in groups.iter().enumerate() {
            let dist = Normal::new(mu, sigma).unwrap();
            for _ in 0..n {
                let theta = dist.sample(&mut rng);
                ids.push(format!("p{}", ids.len()));
                gp.push(g);
                for item in items {
                    resp.push(Some(rng.random::<f64>() < item[g].prob(theta)));
                }
            }
        }
        ResponseMatrix::new(
            ids,
            (0..groups.len()).map(|g| format!("g{g}")).collect(),
            gp,
            (0..k).map(|j| format!("i{j}")).collect(),
            resp,
        )
        .unwrap()
    }

    fn shared(params: &[ItemParams], g_n: usize) -> Vec<Vec<ItemParams>> {
        params.iter().map(|p| vec![*p; g_n]).collect()
    }

    fn bank(k: usize) -> Vec<ItemParams> {
        (0..k)
            .map(|j| {
                let a = 0.8 + 0.1 * (j % 5) as f64;
                let b = -1.5 + 3.0 * j as f64 / (k - 1) as f64;
                ItemParams::two_pl(a, b).unwrap()
            })
            .collect()
    }

    #[test]
    fn loglik_matches_exhaustive_enumeration() {
        let grid = make_grid(2, -1.0, 1.0).unwrap();
        let data = ResponseMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["r".into()],
            vec![0, 0, 0],
            vec!["x".into(), "y".into()],
            vec![Some(true), Some(false), Some(true), None, Some(false), Some(true)],
        )
        .unwrap();
        let mut setup = AnalysisSetup::new(vec![Model::TwoPL; 2]);
        setup.grid = grid.clone();
        setup.em.max_cycles = 3;
        let fit = calibrate(&data, &setup.concurrent(1)).unwrap();

        let w = grid.normal_weights(0.0, 1.0).unwrap();
        let lik = |p: usize, q: usize| -> f64 {
            (0..2)
                .filter_map(|j| {
                    data.get(p, j).map(|x| {
                        let pr = fit.params(j, 0).prob(grid.nodes()[q]);
                        if x {
                            pr
                        } else {
                            1.0 - pr
                        }
                    })
                })
                .product()
        };
        let mut total = 0.0;
        for q0 in 0..2 {
            for q1 in 0..2 {
                for q2 in 0..2 {
                    total += w.weights()[q0] * lik(0, q0) * w.weights()[q1] * lik(1, q1)
                        * w.weights()[q2] * lik(2, q2);
                }
            }
        }
        assert!((fit.loglik - total.ln()).abs() < 1e-10, "{} vs {}", fit.loglik, total.ln());
    }

    #[test]
    fn recovers_parameters_and_group_distribution() {
        let items = bank(12);
        let data = simulate(&shared(&items, 2), &[(2000, 0.0, 1.0), (2000, 0.5, 1.2)], 3);
        let setup = AnalysisSetup::new(vec![Model::TwoPL; 12]);
        let fit = calibrate(&data, &setup.concurrent(2)).unwrap();
        assert!(fit.converged);
        let se = |j: usize, kind: ParamKind| {
            let i = fit
                .covariance
                .index_of(ParamKey::Item { item: j, group: None, kind })
                .unwrap();
            fit.covariance.matrix[(i, i)].sqrt()
        };
        for (j, truth) in items.iter().enumerate() {
            let est = fit.params(j, 0);
            let (sa, sb) = (se(j, ParamKind::A), se(j, ParamKind::B));
            assert!(sa > 0.01 && sa < 0.2 && sb > 0.01 && sb < 0.2, "{sa} {sb}");
            assert!((est.a - truth.a).abs() < 4.0 * sa, "a{j}: {} vs {}", est.a, truth.a);
            assert!((est.b - truth.b).abs() < 4.0 * sb, "b{j}: {} vs {}", est.b, truth.b);
        }
        assert!((fit.group_dists[1].mu - 0.5).abs() < 0.1, "{:?}", fit.group_dists[1]);
        assert!((fit.group_dists[1].sigma - 1.2).abs() < 0.1, "{:?}", fit.group_dists[1]);
    }

    #[test]
    fn trace_is_monotone_and_posteriors_normalized() {
        let mut items = bank(10);
        items[3] = ItemParams::three_pl(1.3, 0.2, 0.2).unwrap();
        let data = simulate(&shared(&items, 3), &[(500, 0.0, 1.0), (500, -0.4, 0.9), (500, 0.3, 1.1)], 9);
        let mut models = vec![Model::TwoPL; 10];
        models[3] = Model::ThreePL;
        let setup = AnalysisSetup::new(models);
        let fit = calibrate(&data, &setup.concurrent(3)).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        for p in 0..data.n_persons() {
            let s: f64 = fit.posterior.person(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let m = &fit.covariance.matrix;
        for i in 0..m.nrows() {
            assert!(m[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
        let eig = m.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * max));
    }

    #[test]
    fn free_items_match_group_specific_truth() {
        let items = bank(10);
        let mut truth = shared(&items, 2);
        truth[9][1] = ItemParams::two_pl(items[9].a, items[9].b + 1.0).unwrap();
        let data = simulate(&truth, &[(2500, 0.0, 1.0), (2500, 0.0, 1.0)], 21);
        let setup = AnalysisSetup::new(vec![Model::TwoPL; 10]);
        let mut constraints = vec![Constraint::SharedAcrossGroups; 10];
        constraints[9] = Constraint::FreePerGroup;
        let fit = calibrate(&data, &setup.spec(constraints, reference_fixed(2))).unwrap();
        let db = fit.params(9, 1).b - fit.params(9, 0).b;
        assert!((db - 1.0).abs() < 0.25, "{db}");
        let key = |g| ParamKey::Item { item: 9, group: Some(g), kind: ParamKind::B };
        assert!(fit.covariance.index_of(key(0)).is_some());
        assert!(fit.covariance.index_of(key(1)).is_some());
    }

    #[test]
    fn degenerate_item_is_excluded() {
        let items = bank(5);
        let mut data_items = shared(&items, 1);
        data_items[2][0] = ItemParams::two_pl(1.0, -40.0).unwrap();
        let data = simulate(&data_items, &[(300, 0.0, 1.0)], 4);
        let setup = AnalysisSetup::new(vec![Model::TwoPL; 5]);
        let fit = calibrate(&data, &setup.concurrent(1)).unwrap();
        assert!(fit.items[2].excluded);
        assert_eq!(fit.warnings.len(), 1);
        assert!(fit.covariance.keys.iter().all(|k| !matches!(k, ParamKey::Item { item: 2, .. })));
    }

    #[test]
    fn group_update_recovers_discretized_normal() {
        let grid = QuadratureGrid::q41();
        let w = grid.normal_weights(0.7, 0.6).unwrap();
        let mass: Vec<f64> = w.weights().iter().map(|x| x * 250.0).collect();
        let d = update_group_dist(grid.nodes(), &mass, NormalDist { mu: 0.0, sigma: 1.0 }, 10);
        assert!((d.mu - 0.7).abs() < 1e-8 && (d.sigma - 0.6).abs() < 1e-8, "{d:?}");
    }

    #[test]
    fn hits_cycle_limit_without_converging() {
        let data = simulate(&shared(&bank(6), 1), &[(200, 0.0, 1.0)], 5);
        let mut setup = AnalysisSetup::new(vec![Model::TwoPL; 6]);
        setup.em = EmSettings { max_cycles: 2, ..EmSettings::default() };
        let fit = calibrate(&data, &setup.concurrent(1)).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.cycles, 2);
    }
}

#[cfg(test)]
mod information_check {
    use super::*;
    use crate::estimation::{reference_fixed, AnalysisSetup};
    use crate::simgen::toy_dataset;

    #[test]
    fn cross_product_and_observed_information_agree() {
        let data = toy_dataset(400, 6, 2, 17);
        let setup = AnalysisSetup::new(vec![Model::TwoPL; 6]);
        let constraints = (0..6)
            .map(|j| if j < 3 { Constraint::FreePerGroup } else { Constraint::SharedAcrossGroups })
            .collect();
        let mut spec = setup.spec(constraints, reference_fixed(2));
        spec.settings.tol = 1e-10;
        let xpd = calibrate(&data, &spec).unwrap();
        spec.settings.covariance = CovarianceMethod::ObservedInformation;
        let obs = calibrate(&data, &spec).unwrap();
        assert_eq!(xpd.covariance.keys, obs.covariance.keys);
        assert!(obs.covariance.keys.contains(&ParamKey::GroupSd(1)));
        for i in 0..xpd.covariance.keys.len() {
            let ratio = xpd.covariance.matrix[(i, i)] / obs.covariance.matrix[(i, i)];
            assert!((0.8..1.25).contains(&ratio), "{:?}: ratio {ratio}", xpd.covariance.keys[i]);
        }
    }
}
