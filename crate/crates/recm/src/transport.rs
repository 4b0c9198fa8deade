//! Empirical distributions on input-target pairs, their group
//! symmetrizations, and an exact Wasserstein-1 solver.
//!
//! The distance between an empirical distribution and its symmetrized
//! counterpart measures how far the data sits from exact symmetry; the
//! bound-checking routines relate that distance to the reachable range
//! of the update function and hence to the modulation scalars.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::RecmError;
use crate::groups::{FiniteGroup, GeneratingSet, Group, Representation};
use crate::modulation::{l_theta, l_theta_eval, UpdateFn, UpdateNet};
use crate::tensor::{gelu_deriv_scalar, Tensor};
use crate::Rng;

const ATOM_MERGE_TOL: f64 = 1e-9;

/// Largest slope of the GeLU, found once by dense maximization of the
/// exact derivative and cached. About 1.1289, attained near x = 1.14.
pub fn gelu_lipschitz() -> f64 {
    static CACHE: OnceLock<f64> = OnceLock::new();
    *CACHE.get_or_init(|| {
        let mut best_x: f64 = 0.0;
        let mut best: f64 = 0.0;
        let mut x = -6.0;
        while x <= 6.0 {
            let d = gelu_deriv_scalar(x).abs();
            if d > best {
                best = d;
                best_x = x;
            }
            x += 1e-4;
        }
        // local refinement around the grid maximizer
        let mut lo = best_x - 1e-4;
        let mut hi = best_x + 1e-4;
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if gelu_deriv_scalar(m1).abs() < gelu_deriv_scalar(m2).abs() {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        best.max(gelu_deriv_scalar(0.5 * (lo + hi)).abs())
    })
}

/// Finitely supported distribution over concatenated (z, y) pairs.
/// The first `z_dim` coordinates of each atom are the input part.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub z_dim: usize,
}

impl EmpiricalDistribution {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>, z_dim: usize) -> Result<Self, RecmError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(RecmError::contract("distribution needs matching, nonempty points and weights"));
        }
        let dim = points[0].len();
        if z_dim > dim || points.iter().any(|p| p.len() != dim) {
            return Err(RecmError::dimension("inconsistent atom dimensions"));
        }
        if weights.iter().any(|w| *w < -1e-15 || !w.is_finite()) {
            return Err(RecmError::contract("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RecmError::contract("weights must sum to one"));
        }
        let mut d = EmpiricalDistribution { points, weights, z_dim };
        d.normalize();
        Ok(d)
    }

    /// Equal weights over the given sample points.
    pub fn uniform(points: Vec<Vec<f64>>, z_dim: usize) -> Result<Self, RecmError> {
        let n = points.len();
        Self::new(points, vec![1.0 / n as f64; n], z_dim)
    }

    pub fn dirac(point: Vec<f64>, z_dim: usize) -> Self {
        EmpiricalDistribution {
            points: vec![point],
            weights: vec![1.0],
            z_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn support_size(&self) -> usize {
        self.points.len()
    }

    pub fn z_part(&self, i: usize) -> &[f64] {
        &self.points[i][..self.z_dim]
    }

    pub fn y_part(&self, i: usize) -> &[f64] {
        &self.points[i][self.z_dim..]
    }

    /// Merge coincident atoms (within a small tolerance), drop zero
    /// weights, and renormalize the total mass to exactly one.
    pub fn normalize(&mut self) {
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (p, w) in self.points.iter().zip(&self.weights) {
            if *w <= 0.0 {
                continue;
            }
            let hit = points.iter().position(|q| {
                p.iter().zip(q.iter()).all(|(a, b)| (a - b).abs() <= ATOM_MERGE_TOL)
            });
            match hit {
                Some(k) => weights[k] += w,
                None => {
                    points.push(p.clone());
                    weights.push(*w);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        self.points = points;
        self.weights = weights;
    }

    /// Expectation of the update function over the distribution,
    /// coordinatewise.
    pub fn expect_l<U: UpdateFn>(
        &self,
        net: &U,
        gens: &GeneratingSet,
        rep_in: &Representation,
        rep_out: &Representation,
    ) -> Vec<f64> {
        let mut acc = vec![0.0; net.out_dim()];
        for i in 0..self.support_size() {
            let l = l_theta_eval(net, self.z_part(i), self.y_part(i), gens, rep_in, rep_out);
            for (a, v) in acc.iter_mut().zip(l) {
                *a += self.weights[i] * v;
            }
        }
        acc
    }
}

fn transform_atom(
    point: &[f64],
    z_dim: usize,
    g: &crate::groups::GroupElement,
    rep_in: &Representation,
    rep_out: &Representation,
) -> Vec<f64> {
    let mut out = rep_in.apply_vec(g, &point[..z_dim]);
    out.extend(rep_out.apply_vec(g, &point[z_dim..]));
    out
}

/// Exact average of the distribution over a full finite group.
pub fn symmetrize_full(
    p: &EmpiricalDistribution,
    group: &FiniteGroup,
    rep_in: &Representation,
    rep_out: &Representation,
) -> EmpiricalDistribution {
    let scale = 1.0 / group.order() as f64;
    let mut points = Vec::with_capacity(p.support_size() * group.order());
    let mut weights = Vec::with_capacity(points.capacity());
    for i in 0..p.support_size() {
        for k in 0..group.order() {
            let g = group.element(k);
            points.push(transform_atom(&p.points[i], p.z_dim, &g, rep_in, rep_out));
            weights.push(p.weights[i] * scale);
        }
    }
    let mut out = EmpiricalDistribution { points, weights, z_dim: p.z_dim };
    out.normalize();
    out
}

/// Exact average over a generating set only (not its closure).
pub fn symmetrize_generators(
    p: &EmpiricalDistribution,
    gens: &GeneratingSet,
    rep_in: &Representation,
    rep_out: &Representation,
) -> EmpiricalDistribution {
    let scale = 1.0 / gens.len() as f64;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for i in 0..p.support_size() {
        for g in gens.elements() {
            points.push(transform_atom(&p.points[i], p.z_dim, &g, rep_in, rep_out));
            weights.push(p.weights[i] * scale);
        }
    }
    let mut out = EmpiricalDistribution { points, weights, z_dim: p.z_dim };
    out.normalize();
    out
}

/// Monte-Carlo average over a continuous group using `n_samples` Haar
/// draws per atom; the sample count is part of the estimate's contract.
pub fn symmetrize_sampled(
    p: &EmpiricalDistribution,
    group: &Group,
    rep_in: &Representation,
    rep_out: &Representation,
    n_samples: usize,
    rng: &mut Rng,
) -> EmpiricalDistribution {
    let scale = 1.0 / n_samples as f64;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for i in 0..p.support_size() {
        for _ in 0..n_samples {
            let g = group.haar_sample(rng);
            points.push(transform_atom(&p.points[i], p.z_dim, &g, rep_in, rep_out));
            weights.push(p.weights[i] * scale);
        }
    }
    let mut out = EmpiricalDistribution { points, weights, z_dim: p.z_dim };
    out.normalize();
    out
}

/// Total-variation distance between two finitely supported
/// distributions, by exact support matching.
pub fn total_variation(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> f64 {
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut diff: Vec<f64> = Vec::new();
    let mut absorb = |pts: &[Vec<f64>], ws: &[f64], sign: f64| {
        for (p, w) in pts.iter().zip(ws) {
            let hit = points.iter().position(|q| {
                p.iter().zip(q.iter()).all(|(a, b)| (a - b).abs() <= ATOM_MERGE_TOL)
            });
            match hit {
                Some(k) => diff[k] += sign * w,
                None => {
                    points.push(p.clone());
                    diff.push(sign * w);
                }
            }
        }
    };
    absorb(&p.points, &p.weights, 1.0);
    absorb(&q.points, &q.weights, -1.0);
    0.5 * diff.iter().map(|d| d.abs()).sum::<f64>()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Optimal coupling returned by [`wasserstein1`].
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// (source atom, target atom, transported mass) triples.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

impl TransportPlan {
    /// Largest violation of the two marginal constraints.
    pub fn marginal_error(&self, p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> f64 {
        let mut row = vec![0.0; p.support_size()];
        let mut col = vec![0.0; q.support_size()];
        for &(i, j, m) in &self.flows {
            row[i] += m;
            col[j] += m;
        }
        let e1 = row
            .iter()
            .zip(&p.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let e2 = col
            .iter()
            .zip(&q.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        e1.max(e2)
    }
}

/// Maximum number of source-target pairs the exact solver accepts.
pub const W1_PAIR_BUDGET: usize = 2000;

/// Exact Wasserstein-1 distance under the Euclidean ground metric,
/// solved as a minimum-cost transportation problem by successive
/// shortest augmenting paths. No regularization; the answer is the
/// linear-programming optimum up to floating-point roundoff.
pub fn wasserstein1(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<(f64, TransportPlan), RecmError> {
    wasserstein1_budgeted(p, q, W1_PAIR_BUDGET)
}

pub fn wasserstein1_budgeted(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    budget: usize,
) -> Result<(f64, TransportPlan), RecmError> {
    if p.dim() != q.dim() {
        return Err(RecmError::dimension("distributions live in different spaces"));
    }
    let (n, m) = (p.support_size(), q.support_size());
    if n * m > budget {
        return Err(RecmError::SupportBudget { got: n * m, budget });
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..m).map(|j| euclidean(&p.points[i], &q.points[j])).collect())
        .collect();
    let mut supply = p.weights.clone();
    let mut demand = q.weights.clone();
    let mut flow = vec![vec![0.0f64; m]; n];

    // Successive shortest paths with Bellman-Ford label correction over
    // the residual bipartite graph. Each augmentation exhausts at least
    // one atom, so the number of rounds is at most n + m.
    const EPS: f64 = 1e-14;
    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= 1e-12 {
            break;
        }
        // dist over nodes: 0..n sources, n..n+m sinks
        let inf = f64::INFINITY;
        let mut dist = vec![inf; n + m];
        let mut parent: Vec<Option<usize>> = vec![None; n + m];
        for i in 0..n {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                if dist[i] < inf {
                    for j in 0..m {
                        let nd = dist[i] + cost[i][j];
                        if nd < dist[n + j] - 1e-15 {
                            dist[n + j] = nd;
                            parent[n + j] = Some(i);
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j] < inf {
                    for i in 0..n {
                        if flow[i][j] > EPS {
                            let nd = dist[n + j] - cost[i][j];
                            if nd < dist[i] - 1e-15 {
                                dist[i] = nd;
                                parent[i] = Some(n + j);
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
        // cheapest reachable sink with remaining demand
        let mut best: Option<usize> = None;
        for j in 0..m {
            if demand[j] > EPS && dist[n + j] < inf {
                if best.map_or(true, |b| dist[n + j] < dist[n + b]) {
                    best = Some(j);
                }
            }
        }
        let Some(jstar) = best else {
            return Err(RecmError::contract("transport solver: no augmenting path (unbalanced marginals)"));
        };
        // walk back to a source, collecting the bottleneck
        let mut path = vec![n + jstar];
        let mut node = n + jstar;
        while let Some(prev) = parent[node] {
            path.push(prev);
            node = prev;
        }
        path.reverse();
        let src = path[0];
        let mut bottleneck = supply[src].min(demand[jstar]);
        for w in path.windows(2) {
            if w[0] >= n {
                // backward edge sink -> source removes existing flow
                bottleneck = bottleneck.min(flow[w[1]][w[0] - n]);
            }
        }
        for w in path.windows(2) {
            if w[0] < n {
                flow[w[0]][w[1] - n] += bottleneck;
            } else {
                flow[w[1]][w[0] - n] -= bottleneck;
            }
        }
        supply[src] -= bottleneck;
        demand[jstar] -= bottleneck;
    }

    let mut flows = Vec::new();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            if flow[i][j] > EPS {
                flows.push((i, j, flow[i][j]));
                total += flow[i][j] * cost[i][j];
            }
        }
    }
    Ok((total, TransportPlan { flows, cost: total }))
}

/// Largest singular value of a row-major matrix by power iteration,
/// run to a relative tolerance of 1e-8.
pub fn spectral_norm(data: &[f64], rows: usize, cols: usize) -> f64 {
    if data.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + (i as f64) * 0.01).collect();
    let mut prev = 0.0;
    for _ in 0..10_000 {
        // u = A v
        let mut u = vec![0.0; rows];
        for i in 0..rows {
            for j in 0..cols {
                u[i] += data[i * cols + j] * v[j];
            }
        }
        // w = A^T u
        let mut w = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                w[j] += data[i * cols + j] * u[i];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut w {
            *x /= norm;
        }
        v = w;
        let est = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (est - prev).abs() <= 1e-8 * est.max(1.0) {
            return est;
        }
        prev = est;
    }
    prev
}

/// Upper bound on the Lipschitz constant of the whole update net:
/// ||W2||_2 * L_gelu * ||W1||_2.
pub fn lipschitz_upper(net: &UpdateNet) -> f64 {
    let w1 = net.w1.data();
    let w2 = net.w2.data();
    let s1 = spectral_norm(&w1, net.w1.shape()[0], net.w1.shape()[1]);
    let s2 = spectral_norm(&w2, net.w2.shape()[0], net.w2.shape()[1]);
    s2 * gelu_lipschitz() * s1
}

/// Per-output-coordinate Lipschitz bounds: ||row_i(W2)|| * L_gelu * ||W1||_2.
pub fn lipschitz_upper_coords(net: &UpdateNet) -> Vec<f64> {
    let w1 = net.w1.data();
    let s1 = spectral_norm(&w1, net.w1.shape()[0], net.w1.shape()[1]);
    let w2 = net.w2.data();
    let (rows, cols) = (net.w2.shape()[0], net.w2.shape()[1]);
    (0..rows)
        .map(|i| {
            let rn = (0..cols).map(|j| w2[i * cols + j].powi(2)).sum::<f64>().sqrt();
            rn * gelu_lipschitz() * s1
        })
        .collect()
}

/// Outcome of checking |E_p[l]| <= 2 B W1(p, p_G) coordinatewise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub w1: f64,
    pub pass: bool,
    /// Smallest rhs - lhs margin over coordinates.
    pub margin: f64,
}

/// Verifies the deviation bound for a concrete net and distribution:
/// every coordinate of |E_p[l]| against 2 B_i W1(p, symmetrized p),
/// where B_i is the coordinate's Lipschitz bound and the symmetrization
/// runs over the full group generated by the given set.
pub fn verify_upper_bound(
    net: &UpdateNet,
    p: &EmpiricalDistribution,
    group: &FiniteGroup,
    gens: &GeneratingSet,
    rep_in: &Representation,
    rep_out: &Representation,
) -> Result<BoundCheck, RecmError> {
    let p_sym = symmetrize_full(p, group, rep_in, rep_out);
    let (w1, _) = wasserstein1(p, &p_sym)?;
    let lhs: Vec<f64> = p
        .expect_l(net, gens, rep_in, rep_out)
        .into_iter()
        .map(f64::abs)
        .collect();
    let coords = lipschitz_upper_coords(net);
    let rhs: Vec<f64> = coords.iter().map(|b| 2.0 * b * w1).collect();
    let margin = lhs
        .iter()
        .zip(&rhs)
        .map(|(l, r)| r - l)
        .fold(f64::INFINITY, f64::min);
    let pass = margin >= -1e-12;
    Ok(BoundCheck { lhs, rhs, w1, pass, margin })
}

/// Bound on each modulation scalar implied by the deviation bound:
/// |alpha_i| <= 2 sqrt(m) B W1 for unit readout vectors with the
/// state at its long-run average.
pub fn alpha_bound(net: &UpdateNet, w1: f64) -> f64 {
    let m = net.out_dim() as f64;
    2.0 * m.sqrt() * lipschitz_upper(net) * w1
}

/// Result of the dual lower-bound search.
#[derive(Clone, Debug)]
pub struct LowerBoundResult {
    /// Best expectation achieved by the optimized scalar update function.
    pub achieved: f64,
    /// Lipschitz bound of the optimized net (kept at or below the budget).
    pub lipschitz: f64,
    /// Distance between the distribution and its generator average.
    pub w1_gen: f64,
    /// achieved / (lipschitz * w1_gen), the fraction of the dual optimum
    /// reached; approaches 1 for a fully expressive potential.
    pub ratio: f64,
}

/// Searches for a scalar update function that witnesses the lower bound:
/// gradient ascent on E_p[l] under a Lipschitz budget, enforced by
/// rescaling the weight matrices after every step. Since
/// E_p[l] = E_p[r] - E_{p~}[r] with p~ the generator average, the
/// supremum over C-Lipschitz r is exactly C * W1(p, p~) by duality.
pub fn kantorovich_lower(
    p: &EmpiricalDistribution,
    gens: &GeneratingSet,
    rep_in: &Representation,
    rep_out: &Representation,
    budget_c: f64,
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<LowerBoundResult, RecmError> {
    let p_gen = symmetrize_generators(p, gens, rep_in, rep_out);
    let (w1_gen, _) = wasserstein1(p, &p_gen)?;
    let in_dim = p.dim();
    let rescale = |net: &UpdateNet| {
        let l = lipschitz_upper(net);
        if l > budget_c {
            let s = (budget_c / l).sqrt();
            for w in [&net.w1, &net.w2] {
                w.update_data(|d| {
                    for v in d {
                        *v *= s;
                    }
                });
            }
        }
    };
    // project the hidden weights onto orthonormal rows: with all singular
    // values equal to 1 the spectral-product bound is attained, so none of
    // the budget is lost to bound slack
    let orthonormalize = |net: &UpdateNet| {
        let h = net.w1.shape()[0];
        let m = nalgebra::DMatrix::from_row_slice(h, in_dim, &net.w1.data());
        let svd = m.svd(true, true);
        let q = svd.u.unwrap() * svd.v_t.unwrap();
        net.w1.set_data(q.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect());
        let lg = gelu_lipschitz();
        let n2 = net.w2.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if n2 * lg > budget_c {
            let s = budget_c / (n2 * lg);
            net.w2.update_data(|d| {
                for v in d {
                    *v *= s;
                }
            });
        }
    };
    // ascent stalls when hidden units die under the budget rescaling, so
    // restart from a few init scales and keep the best witness; the later
    // restarts trade width for a bound that is tight on aligned inputs
    let mut best_overall = f64::NEG_INFINITY;
    let mut best_lip = 1e-300;
    for restart in 0..18 {
        let init_scale = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0][restart % 6];
        let lr = if restart >= 6 && restart < 12 { lr * 4.0 } else { lr };
        let ortho = restart >= 12;
        let hidden = if ortho { in_dim } else { 32 };
        let net = UpdateNet::new(in_dim, hidden, 1, init_scale, rng);
        let project = |net: &UpdateNet| {
            if ortho {
                orthonormalize(net);
            } else {
                rescale(net);
            }
        };
        project(&net);
        let params = net.params();
        let mut best = f64::NEG_INFINITY;
        for step in 0..steps {
            for pm in &params {
                pm.zero_grad();
            }
            let mut obj: Option<Tensor> = None;
            for i in 0..p.support_size() {
                let z = Tensor::constant(vec![p.z_dim], p.z_part(i).to_vec());
                let y = Tensor::constant(vec![in_dim - p.z_dim], p.y_part(i).to_vec());
                let term = l_theta(&net, &z, &y, gens, rep_in, rep_out)?
                    .reshape(vec![1])
                    .sum()
                    .scale(p.weights[i]);
                obj = Some(match obj {
                    Some(o) => o.add(&term),
                    None => term,
                });
            }
            let obj = obj.unwrap();
            let val = obj.item();
            if val > best {
                best = val;
            }
            obj.backward();
            let step_lr = lr * (1.0 - step as f64 / steps as f64).max(0.05);
            for pm in &params {
                if let Some(g) = pm.grad() {
                    pm.update_data(|d| {
                        for (v, gi) in d.iter_mut().zip(&g) {
                            *v += step_lr * gi; // ascent
                        }
                    });
                }
            }
            project(&net);
        }
        // the objective is linear in w2, so for the frozen hidden layer the
        // best readout is the per-unit expectation-gap direction scaled to
        // spend the whole budget; this never lowers the achieved value
        let hidden = net.w2.shape()[1];
        net.w2.set_data(vec![0.0; hidden]);
        let mut gap = vec![0.0; hidden];
        for j in 0..hidden {
            let mut probe = vec![0.0; hidden];
            probe[j] = 1.0;
            net.w2.set_data(probe);
            gap[j] = p.expect_l(&net, gens, rep_in, rep_out)[0];
        }
        let gn = gap.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let s1 = spectral_norm(&net.w1.data(), hidden, in_dim).max(1e-300);
        let scale = budget_c / (gelu_lipschitz() * s1 * gn);
        net.w2.set_data(gap.iter().map(|v| v * scale).collect());
        rescale(&net);
        let final_val = p.expect_l(&net, gens, rep_in, rep_out)[0];
        let achieved = best.max(final_val);
        if achieved > best_overall {
            best_overall = achieved;
            best_lip = lipschitz_upper(&net).max(1e-300);
        }
    }
    let denom = (budget_c * w1_gen).max(1e-300);
    Ok(LowerBoundResult {
        achieved: best_overall,
        lipschitz: best_lip,
        w1_gen,
        ratio: best_overall / denom,
    })
}

/// Distance between a distribution and its exact symmetrization; zero
/// (up to tolerance) exactly when the distribution is group invariant.
pub fn fixed_point_gap(
    p: &EmpiricalDistribution,
    group: &FiniteGroup,
    rep_in: &Representation,
    rep_out: &Representation,
) -> f64 {
    total_variation(p, &symmetrize_full(p, group, rep_in, rep_out))
}

/// Checks invariance under every single group element, which for a
/// finite group is equivalent to being a fixed point of symmetrization.
pub fn invariant_under_each_element(
    p: &EmpiricalDistribution,
    group: &FiniteGroup,
    rep_in: &Representation,
    rep_out: &Representation,
    tol: f64,
) -> bool {
    for k in 0..group.order() {
        let g = group.element(k);
        let moved = EmpiricalDistribution {
            points: p
                .points
                .iter()
                .map(|pt| transform_atom(pt, p.z_dim, &g, rep_in, rep_out))
                .collect(),
            weights: p.weights.clone(),
            z_dim: p.z_dim,
        };
        if total_variation(p, &moved) > tol {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{c4, s3, GeneratingSet};
    use rand::SeedableRng;

    fn std_rep() -> Representation {
        Representation::Standard
    }

    #[test]
    fn gelu_lipschitz_value() {
        let l = gelu_lipschitz();
        assert!((l - 1.1289).abs() < 1e-3, "L = {l}");
        // must dominate the slope everywhere on a fine grid
        let mut x = -8.0;
        while x < 8.0 {
            assert!(gelu_deriv_scalar(x).abs() <= l + 1e-12);
            x += 7e-4;
        }
    }

    #[test]
    fn dirac_distance_is_euclidean() {
        let p = EmpiricalDistribution::dirac(vec![0.0, 0.0], 2);
        let q = EmpiricalDistribution::dirac(vec![3.0, 4.0], 2);
        let (d, plan) = wasserstein1(&p, &q).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        assert!(plan.marginal_error(&p, &q) < 1e-12);
    }

    #[test]
    fn point_mass_to_c4_orbit() {
        // mass at (1,0) against the uniform distribution on its C4 orbit:
        // keep 1/4 in place, move 1/4 to each of (0,1), (0,-1) at sqrt(2),
        // and 1/4 to (-1,0) at 2. Optimal cost (2 + 2 sqrt(2)) / 4.
        let p = EmpiricalDistribution::dirac(vec![1.0, 0.0], 2);
        let g = c4();
        let q = symmetrize_full(&p, &g, &std_rep(), &Representation::Trivial(0));
        assert_eq!(q.support_size(), 4);
        let (d, plan) = wasserstein1(&p, &q).unwrap();
        let expect = (2.0 + 2.0 * std::f64::consts::SQRT_2) / 4.0;
        assert!((d - expect).abs() < 1e-12, "d = {d}, want {expect}");
        assert!(plan.marginal_error(&p, &q) < 1e-12);
    }

    #[test]
    fn w1_metric_axioms() {
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..20 {
            let rnd_dist = |rng: &mut Rng| {
                let n = rand::Rng::gen_range(rng, 2..6);
                let pts: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..2).map(|_| rand::Rng::gen_range(rng, -2.0..2.0)).collect())
                    .collect();
                EmpiricalDistribution::uniform(pts, 2).unwrap()
            };
            let p = rnd_dist(&mut rng);
            let q = rnd_dist(&mut rng);
            let r = rnd_dist(&mut rng);
            let (dpq, _) = wasserstein1(&p, &q).unwrap();
            let (dqp, _) = wasserstein1(&q, &p).unwrap();
            let (dpr, _) = wasserstein1(&p, &r).unwrap();
            let (drq, _) = wasserstein1(&r, &q).unwrap();
            let (dpp, _) = wasserstein1(&p, &p).unwrap();
            assert!(dpp.abs() < 1e-10, "self distance {dpp}");
            assert!((dpq - dqp).abs() < 1e-9, "asymmetry {dpq} vs {dqp}");
            assert!(dpq <= dpr + drq + 1e-9, "triangle violated");
            assert!(dpq >= 0.0);
        }
    }

    #[test]
    fn w1_greedy_upper_bound_never_beaten() {
        // the exact optimum can never exceed the cost of an arbitrary
        // feasible plan (here: independent coupling)
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rand::Rng::gen_range(&mut rng, 2..5);
            let m = rand::Rng::gen_range(&mut rng, 2..5);
            let mk = |k: usize, rng: &mut Rng| {
                let pts: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..3).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect())
                    .collect();
                EmpiricalDistribution::uniform(pts, 3).unwrap()
            };
            let p = mk(n, &mut rng);
            let q = mk(m, &mut rng);
            let mut product_cost = 0.0;
            for i in 0..n {
                for j in 0..m {
                    product_cost += p.weights[i] * q.weights[j] * euclidean(&p.points[i], &q.points[j]);
                }
            }
            let (d, plan) = wasserstein1(&p, &q).unwrap();
            assert!(d <= product_cost + 1e-10);
            assert!(plan.marginal_error(&p, &q) < 1e-10);
            // and matches the cost recomputed from the plan
            let recomputed: f64 = plan
                .flows
                .iter()
                .map(|&(i, j, f)| f * euclidean(&p.points[i], &q.points[j]))
                .sum();
            assert!((recomputed - d).abs() < 1e-10);
        }
    }

    #[test]
    fn budget_enforced() {
        let pts: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64]).collect();
        let p = EmpiricalDistribution::uniform(pts.clone(), 1).unwrap();
        let q = EmpiricalDistribution::uniform(pts, 1).unwrap();
        match wasserstein1(&p, &q) {
            Err(RecmError::SupportBudget { got, budget }) => {
                assert_eq!(got, 3600);
                assert_eq!(budget, W1_PAIR_BUDGET);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn symmetrize_is_idempotent_and_invariant() {
        let mut rng = Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let p = EmpiricalDistribution::uniform(pts, 2).unwrap();
        let g = c4();
        let sym = symmetrize_full(&p, &g, &std_rep(), &Representation::Trivial(0));
        let sym2 = symmetrize_full(&sym, &g, &std_rep(), &Representation::Trivial(0));
        assert!(total_variation(&sym, &sym2) < 1e-12);
        assert!(invariant_under_each_element(&sym, &g, &std_rep(), &Representation::Trivial(0), 1e-12));
        assert!(fixed_point_gap(&sym, &g, &std_rep(), &Representation::Trivial(0)) < 1e-12);
        // the original generic cloud is not invariant
        assert!(fixed_point_gap(&p, &g, &std_rep(), &Representation::Trivial(0)) > 1e-3);
    }

    #[test]
    fn generator_average_contracts_distance() {
        // averaging over generators can only bring a distribution closer
        // to the fully symmetrized one
        let mut rng = Rng::seed_from_u64(3);
        let gens = GeneratingSet::canonical_for("C4").unwrap();
        let g = c4();
        for _ in 0..10 {
            let pts: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
                .collect();
            let p = EmpiricalDistribution::uniform(pts, 2).unwrap();
            let pg = symmetrize_full(&p, &g, &std_rep(), &Representation::Trivial(0));
            let pc = symmetrize_generators(&p, &gens, &std_rep(), &Representation::Trivial(0));
            let (d_p, _) = wasserstein1(&p, &pg).unwrap();
            let (d_c, _) = wasserstein1(&pc, &pg).unwrap();
            assert!(d_c <= d_p + 1e-10);
        }
    }

    #[test]
    fn spectral_norm_known_values() {
        // diag(3, 1) has norm 3
        assert!((spectral_norm(&[3.0, 0.0, 0.0, 1.0], 2, 2) - 3.0).abs() < 1e-7);
        // rank-one uv^T has norm |u||v|
        let u = [1.0, 2.0];
        let v = [2.0, 1.0, 2.0];
        let mut a = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                a[i * 3 + j] = u[i] * v[j];
            }
        }
        let expect = (5.0f64).sqrt() * 3.0;
        assert!((spectral_norm(&a, 2, 3) - expect).abs() < 1e-7);
        assert_eq!(spectral_norm(&[0.0; 4], 2, 2), 0.0);
    }

    #[test]
    fn lipschitz_upper_dominates_sampled_slopes() {
        let mut rng = Rng::seed_from_u64(4);
        let net = UpdateNet::new(3, 16, 16, 1.5, &mut rng);
        let bound = lipschitz_upper(&net);
        let coords = lipschitz_upper_coords(&net);
        assert!(coords.iter().all(|c| *c <= bound + 1e-9));
        for _ in 0..500 {
            let x: Vec<f64> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let mut dir: Vec<f64> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for d in &mut dir {
                *d /= n;
            }
            let h = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let fa = UpdateFn::eval(&net, &x);
            let fb = UpdateFn::eval(&net, &xp);
            let slope = fa
                .iter()
                .zip(&fb)
                .map(|(a, b)| ((b - a) / h).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(slope <= bound * (1.0 + 1e-6), "slope {slope} exceeds bound {bound}");
            for (i, (a, b)) in fa.iter().zip(&fb).enumerate() {
                assert!(((b - a) / h).abs() <= coords[i] * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn upper_bound_holds_for_random_nets() {
        let mut rng = Rng::seed_from_u64(5);
        let gens = GeneratingSet::canonical_for("C4").unwrap();
        let g = c4();
        for trial in 0..25 {
            let net = UpdateNet::new(4, 16, 16, 1.0 + (trial % 3) as f64, &mut rng);
            let pts: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..4).map(|_| rand::Rng::gen_range(&mut rng, -1.5..1.5)).collect())
                .collect();
            let p = EmpiricalDistribution::uniform(pts, 2).unwrap();
            let check = verify_upper_bound(&net, &p, &g, &gens, &std_rep(), &std_rep()).unwrap();
            assert!(check.pass, "bound violated: margin {}", check.margin);
        }
    }

    #[test]
    fn expectation_vanishes_on_invariant_distribution() {
        let mut rng = Rng::seed_from_u64(6);
        let g = s3();
        let gens = GeneratingSet::canonical_for("S3").unwrap();
        let net = UpdateNet::new(6, 16, 16, 1.0, &mut rng);
        let pts: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let p = EmpiricalDistribution::uniform(pts, 3).unwrap();
        let p_sym = symmetrize_full(&p, &g, &std_rep(), &std_rep());
        // note: the generator average of an invariant distribution is the
        // distribution itself, so E[l] telescopes to exactly zero
        let e = p_sym.expect_l(&net, &GeneratingSet::full(&g), &std_rep(), &std_rep());
        let maxabs = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(maxabs < 1e-12, "max |E[l]| = {maxabs}");
        // the canonical (non-full) generating set must vanish too
        let e2 = p_sym.expect_l(&net, &gens, &std_rep(), &std_rep());
        let maxabs2 = e2.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(maxabs2 < 1e-12);
    }

    #[test]
    fn lower_bound_search_reaches_half_the_dual_optimum() {
        let mut rng = Rng::seed_from_u64(7);
        // strongly asymmetric distribution under C4
        let p = EmpiricalDistribution::uniform(
            vec![vec![1.0, 0.2, 0.0, 0.0], vec![1.2, -0.1, 0.0, 0.0]],
            2,
        )
        .unwrap();
        let gens = GeneratingSet::canonical_for("C4").unwrap();
        let res = kantorovich_lower(&p, &gens, &std_rep(), &std_rep(), 1.0, 300, 0.05, &mut rng).unwrap();
        assert!(res.w1_gen > 0.1, "distribution should be visibly asymmetric");
        assert!(res.lipschitz <= 1.0 + 1e-9);
        assert!(res.ratio >= 0.5, "ratio {} too small (achieved {})", res.ratio, res.achieved);
        assert!(res.achieved <= res.lipschitz * res.w1_gen * (1.0 + 1e-6) + 1e-9, "dual bound violated");
    }

    #[test]
    fn total_variation_basics() {
        let p = EmpiricalDistribution::dirac(vec![0.0], 1);
        let q = EmpiricalDistribution::dirac(vec![1.0], 1);
        assert_eq!(total_variation(&p, &p), 0.0);
        assert!((total_variation(&p, &q) - 1.0).abs() < 1e-15);
        let half = EmpiricalDistribution::new(
            vec![vec![0.0], vec![1.0]],
            vec![0.5, 0.5],
            1,
        )
        .unwrap();
        assert!((total_variation(&p, &half) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distribution_contract_errors() {
        assert!(EmpiricalDistribution::new(vec![], vec![], 0).is_err());
        assert!(EmpiricalDistribution::new(vec![vec![1.0]], vec![0.5], 1).is_err());
        assert!(EmpiricalDistribution::new(vec![vec![1.0], vec![2.0, 3.0]], vec![0.5, 0.5], 1).is_err());
        assert!(EmpiricalDistribution::new(vec![vec![1.0], vec![2.0]], vec![1.5, -0.5], 1).is_err());
    }

    #[test]
    fn atom_merging() {
        let mut p = EmpiricalDistribution {
            points: vec![vec![1.0], vec![1.0 + 1e-12], vec![2.0]],
            weights: vec![0.25, 0.25, 0.5],
            z_dim: 1,
        };
        p.normalize();
        assert_eq!(p.support_size(), 2);
        assert!((p.weights[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_symmetrization_shrinks_gap() {
        let mut rng = Rng::seed_from_u64(8);
        let p = EmpiricalDistribution::dirac(vec![1.0, 0.0], 2);
        let q = symmetrize_sampled(
            &p,
            &Group::by_name("SO2").unwrap(),
            &std_rep(),
            &Representation::Trivial(0),
            40,
            &mut rng,
        );
        // the sampled average stays on the unit circle and its mean drifts
        // toward the origin
        let mean: Vec<f64> = (0..2)
            .map(|j| q.points.iter().zip(&q.weights).map(|(pt, w)| pt[j] * w).sum())
            .collect();
        let mean_norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!(mean_norm < 0.5, "mean norm {mean_norm}");
        for pt in &q.points {
            assert!(((pt[0] * pt[0] + pt[1] * pt[1]).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}
