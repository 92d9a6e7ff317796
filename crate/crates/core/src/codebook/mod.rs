//! The vulnerability codebook: entropic optimal transport between scope
//! vectors and centroids, cross-attention centroid selection, and the
//! straight-through quantisation step.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffcore::rng::{purpose, RngStream};
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

/// `k×h` grid of centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(Error::Config("codebook needs k, h >= 1".into()));
        }
        if centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite codebook entry".into()));
        }
        Ok(Codebook { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn h(&self) -> usize {
        self.centroids.ncols()
    }

    /// Row `j` as a `1×h` view.
    pub fn centroid(&self, j: usize) -> ArrayView2<'_, f64> {
        self.centroids.slice(s![j..j + 1, ..])
    }

    /// Same centroids in the order given by `perm` (row `i` of the result is
    /// old row `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Codebook {
            centroids: self.centroids.select(Axis(0), perm),
        }
    }
}

/// Entries drawn from N(0, 1/√h).
pub fn init_codebook(k: usize, h: usize, seed: u64) -> Result<Codebook> {
    if k == 0 || h == 0 {
        return Err(Error::Config(format!("codebook shape {k}x{h} must be positive")));
    }
    let mut rng = RngStream::new(seed, purpose::CODEBOOK);
    let std = 1.0 / (h as f64).sqrt();
    Codebook::new(Array2::from_shape_simple_fn((k, h), || rng.normal(0.0, std)))
}

/// Factorised scope vectors of vulnerable training functions, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct VulnerabilityCollection {
    pub ids: Vec<String>,
    pub vectors: Array2<f64>,
}

impl VulnerabilityCollection {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// For each centroid, the ids of the `top` nearest collection rows
    /// (squared Euclidean), nearest first.
    pub fn nearest_per_centroid(&self, codebook: &Codebook, top: usize) -> Vec<Vec<(String, f64)>> {
        let cost = squared_distances(self.vectors.view(), codebook.centroids.view());
        (0..codebook.k())
            .map(|j| {
                let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, cost[[i, j]])).collect();
                scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                scored
                    .into_iter()
                    .take(top)
                    .map(|(i, c)| (self.ids[i].clone(), c))
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L1 row-marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("sinkhorn epsilon {} must be > 0", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transport {
    /// Regularised cost `<π, C> + ε·KL(π ‖ a⊗b)`.
    pub distance: f64,
    /// The unregularised part `<π, C>`.
    pub transport_cost: f64,
    pub plan: Array2<f64>,
    pub iterations: usize,
    /// L1 distance of the plan's row and column sums from the targets.
    pub marginal_error: f64,
    pub converged: bool,
}

pub fn squared_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    out
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

const ANNEAL_SWEEPS: usize = 8;

/// Entropic OT between the uniform distributions on the rows of `vb` (`m×h`)
/// and of `c` (`k×h`) under squared Euclidean cost, solved with log-domain
/// Sinkhorn iterations on the dual potentials.
pub fn sinkhorn_distance(vb: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>, cfg: &SinkhornConfig) -> Result<Transport> {
    cfg.validate()?;
    let (m, k) = (vb.nrows(), c.nrows());
    if m == 0 || k == 0 {
        return Err(Error::Usage("sinkhorn needs at least one point on each side".into()));
    }
    if vb.ncols() != c.ncols() {
        return Err(Error::dim("sinkhorn_distance", &[m, vb.ncols()], &[k, c.ncols()]));
    }
    let cost = squared_distances(vb, c);
    if let Some(bad) = cost.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite transport cost {bad}")));
    }
    let eps = cfg.epsilon;
    let (log_a, log_b) = (-(m as f64).ln(), -(k as f64).ln());
    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(k);

    let sweep = |f: &mut Array1<f64>, g: &mut Array1<f64>, eps: f64| {
        for i in 0..m {
            f[i] = -eps * log_sum_exp((0..k).map(|j| (g[j] - cost[[i, j]]) / eps + log_b));
        }
        for j in 0..k {
            g[j] = -eps * log_sum_exp((0..m).map(|i| (f[i] - cost[[i, j]]) / eps + log_a));
        }
    };
    let row_error = |f: &Array1<f64>, g: &Array1<f64>| -> f64 {
        (0..m)
            .map(|i| {
                let mass: f64 = (0..k)
                    .map(|j| ((f[i] + g[j] - cost[[i, j]]) / eps + log_a + log_b).exp())
                    .sum();
                (mass - 1.0 / m as f64).abs()
            })
            .sum()
    };

    // Epsilon scaling: warm-start the potentials on a geometric ladder of
    // coarser regularisations, which leaves the fixed point unchanged but
    // cuts the iteration count sharply when eps is small against the costs.
    let mut iterations = 0;
    let top = cost.iter().copied().fold(0.0, f64::max);
    let mut stage = top;
    while stage > 2.0 * eps {
        for _ in 0..ANNEAL_SWEEPS {
            sweep(&mut f, &mut g, stage);
        }
        iterations += ANNEAL_SWEEPS;
        stage *= 0.5;
    }

    let mut err = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        sweep(&mut f, &mut g, eps);
        // Columns are exact after the g update; rows carry the violation.
        err = row_error(&f, &g);
        if err < cfg.tol {
            break;
        }
    }

    let plan = Array2::from_shape_fn((m, k), |(i, j)| {
        ((f[i] + g[j] - cost[[i, j]]) / eps + log_a + log_b).exp()
    });
    let transport_cost: f64 = (&plan * &cost).sum();
    let mut kl = 1.0 - plan.sum();
    for p in plan.iter() {
        if *p > 0.0 {
            kl += p * (p.ln() - log_a - log_b);
        }
    }
    let col_err: f64 = plan
        .sum_axis(Axis(0))
        .iter()
        .map(|s| (s - 1.0 / k as f64).abs())
        .sum();
    let distance = transport_cost + eps * kl;
    if !distance.is_finite() {
        return Err(Error::Numeric(format!("sinkhorn produced distance {distance}")));
    }
    Ok(Transport {
        distance,
        transport_cost,
        plan,
        iterations,
        marginal_error: err + col_err,
        converged: err < cfg.tol,
    })
}

/// Gradients of the regularised distance at a converged plan (envelope
/// theorem): the plan is held fixed and only the cost is differentiated.
pub fn transport_gradients(
    vb: ArrayView2<'_, f64>,
    c: ArrayView2<'_, f64>,
    plan: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let row_mass = plan.sum_axis(Axis(1)).insert_axis(Axis(1));
    let col_mass = plan.sum_axis(Axis(0)).insert_axis(Axis(1));
    let grad_v = (&vb * &row_mass - plan.dot(&c)) * 2.0;
    let grad_c = (&c * &col_mass - plan.t().dot(&vb)) * 2.0;
    (grad_v, grad_c)
}

/// Records the regularised distance on `tape` so that backward delivers the
/// envelope gradients to both `vb` and `c`.
pub fn sinkhorn_on_tape(tape: &mut Tape<'_>, vb: Var, c: Var, cfg: &SinkhornConfig) -> Result<(Var, Transport)> {
    let t = sinkhorn_distance(tape.value(vb).view(), tape.value(c).view(), cfg)?;
    let h = tape.shape(vb)[1];
    let row_mass = t.plan.sum_axis(Axis(1));
    let col_mass = t.plan.sum_axis(Axis(0));
    let row_w = tape.constant(Array2::from_shape_fn((row_mass.len(), h), |(i, _)| row_mass[i]));
    let col_w = tape.constant(Array2::from_shape_fn((col_mass.len(), h), |(j, _)| col_mass[j]));
    let plan = tape.constant(t.plan.clone());

    let vv = tape.mul(vb, vb)?;
    let vv = tape.mul(vv, row_w)?;
    let vv = tape.sum(vv)?;
    let cc = tape.mul(c, c)?;
    let cc = tape.mul(cc, col_w)?;
    let cc = tape.sum(cc)?;
    let cross = tape.matmul_t(vb, c)?;
    let cross = tape.mul(cross, plan)?;
    let cross = tape.sum(cross)?;
    let cross = tape.scale(cross, -2.0)?;
    let quad = tape.add(vv, cc)?;
    let quad = tape.add(quad, cross)?;
    let entropy = tape.constant(Array2::from_elem((1, 1), t.distance - t.transport_cost));
    let total = tape.add(quad, entropy)?;
    Ok((total, t))
}

/// Borrowed selection projections (`h×h` each).
#[derive(Clone, Copy, Debug)]
pub struct SelectionWeights<'a> {
    pub w_q: &'a Array2<f64>,
    pub w_k: &'a Array2<f64>,
    pub w_v: &'a Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    /// Attention scores over centroids, after dropout when training.
    pub scores: Vec<f64>,
    /// `scores · (C W^V)`, carried for inspection.
    pub attended: Array2<f64>,
}

/// Cross-attention from a `1×h` scope vector to the codebook; the chosen
/// centroid is the highest score, lowest index on ties.
pub fn select_centroid(
    v: ArrayView2<'_, f64>,
    codebook: &Codebook,
    weights: SelectionWeights<'_>,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<Selection> {
    let h = codebook.h();
    if v.dim() != (1, h) {
        return Err(Error::dim("select_centroid", &[v.nrows(), v.ncols()], &[1, h]));
    }
    let q = v.dot(weights.w_q);
    let keys = codebook.centroids.dot(weights.w_k);
    let logits = q.dot(&keys.t());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let mut scores: Vec<f64> = exp.iter().map(|e| e / total).collect();
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let keep = 1.0 - rate;
            for s in scores.iter_mut() {
                *s = if rng.uniform() < rate { 0.0 } else { *s / keep };
            }
        }
    }
    let mut index = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = j;
        }
    }
    let values = codebook.centroids.dot(weights.w_v);
    let attended = Array2::from_shape_vec((1, scores.len()), scores.clone())
        .expect("row of scores")
        .dot(&values);
    Ok(Selection {
        index,
        scores,
        attended,
    })
}

/// Forward value `c_star`, gradient passed to `v` untouched.
pub fn straight_through(tape: &mut Tape<'_>, v: Var, c_star: ArrayView2<'_, f64>) -> Result<Var> {
    tape.straight_through(v, c_star)
}

#[cfg(test)]
mod tests;
