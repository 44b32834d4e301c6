//! Variance-exploding SDE: schedule, forward perturbation, denoising targets,
//! Euler–Maruyama reverse steps and adjacency quantization.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::AugmentedGraph;
use crate::matrix::Matrix;
use crate::rng::NoiseSource;

/// Binary edges enter the diffusion at this value.
pub const ADJ_SCALE: f64 = 6.0;
/// Relaxed entries at or above this value quantize to an edge.
pub const ADJ_THRESHOLD: f64 = 3.0;
/// Smallest diffusion time sampled during training.
pub const T_EPS: f64 = 1e-3;

/// Geometric noise schedule `σ(t) = σ_min (σ_max/σ_min)^t` on `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_steps: usize,
}

impl Default for VeSchedule {
    fn default() -> Self {
        VeSchedule {
            sigma_min: 0.001,
            sigma_max: 0.01,
            t_steps: 50,
        }
    }
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, t_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < sigma_min ({sigma_min}) < sigma_max ({sigma_max})"
            )));
        }
        if t_steps == 0 {
            return Err(Error::invalid("t_steps must be positive"));
        }
        Ok(VeSchedule {
            sigma_min,
            sigma_max,
            t_steps,
        })
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            self.sigma_min * (t * self.log_ratio()).exp()
        }
    }

    /// `σ(t)² − σ(0)²`: variance accumulated from time 0.
    pub fn marginal_var(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.marginal_var_unchecked(t))
    }

    pub(crate) fn marginal_var_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * self.sigma_min * (2.0 * t * self.log_ratio()).exp_m1()
    }

    /// Variance added between `t1` and `t2 ≥ t1`.
    pub fn transition_var(&self, t1: f64, t2: f64) -> Result<f64> {
        if t2 < t1 {
            return Err(Error::invalid(format!("transition from {t1} back to {t2}")));
        }
        Ok(self.marginal_var(t2)? - self.marginal_var(t1)?)
    }

    /// Squared diffusion coefficient `dσ²/dt = 2 ln(σ_max/σ_min) σ(t)²`.
    pub fn g2(&self, t: f64) -> f64 {
        let s = self.sigma_unchecked(t);
        2.0 * self.log_ratio() * s * s
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.t_steps as f64
    }
}

/// Uniform subset of `round(alpha·n)` nodes, sorted ascending.
pub fn select_subset<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let k = ((alpha * n as f64).round() as usize).min(n);
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Membership mask for `subset`.
pub fn subset_mask(n: usize, subset: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::invalid(format!("subset index {i} out of range for {n} nodes")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

/// Noisy graph at diffusion time `t`. Only subset rows of `xt` and adjacency
/// entries incident to the subset differ from the clean graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub xt: Matrix,
    pub at: Matrix,
    pub t: f64,
    pub subset: Vec<usize>,
    mask: Vec<bool>,
}

impl DiffusionState {
    pub fn new(xt: Matrix, at: Matrix, t: f64, subset: Vec<usize>) -> Result<Self> {
        let n = xt.rows();
        if at.shape() != (n, n) {
            return Err(Error::shape("DiffusionState", format!("{n} rows, adjacency {:?}", at.shape())));
        }
        VeSchedule::check_t(t)?;
        let mask = subset_mask(n, &subset)?;
        Ok(DiffusionState {
            xt,
            at,
            t,
            subset,
            mask,
        })
    }

    /// The clean graph as a state at `t = 0`.
    pub fn clean(g0: &AugmentedGraph, subset: Vec<usize>) -> Result<Self> {
        DiffusionState::new(g0.xt.clone(), g0.adjacency.clone(), 0.0, subset)
    }

    pub fn n(&self) -> usize {
        self.xt.rows()
    }

    pub fn in_subset(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Whether adjacency entry (u, v) participates in the diffusion.
    pub fn is_active(&self, u: usize, v: usize) -> bool {
        u != v && (self.mask[u] || self.mask[v])
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    /// Adds independent `N(0, var)` noise to every active coordinate.
    fn add_noise<N: NoiseSource + ?Sized>(&mut self, std: f64, noise: &mut N) {
        let n = self.n();
        for &i in &self.subset {
            for v in self.xt.row_mut(i) {
                *v += std * noise.next_normal();
            }
        }
        for u in 0..n {
            for v in u + 1..n {
                if self.mask[u] || self.mask[v] {
                    let a = self.at[(u, v)] + std * noise.next_normal();
                    self.at[(u, v)] = a;
                    self.at[(v, u)] = a;
                }
            }
        }
    }

    /// Conditional forward step from the current time to `t2`.
    pub fn advance<N: NoiseSource + ?Sized>(&self, t2: f64, s: &VeSchedule, noise: &mut N) -> Result<Self> {
        let var = s.transition_var(self.t, t2)?;
        let mut out = self.clone();
        out.add_noise(var.sqrt(), noise);
        out.t = t2;
        Ok(out)
    }
}

/// Closed-form forward marginal at time `t` on the selected nodes.
pub fn perturb<N: NoiseSource + ?Sized>(
    g0: &AugmentedGraph,
    t: f64,
    subset: &[usize],
    s: &VeSchedule,
    noise: &mut N,
) -> Result<DiffusionState> {
    let var = s.marginal_var(t)?;
    let mut state = DiffusionState::clean(g0, subset.to_vec())?;
    state.add_noise(var.sqrt(), noise);
    state.t = t;
    Ok(state)
}

/// Denoising target `−(xt − x0)/Var(t)`.
pub fn score_target(x0: f64, xt: f64, t: f64, s: &VeSchedule) -> Result<f64> {
    let var = s.marginal_var(t)?;
    if var <= 0.0 {
        return Err(Error::invalid("score target undefined at t = 0"));
    }
    Ok(-(xt - x0) / var)
}

/// Elementwise [`score_target`].
pub fn score_target_matrix(x0: &Matrix, xt: &Matrix, t: f64, s: &VeSchedule) -> Result<Matrix> {
    let var = s.marginal_var(t)?;
    if var <= 0.0 {
        return Err(Error::invalid("score target undefined at t = 0"));
    }
    xt.zip_map(x0, |a, b| -(a - b) / var)
}

fn check_field(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::shape("reverse_step", format!("{name} is {:?}, expected {shape:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

/// Drift fields for one reverse step. Guides are optional.
#[derive(Debug, Clone, Copy)]
pub struct Drift<'a> {
    pub feat_score: &'a Matrix,
    pub adj_score: &'a Matrix,
    pub feat_guide: Option<&'a Matrix>,
    pub adj_guide: Option<&'a Matrix>,
}

/// One Euler–Maruyama step of the reverse SDE from `t` to `t − dt`:
/// `x ← x + g²(t)(score + guide)·dt + g(t)·√dt·z` on the active coordinates.
pub fn reverse_step<N: NoiseSource + ?Sized>(
    state: &DiffusionState,
    dt: f64,
    drift: Drift<'_>,
    s: &VeSchedule,
    noise: &mut N,
) -> Result<DiffusionState> {
    if !(dt > 0.0) || dt > state.t + 1e-12 {
        return Err(Error::invalid(format!("step {dt} invalid at t = {}", state.t)));
    }
    let n = state.n();
    let w = state.xt.cols();
    check_field("feature score", drift.feat_score, (n, w))?;
    check_field("adjacency score", drift.adj_score, (n, n))?;
    if let Some(g) = drift.feat_guide {
        check_field("feature guidance", g, (n, w))?;
    }
    if let Some(g) = drift.adj_guide {
        check_field("adjacency guidance", g, (n, n))?;
    }

    let g2 = s.g2(state.t);
    let diffusion = (g2 * dt).sqrt();
    let mut out = state.clone();
    for &i in &state.subset {
        let score = drift.feat_score.row(i);
        let guide = drift.feat_guide.map(|g| g.row(i));
        for (j, x) in out.xt.row_mut(i).iter_mut().enumerate() {
            let mut d = score[j];
            if let Some(g) = guide {
                d += g[j];
            }
            *x += g2 * d * dt + diffusion * noise.next_normal();
        }
    }
    for u in 0..n {
        for v in u + 1..n {
            if !(state.mask[u] || state.mask[v]) {
                continue;
            }
            let mut d = 0.5 * (drift.adj_score[(u, v)] + drift.adj_score[(v, u)]);
            if let Some(g) = drift.adj_guide {
                d += 0.5 * (g[(u, v)] + g[(v, u)]);
            }
            let a = state.at[(u, v)] + g2 * d * dt + diffusion * noise.next_normal();
            out.at[(u, v)] = a;
            out.at[(v, u)] = a;
        }
    }
    out.t = (state.t - dt).max(0.0);
    Ok(out)
}

/// Entries `≥ ADJ_THRESHOLD` become edges; the diagonal is cleared.
pub fn quantize_adjacency(at: &Matrix) -> Result<Matrix> {
    at.ensure_finite("relaxed adjacency")?;
    let mut q = at.map(|v| if v >= ADJ_THRESHOLD { 1.0 } else { 0.0 });
    q.zero_diagonal();
    Ok(q)
}

/// Maps a binary adjacency onto the diffusion scale.
pub fn scale_adjacency(a: &Matrix) -> Matrix {
    a.scale(ADJ_SCALE)
}

/// An augmented graph with its adjacency rescaled for diffusion.
pub fn to_diffusion_scale(g: &AugmentedGraph) -> AugmentedGraph {
    AugmentedGraph {
        adjacency: scale_adjacency(&g.adjacency),
        ..g.clone()
    }
}
