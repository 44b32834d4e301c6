//! Domain classifier, density-ratio estimation and the guidance networks.
//!
//! The classifier separates source nodes (label 1) from target nodes and
//! turns its output `y` into the ratio `(1 − y)/y`. Two row-wise regressors
//! then learn that ratio from noisy states: `Q1` from a row of the augmented
//! features and `Q2` from a row of the relaxed adjacency. The guidance added
//! to the reverse drift is `∇ log Q`.

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{hcat, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{AugmentedGraph, Graph};
use crate::matrix::Matrix;
use crate::nn::{self, bind, Adam, Gcn, Head, Mlp, Params};
use crate::rng::{stream, DiffRng};
use crate::sde::{perturb, select_subset, DiffusionState, VeSchedule, T_EPS};

/// Classifier outputs are clamped to `[CLF_EPS, 1 − CLF_EPS]`.
pub const CLF_EPS: f64 = 1e-4;

/// `(1 − y)/y` with `y` clamped.
pub fn ratio_from_y(y: f64) -> f64 {
    let y = y.clamp(CLF_EPS, 1.0 - CLF_EPS);
    (1.0 - y) / y
}

/// Each undirected edge survives independently with probability `keep`.
pub fn drop_edges<R: Rng + ?Sized>(edges: &[(usize, usize)], keep: f64, rng: &mut R) -> Vec<(usize, usize)> {
    edges
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < keep)
        .collect()
}

/// GCN encoder plus a sigmoid readout; `y` is the probability that a node
/// comes from the source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    pub gnn: Gcn,
    pub readout: Mlp,
    /// Input standardization.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Edge keep probability of the Monte Carlo draws.
    pub keep_prob: f64,
}

impl DomainClassifier {
    pub fn new<R: Rng + ?Sized>(f: usize, hidden: usize, layers: usize, keep_prob: f64, rng: &mut R) -> Self {
        let gnn = Gcn::new(f, hidden, layers, 0.0, rng);
        let readout = Mlp::new(&[hidden, hidden, 1], Head::Sigmoid, rng);
        DomainClassifier {
            gnn,
            readout,
            mean: vec![0.0; f],
            std: vec![1.0; f],
            keep_prob,
        }
    }

    pub fn f(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &Matrix) -> Matrix {
        let mut z = x.clone();
        for r in 0..z.rows() {
            for ((v, m), s) in z.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        z
    }

    fn logits<'t>(&self, p: &[Var<'t>], features: &Matrix, edges: &[(usize, usize)]) -> Var<'t> {
        let tape = p[0].tape();
        let (p_gnn, p_out) = p.split_at(self.gnn.num_tensors());
        let x = tape.constant(self.standardize(features));
        let prop = Rc::new(nn::propagation_from_edges(features.rows(), edges));
        let states = self.gnn.forward::<DiffRng>(p_gnn, x, &prop, None);
        self.readout.forward_logits(p_out, *states.last().expect("at least one layer"))
    }

    fn check(&self, features: &Matrix, adjacency: &Matrix) -> Result<()> {
        if features.cols() != self.f() {
            return Err(Error::shape(
                "domain classifier",
                format!("feature width {} vs {}", features.cols(), self.f()),
            ));
        }
        if adjacency.shape() != (features.rows(), features.rows()) {
            return Err(Error::shape("domain classifier", "adjacency is not n x n"));
        }
        Ok(())
    }

    /// `y` for every node of the graph `(features, adjacency)`.
    pub fn predict(&self, features: &Matrix, adjacency: &Matrix) -> Result<Vec<f64>> {
        self.check(features, adjacency)?;
        Ok(self.predict_edges(features, &nn::edge_list(adjacency)))
    }

    fn predict_edges(&self, features: &Matrix, edges: &[(usize, usize)]) -> Vec<f64> {
        let tape = Tape::new();
        let p: Vec<Var> = self.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
        let z = self.logits(&p, features, edges).value();
        z.as_slice().iter().map(|&v| crate::autodiff::sigmoid(v)).collect()
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_scalar(format!("{prefix}.meta.f"), self.f() as f64);
        ck.insert_scalar(format!("{prefix}.meta.hidden"), self.gnn.hidden() as f64);
        ck.insert_scalar(format!("{prefix}.meta.layers"), self.gnn.layers() as f64);
        ck.insert_scalar(format!("{prefix}.meta.keep_prob"), self.keep_prob);
        ck.insert(format!("{prefix}.meta.mean"), Matrix::row_vector(&self.mean));
        ck.insert(format!("{prefix}.meta.std"), Matrix::row_vector(&self.std));
        ck.insert_params(&format!("{prefix}.gnn"), &self.gnn);
        ck.insert_params(&format!("{prefix}.readout"), &self.readout);
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let f = ck.usize(&format!("{prefix}.meta.f"))?;
        let mut c = DomainClassifier::new(
            f,
            ck.usize(&format!("{prefix}.meta.hidden"))?,
            ck.usize(&format!("{prefix}.meta.layers"))?,
            ck.scalar(&format!("{prefix}.meta.keep_prob"))?,
            &mut stream(0, 0),
        );
        c.mean = ck.get(&format!("{prefix}.meta.mean"))?.as_slice().to_vec();
        c.std = ck.get(&format!("{prefix}.meta.std"))?.as_slice().to_vec();
        if c.mean.len() != f || c.std.len() != f {
            return Err(Error::Checkpoint("classifier standardization width".into()));
        }
        ck.restore_params(&format!("{prefix}.gnn"), &mut c.gnn)?;
        ck.restore_params(&format!("{prefix}.readout"), &mut c.readout)?;
        Ok(c)
    }
}

impl Params for DomainClassifier {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.gnn.tensors();
        out.extend(self.readout.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.gnn.tensors_mut();
        out.extend(self.readout.tensors_mut());
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.gnn.tensor_names().into_iter().map(|n| format!("gnn.{n}")).collect();
        out.extend(self.readout.tensor_names().into_iter().map(|n| format!("readout.{n}")));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Nodes drawn with replacement from each domain per step.
    pub batch: usize,
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 16,
            layers: 1,
            epochs: 200,
            lr: 1e-2,
            batch: 256,
            keep_prob: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub final_loss: f64,
    pub mean_y_source: f64,
    pub mean_y_target: f64,
}

/// Fits a classifier separating `source` nodes (label 1) from `target`
/// nodes (label 0) with balanced cross-entropy.
pub fn train_domain_classifier(
    source: &Graph,
    target: &Graph,
    cfg: &ClassifierConfig,
) -> Result<(DomainClassifier, ClassifierReport)> {
    if source.n() == 0 || target.n() == 0 {
        return Err(Error::invalid("domain classifier needs nonempty graphs"));
    }
    if source.f() != target.f() {
        return Err(Error::shape(
            "train_domain_classifier",
            format!("feature widths {} and {}", source.f(), target.f()),
        ));
    }
    if !(cfg.keep_prob > 0.0 && cfg.keep_prob <= 1.0) {
        return Err(Error::invalid("edge keep probability must be in (0, 1]"));
    }
    let mut rng = stream(cfg.seed, 0);
    let mut clf = DomainClassifier::new(source.f(), cfg.hidden, cfg.layers.max(1), cfg.keep_prob, &mut rng);
    let pooled = Matrix::from_vec(
        source.n() + target.n(),
        source.f(),
        source
            .features()
            .as_slice()
            .iter()
            .chain(target.features().as_slice())
            .copied()
            .collect(),
    )?;
    let (mean, std) = pooled.column_stats();
    clf.mean = mean;
    clf.std = std.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();

    let edges_s = source.edges();
    let edges_t = target.edges();
    let mut opt = Adam::new(&clf, cfg.lr);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, 1 + epoch as u64);
        let e_s = drop_edges(&edges_s, cfg.keep_prob, &mut rng);
        let e_t = drop_edges(&edges_t, cfg.keep_prob, &mut rng);
        let idx_s: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..source.n())).collect();
        let idx_t: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..target.n())).collect();

        let tape = Tape::new();
        let p = bind(&tape, &clf);
        let z_s = clf.logits(&p, source.features(), &e_s).select_rows(&idx_s);
        let z_t = clf.logits(&p, target.features(), &e_t).select_rows(&idx_t);
        let loss = z_s.scale(-1.0).softplus().mean().add(z_t.softplus().mean()).scale(0.5);
        final_loss = loss.item();
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step: epoch,
                t: 0.0,
                loss: final_loss,
            });
        }
        let grads = tape.backward(loss);
        let g: Vec<Matrix> = p.iter().map(|v| grads.wrt(*v)).collect();
        opt.step(&mut clf, &g);
    }

    let y_s = clf.predict_edges(source.features(), &edges_s);
    let y_t = clf.predict_edges(target.features(), &edges_t);
    let correct = y_s.iter().filter(|&&y| y >= 0.5).count() + y_t.iter().filter(|&&y| y < 0.5).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = ClassifierReport {
        accuracy: correct as f64 / (y_s.len() + y_t.len()) as f64,
        final_loss,
        mean_y_source: mean(&y_s),
        mean_y_target: mean(&y_t),
    };
    Ok((clf, report))
}

/// Monte Carlo density ratio `q/p` for `nodes` of the graph
/// `(features, adjacency)`: the mean of `(1 − y)/y` over `s_mc` classifier
/// evaluations on independently edge-dropped copies of the graph.
pub fn density_ratio(
    clf: &DomainClassifier,
    features: &Matrix,
    adjacency: &Matrix,
    nodes: &[usize],
    s_mc: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if s_mc == 0 {
        return Err(Error::invalid("S_mc must be at least 1"));
    }
    clf.check(features, adjacency)?;
    let n = features.rows();
    if let Some(&bad) = nodes.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("node {bad} out of range for {n} nodes")));
    }
    let edges = nn::edge_list(adjacency);
    let draws: Vec<Vec<f64>> = (0..s_mc)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, k as u64);
            let y = clf.predict_edges(features, &drop_edges(&edges, clf.keep_prob, &mut rng));
            nodes.iter().map(|&i| ratio_from_y(y[i])).collect()
        })
        .collect();
    let mut out = vec![0.0; nodes.len()];
    for d in &draws {
        for (o, r) in out.iter_mut().zip(d) {
            *o += r;
        }
    }
    Ok(out.into_iter().map(|s| s / s_mc as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceArch {
    pub hidden: usize,
    /// Hidden layers per network.
    pub depth: usize,
}

impl Default for GuidanceArch {
    fn default() -> Self {
        GuidanceArch { hidden: 512, depth: 2 }
    }
}

/// Row-wise ratio regressors with softplus heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceModel {
    /// Over `[c_in ⊙ x̃_t row ‖ t]`.
    pub q1: Mlp,
    /// Over `[c_adj · A_t row ‖ t]`.
    pub q2: Mlp,
    pub s_mc: usize,
    pub schedule: VeSchedule,
    pub feat_scale: Vec<f64>,
    pub adj_scale: f64,
}

impl GuidanceModel {
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        n: usize,
        arch: GuidanceArch,
        s_mc: usize,
        schedule: VeSchedule,
        rng: &mut R,
    ) -> Self {
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend(std::iter::repeat_n(arch.hidden, arch.depth));
            d.push(1);
            d
        };
        GuidanceModel {
            q1: Mlp::new(&dims(width + 1), Head::Softplus, rng),
            q2: Mlp::new(&dims(n + 1), Head::Softplus, rng),
            s_mc,
            schedule,
            feat_scale: vec![1.0; width],
            adj_scale: 1.0,
        }
    }

    pub fn width(&self) -> usize {
        self.q1.in_width() - 1
    }

    pub fn n(&self) -> usize {
        self.q2.in_width() - 1
    }

    /// Sets input scales from the clean graph.
    pub fn fit_scales(&mut self, g: &AugmentedGraph) {
        let floor = self.schedule.sigma_max;
        let (_, std) = g.xt.column_stats();
        self.feat_scale = std.into_iter().map(|s| s.max(floor)).collect();
        let n = g.n();
        let (_, a_std) = g.adjacency.clone().reshape(n * n, 1).expect("square").column_stats();
        self.adj_scale = a_std[0].max(floor);
    }

    fn check_state(&self, state: &DiffusionState) -> Result<()> {
        if state.xt.cols() != self.width() || state.n() != self.n() {
            return Err(Error::shape(
                "guidance",
                format!(
                    "state is {}x{} but guidance expects {}x{}",
                    state.n(),
                    state.xt.cols(),
                    self.n(),
                    self.width()
                ),
            ));
        }
        Ok(())
    }

    /// `(Q1, Q2)` per node, each `n x 1`.
    pub fn forward<'t>(&self, p: &[Var<'t>], xt: Var<'t>, at: Var<'t>, t: f64) -> (Var<'t>, Var<'t>) {
        let tape = xt.tape();
        let (p1, p2) = p.split_at(self.q1.num_tensors());
        let n = xt.shape().0;
        let t = t.max(T_EPS);
        let var = self.schedule.marginal_var_unchecked(t);
        let c_in: Vec<f64> = self.feat_scale.iter().map(|s| 1.0 / (s * s + var).sqrt()).collect();
        let c_adj = 1.0 / (self.adj_scale * self.adj_scale + var).sqrt();
        let t_col = tape.constant(Matrix::filled(n, 1, t));
        let x_in = hcat(&[xt.mul_row(tape.constant(Matrix::row_vector(&c_in))), t_col]);
        let a_in = hcat(&[at.scale(c_adj), t_col]);
        (self.q1.forward(p1, x_in), self.q2.forward(p2, a_in))
    }

    /// `(Q1, Q2)` values per node at `state`.
    pub fn evaluate(&self, state: &DiffusionState) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_state(state)?;
        let tape = Tape::new();
        let p: Vec<Var> = self.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
        let (q1, q2) = self.forward(&p, tape.constant(state.xt.clone()), tape.constant(state.at.clone()), state.t);
        let (q1, q2) = (q1.value(), q2.value());
        Ok((q1.as_slice().to_vec(), q2.as_slice().to_vec()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("meta.width", self.width() as f64);
        ck.insert_scalar("meta.n", self.n() as f64);
        ck.insert_scalar("meta.hidden", self.q1.weights[0].cols() as f64);
        ck.insert_scalar("meta.depth", (self.q1.depth() - 1) as f64);
        ck.insert_scalar("meta.s_mc", self.s_mc as f64);
        ck.insert_scalar("meta.sigma_min", self.schedule.sigma_min);
        ck.insert_scalar("meta.sigma_max", self.schedule.sigma_max);
        ck.insert_scalar("meta.t_steps", self.schedule.t_steps as f64);
        ck.insert_scalar("meta.adj_scale", self.adj_scale);
        ck.insert("meta.feat_scale", Matrix::row_vector(&self.feat_scale));
        ck.insert_params("q1", &self.q1);
        ck.insert_params("q2", &self.q2);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let schedule = VeSchedule::new(
            ck.scalar("meta.sigma_min")?,
            ck.scalar("meta.sigma_max")?,
            ck.usize("meta.t_steps")?,
        )?;
        let arch = GuidanceArch {
            hidden: ck.usize("meta.hidden")?,
            depth: ck.usize("meta.depth")?,
        };
        let mut g = GuidanceModel::new(
            ck.usize("meta.width")?,
            ck.usize("meta.n")?,
            arch,
            ck.usize("meta.s_mc")?,
            schedule,
            &mut stream(0, 0),
        );
        g.adj_scale = ck.scalar("meta.adj_scale")?;
        g.feat_scale = ck.get("meta.feat_scale")?.as_slice().to_vec();
        if g.feat_scale.len() != g.width() {
            return Err(Error::Checkpoint("guidance feature scale width".into()));
        }
        ck.restore_params("q1", &mut g.q1)?;
        ck.restore_params("q2", &mut g.q2)?;
        Ok(g)
    }
}

impl Params for GuidanceModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.q1.tensors();
        out.extend(self.q2.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.q1.tensors_mut();
        out.extend(self.q2.tensors_mut());
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.q1.tensor_names().into_iter().map(|n| format!("q1.{n}")).collect();
        out.extend(self.q2.tensor_names().into_iter().map(|n| format!("q2.{n}")));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GuidanceTrainConfig {
    fn default() -> Self {
        GuidanceTrainConfig {
            epochs: 100,
            steps_per_epoch: 1,
            lr: 1e-3,
            alpha: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GuidanceLossRecord {
    pub step: usize,
    pub t: f64,
    pub loss_q1: f64,
    pub loss_q2: f64,
}

/// Regresses both guidance heads onto the per-node `ratio` of the clean
/// graph `source` (adjacency on the diffusion scale) from forward-process
/// samples.
pub fn train_guidance_on_ratio(
    source: &AugmentedGraph,
    ratio: &[f64],
    mut g: GuidanceModel,
    s: &VeSchedule,
    cfg: &GuidanceTrainConfig,
) -> Result<(GuidanceModel, Vec<GuidanceLossRecord>)> {
    if ratio.len() != source.n() {
        return Err(Error::shape("train_guidance", format!("{} ratios for {} nodes", ratio.len(), source.n())));
    }
    let steps = cfg.epochs * cfg.steps_per_epoch;
    if steps == 0 {
        return Ok((g, Vec::new()));
    }
    if source.width() != g.width() || source.n() != g.n() {
        return Err(Error::shape("train_guidance", "graph does not match guidance model"));
    }
    g.schedule = *s;
    g.fit_scales(source);
    let mut opt = Adam::new(&g, cfg.lr);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = stream(cfg.seed, step as u64);
        let t = T_EPS + (1.0 - T_EPS) * (1.0 - rng.random::<f64>());
        let mut subset = select_subset(source.n(), cfg.alpha, &mut rng)?;
        if subset.is_empty() {
            subset = vec![rng.random_range(0..source.n())];
        }
        let state = perturb(source, t, &subset, s, &mut rng)?;
        let target = Matrix::column(&subset.iter().map(|&i| ratio[i]).collect::<Vec<_>>());

        let tape = Tape::new();
        let p = bind(&tape, &g);
        let xt = tape.constant(state.xt.select_rows(&subset));
        let at = tape.constant(state.at.select_rows(&subset));
        let (q1, q2) = g.forward(&p, xt, at, t);
        let tv = tape.constant(target);
        let l1 = q1.sub(tv).square().mean();
        let l2 = q2.sub(tv).square().mean();
        let loss = l1.add(l2);
        if !loss.item().is_finite() {
            return Err(Error::Diverged {
                step,
                t,
                loss: loss.item(),
            });
        }
        let grads = tape.backward(loss);
        let grad: Vec<Matrix> = p.iter().map(|v| grads.wrt(*v)).collect();
        opt.step(&mut g, &grad);
        trace.push(GuidanceLossRecord {
            step,
            t,
            loss_q1: l1.item(),
            loss_q2: l2.item(),
        });
    }
    Ok((g, trace))
}

/// Computes the clean-graph ratio with `clf` and fits both heads to it.
/// `source` carries the diffusion-scale adjacency; `features` and
/// `adjacency` are the classifier's view of the same nodes.
#[allow(clippy::too_many_arguments)]
pub fn train_guidance(
    source: &AugmentedGraph,
    features: &Matrix,
    adjacency: &Matrix,
    clf: &DomainClassifier,
    g: GuidanceModel,
    s: &VeSchedule,
    cfg: &GuidanceTrainConfig,
) -> Result<(GuidanceModel, Vec<f64>, Vec<GuidanceLossRecord>)> {
    let nodes: Vec<usize> = (0..source.n()).collect();
    let ratio = density_ratio(clf, features, adjacency, &nodes, g.s_mc.max(1), cfg.seed ^ 0x5eed)?;
    let (g, trace) = train_guidance_on_ratio(source, &ratio, g, s, cfg)?;
    Ok((g, ratio, trace))
}

/// `∇ log Q1` with respect to the features and the symmetrized `∇ log Q2`
/// with respect to the adjacency, summed over nodes.
pub fn guidance_gradient(g: &GuidanceModel, state: &DiffusionState) -> Result<(Matrix, Matrix)> {
    g.check_state(state)?;
    let tape = Tape::new();
    let p: Vec<Var> = g.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
    let xt = tape.var(state.xt.clone());
    let at = tape.var(state.at.clone());
    let (q1, q2) = g.forward(&p, xt, at, state.t);
    let objective = q1.ln().sum().add(q2.ln().sum());
    let grads = tape.backward(objective);
    let feat = grads.wrt(xt);
    let adj = grads.wrt(at).symmetrized();
    if !feat.is_finite() || !adj.is_finite() {
        return Err(Error::NonFinite(format!("guidance gradient at t = {}", state.t)));
    }
    Ok((feat, adj))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_rule() {
        assert_eq!(ratio_from_y(0.5), 1.0);
        assert_eq!(ratio_from_y(0.25), 3.0);
        assert_eq!(ratio_from_y(0.0), (1.0 - CLF_EPS) / CLF_EPS);
        let hi = ratio_from_y(1.0);
        assert!((hi - CLF_EPS / (1.0 - CLF_EPS)).abs() < 1e-15);
    }
}
