//! Two-headed score network and its denoising score-matching loop.
//!
//! The feature head reads `[H_0 ‖ H_1 ‖ … ‖ H_L ‖ t]` where `H_0` is the
//! noisy augmented feature matrix and `H_i` are GCN states. The adjacency
//! head combines a graph multi-head attention edge map with the noisy entry
//! itself and `t` through a per-entry MLP, then symmetrizes.
//!
//! Inputs are scaled by `1/√(s² + Var(t))`, with `s` the per-column spread of
//! the training data, and both heads output `F/σ_t` with
//! `σ_t = √Var(t)`. Message passing runs on the quantized noisy adjacency.

use std::rc::Rc;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{hcat, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::AugmentedGraph;
use crate::matrix::Matrix;
use crate::nn::{self, bind, Adam, Gcn, Gmh, Head, Mlp, Params};
use crate::rng::{stream, DiffRng};
use crate::sde::{self, perturb, select_subset, DiffusionState, VeSchedule, T_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreArch {
    pub gnn_hidden: usize,
    /// GCN layers `L`.
    pub layers: usize,
    /// Adjacency powers `K`.
    pub powers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub feat_hidden: usize,
    pub adj_hidden: usize,
}

impl Default for ScoreArch {
    fn default() -> Self {
        ScoreArch {
            gnn_hidden: 64,
            layers: 2,
            powers: 2,
            heads: 4,
            head_dim: 8,
            feat_hidden: 128,
            adj_hidden: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub f: usize,
    pub c: usize,
    pub arch: ScoreArch,
    pub schedule: VeSchedule,
    /// Per-column spread of the clean training features.
    pub feat_scale: Vec<f64>,
    /// Spread of the clean (diffusion-scale) adjacency entries.
    pub adj_scale: f64,
    pub gnn: Gcn,
    pub feat_head: Mlp,
    pub gmh: Gmh,
    pub adj_head: Mlp,
}

/// Per-step record of [`train_score`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreLossRecord {
    pub step: usize,
    pub t: f64,
    pub loss_feat: f64,
    pub loss_adj: f64,
}

impl ScoreLossRecord {
    pub fn total(&self) -> f64 {
        self.loss_feat + self.loss_adj
    }
}

/// Tape outputs of one forward pass.
pub struct ScoreVars<'t> {
    pub feat: Var<'t>,
    pub adj: Var<'t>,
}

impl ScoreModel {
    pub fn new<R: Rng + ?Sized>(f: usize, c: usize, arch: ScoreArch, schedule: VeSchedule, rng: &mut R) -> Self {
        let w = f + c;
        let gnn = Gcn::new(w, arch.gnn_hidden, arch.layers, 0.0, rng);
        let feat_in = w + arch.layers * arch.gnn_hidden + 1;
        let feat_head = Mlp::new(&[feat_in, arch.feat_hidden, arch.feat_hidden, w], Head::Identity, rng);
        let mut widths = vec![w];
        widths.extend(std::iter::repeat_n(arch.gnn_hidden, arch.layers));
        let gmh = Gmh::new(&widths, arch.powers, arch.heads, arch.head_dim, rng);
        let adj_head = Mlp::new(&[3, arch.adj_hidden, arch.adj_hidden, 1], Head::Identity, rng);
        ScoreModel {
            f,
            c,
            arch,
            schedule,
            feat_scale: vec![1.0; w],
            adj_scale: 1.0,
            gnn,
            feat_head,
            gmh,
            adj_head,
        }
    }

    pub fn width(&self) -> usize {
        self.f + self.c
    }

    /// Sets the input scales from a clean training graph.
    pub fn fit_scales(&mut self, g: &AugmentedGraph) {
        let floor = self.schedule.sigma_max;
        let (_, std) = g.xt.column_stats();
        self.feat_scale = std.into_iter().map(|s| s.max(floor)).collect();
        let (_, a_std) = g.adjacency.clone().reshape(g.n() * g.n(), 1).expect("square").column_stats();
        self.adj_scale = a_std.first().copied().unwrap_or(1.0).max(floor);
    }

    fn counts(&self) -> [usize; 4] {
        [
            self.gnn.num_tensors(),
            self.feat_head.num_tensors(),
            self.gmh.num_tensors(),
            self.adj_head.num_tensors(),
        ]
    }

    fn check_state(&self, state: &DiffusionState) -> Result<()> {
        let n = state.n();
        if state.xt.cols() != self.width() {
            return Err(Error::shape(
                "score",
                format!("state width {} but model expects {}", state.xt.cols(), self.width()),
            ));
        }
        if state.at.shape() != (n, n) {
            return Err(Error::shape("score", "adjacency is not n x n"));
        }
        if !state.xt.is_finite() || !state.at.is_finite() {
            return Err(Error::NonFinite("diffusion state".into()));
        }
        Ok(())
    }

    /// Records the forward pass for state `(xt, at, t)`.
    pub fn forward<'t>(&self, p: &[Var<'t>], xt: Var<'t>, at: &Matrix, t: f64) -> Result<ScoreVars<'t>> {
        let tape = xt.tape();
        let [ng, nf, nm, na] = self.counts();
        let (p_gnn, rest) = p.split_at(ng);
        let (p_feat, rest) = rest.split_at(nf);
        let (p_gmh, p_adj) = rest.split_at(nm);
        assert_eq!(p_adj.len(), na, "bound score tensors");

        let n = at.rows();
        let t = t.max(T_EPS);
        let var = self.schedule.marginal_var_unchecked(t);
        let inv_sigma = 1.0 / var.sqrt();

        let c_in: Vec<f64> = self.feat_scale.iter().map(|s| 1.0 / (s * s + var).sqrt()).collect();
        let h0 = xt.mul_row(tape.constant(Matrix::row_vector(&c_in)));

        let structure = sde::quantize_adjacency(at)?;
        let prop = Rc::new(nn::propagation(&structure)?);
        let states = self.gnn.forward::<DiffRng>(p_gnn, h0, &prop, None);

        let t_col = tape.constant(Matrix::filled(n, 1, t));
        let mut parts = vec![h0];
        parts.extend(states.iter().copied());
        parts.push(t_col);
        let feat = self.feat_head.forward(p_feat, hcat(&parts)).scale(inv_sigma);

        let masks = nn::power_masks(&structure, self.arch.powers)?;
        let mut hidden = vec![h0];
        hidden.extend(states.iter().copied());
        let edge = self.gmh.forward(p_gmh, &hidden, &masks).reshape(n * n, 1);
        let c_adj = 1.0 / (self.adj_scale * self.adj_scale + var).sqrt();
        let a_in = tape.constant(at.scale(c_adj).reshape(n * n, 1)?);
        let t_entries = tape.constant(Matrix::filled(n * n, 1, t));
        let raw = self
            .adj_head
            .forward(p_adj, hcat(&[edge, a_in, t_entries]))
            .reshape(n, n);
        let mut off_diag = Matrix::filled(n, n, 0.5 * inv_sigma);
        off_diag.zero_diagonal();
        let adj = raw.add(raw.t()).mul(tape.constant(off_diag));
        Ok(ScoreVars { feat, adj })
    }

    /// Both scores at `state`.
    pub fn scores(&self, state: &DiffusionState) -> Result<(Matrix, Matrix)> {
        self.check_state(state)?;
        let tape = Tape::new();
        let p: Vec<Var> = self.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
        let out = self.forward(&p, tape.constant(state.xt.clone()), &state.at, state.t)?;
        let (feat, adj) = ((*out.feat.value()).clone(), (*out.adj.value()).clone());
        if !feat.is_finite() || !adj.is_finite() {
            return Err(Error::NonFinite(format!("score output at t = {}", state.t)));
        }
        Ok((feat, adj))
    }

    /// Variance-weighted denoising losses `(feature, adjacency)` of one
    /// perturbed sample of `g0`, averaged over active coordinates.
    pub fn dsm_loss<'t>(&self, p: &[Var<'t>], g0: &AugmentedGraph, state: &DiffusionState) -> Result<(Var<'t>, Var<'t>)> {
        let tape = p[0].tape();
        let var = self.schedule.marginal_var(state.t)?;
        let out = self.forward(p, tape.constant(state.xt.clone()), &state.at, state.t)?;
        let zero = || tape.constant(Matrix::scalar(0.0));
        if state.subset.is_empty() {
            return Ok((zero(), zero()));
        }

        let feat_target = sde::score_target_matrix(&g0.xt, &state.xt, state.t, &self.schedule)?;
        let feat_loss = out
            .feat
            .sub(tape.constant(feat_target))
            .select_rows(&state.subset)
            .square()
            .mean()
            .scale(var);

        let n = state.n();
        let adj_target = sde::score_target_matrix(&g0.adjacency, &state.at, state.t, &self.schedule)?;
        let mut active = Matrix::zeros(n, n);
        let mut count = 0usize;
        for u in 0..n {
            for v in 0..n {
                if state.is_active(u, v) {
                    active[(u, v)] = 1.0;
                    count += 1;
                }
            }
        }
        let adj_loss = if count == 0 {
            zero()
        } else {
            out.adj
                .sub(tape.constant(adj_target))
                .square()
                .mul(tape.constant(active))
                .sum()
                .scale(var / count as f64)
        };
        Ok((feat_loss, adj_loss))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let a = &self.arch;
        for (k, v) in [
            ("meta.f", self.f),
            ("meta.c", self.c),
            ("meta.gnn_hidden", a.gnn_hidden),
            ("meta.layers", a.layers),
            ("meta.powers", a.powers),
            ("meta.heads", a.heads),
            ("meta.head_dim", a.head_dim),
            ("meta.feat_hidden", a.feat_hidden),
            ("meta.adj_hidden", a.adj_hidden),
            ("meta.t_steps", self.schedule.t_steps),
        ] {
            ck.insert_scalar(k, v as f64);
        }
        ck.insert_scalar("meta.sigma_min", self.schedule.sigma_min);
        ck.insert_scalar("meta.sigma_max", self.schedule.sigma_max);
        ck.insert_scalar("meta.adj_scale", self.adj_scale);
        ck.insert("meta.feat_scale", Matrix::row_vector(&self.feat_scale));
        ck.insert_params("gnn", &self.gnn);
        ck.insert_params("feat_head", &self.feat_head);
        ck.insert_params("gmh", &self.gmh);
        ck.insert_params("adj_head", &self.adj_head);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ScoreArch {
            gnn_hidden: ck.usize("meta.gnn_hidden")?,
            layers: ck.usize("meta.layers")?,
            powers: ck.usize("meta.powers")?,
            heads: ck.usize("meta.heads")?,
            head_dim: ck.usize("meta.head_dim")?,
            feat_hidden: ck.usize("meta.feat_hidden")?,
            adj_hidden: ck.usize("meta.adj_hidden")?,
        };
        let schedule = VeSchedule::new(
            ck.scalar("meta.sigma_min")?,
            ck.scalar("meta.sigma_max")?,
            ck.usize("meta.t_steps")?,
        )?;
        let mut m = ScoreModel::new(
            ck.usize("meta.f")?,
            ck.usize("meta.c")?,
            arch,
            schedule,
            &mut stream(0, 0),
        );
        m.adj_scale = ck.scalar("meta.adj_scale")?;
        m.feat_scale = ck.get("meta.feat_scale")?.as_slice().to_vec();
        if m.feat_scale.len() != m.width() {
            return Err(Error::Checkpoint("feature scale width".into()));
        }
        ck.restore_params("gnn", &mut m.gnn)?;
        ck.restore_params("feat_head", &mut m.feat_head)?;
        ck.restore_params("gmh", &mut m.gmh)?;
        ck.restore_params("adj_head", &mut m.adj_head)?;
        Ok(m)
    }
}

impl Params for ScoreModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.gnn.tensors();
        out.extend(self.feat_head.tensors());
        out.extend(self.gmh.tensors());
        out.extend(self.adj_head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.gnn.tensors_mut();
        out.extend(self.feat_head.tensors_mut());
        out.extend(self.gmh.tensors_mut());
        out.extend(self.adj_head.tensors_mut());
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let parts: [(&str, Vec<String>); 4] = [
            ("gnn", self.gnn.tensor_names()),
            ("feat_head", self.feat_head.tensor_names()),
            ("gmh", self.gmh.tensor_names()),
            ("adj_head", self.adj_head.tensor_names()),
        ];
        parts
            .into_iter()
            .flat_map(|(p, names)| names.into_iter().map(move |n| format!("{p}.{n}")))
            .collect()
    }
}

pub fn score_features(m: &ScoreModel, state: &DiffusionState) -> Result<Matrix> {
    Ok(m.scores(state)?.0)
}

pub fn score_adjacency(m: &ScoreModel, state: &DiffusionState) -> Result<Matrix> {
    Ok(m.scores(state)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTrainConfig {
    /// Optimizer steps; each draws one `(t, subset, noise)` sample.
    pub epochs: usize,
    /// Fraction of nodes perturbed per step.
    pub alpha: f64,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            epochs: 300,
            alpha: 0.5,
            lr: 1e-3,
            cosine_decay: false,
            seed: 0,
        }
    }
}

/// Draws the training sample of step `step`.
pub fn training_sample(
    g0: &AugmentedGraph,
    alpha: f64,
    s: &VeSchedule,
    seed: u64,
    step: usize,
) -> Result<DiffusionState> {
    let mut rng = stream(seed, step as u64);
    let t = T_EPS + (1.0 - T_EPS) * (1.0 - rng.random::<f64>());
    let subset = select_subset(g0.n(), alpha, &mut rng)?;
    perturb(g0, t, &subset, s, &mut rng)
}

/// Fits `m` to `source` (adjacency already on the diffusion scale) by
/// denoising score matching. Input scales are refit from `source` and the
/// model adopts schedule `s`.
pub fn train_score(
    source: &AugmentedGraph,
    m: ScoreModel,
    cfg: &ScoreTrainConfig,
    s: &VeSchedule,
) -> Result<(ScoreModel, Vec<ScoreLossRecord>)> {
    train_score_sampled(m, cfg, s, |_| Ok(source.clone()))
}

/// [`train_score`] on a fresh clean graph `draw(step)` per step. Input
/// scales are fit on the first draw.
pub fn train_score_sampled<F>(
    mut m: ScoreModel,
    cfg: &ScoreTrainConfig,
    s: &VeSchedule,
    mut draw: F,
) -> Result<(ScoreModel, Vec<ScoreLossRecord>)>
where
    F: FnMut(usize) -> Result<AugmentedGraph>,
{
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if cfg.epochs == 0 {
        return Ok((m, Vec::new()));
    }
    m.schedule = *s;
    let mut opt = Adam::new(&m, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        let source = draw(step)?;
        if source.width() != m.width() {
            return Err(Error::shape(
                "train_score",
                format!("graph width {} vs model {}", source.width(), m.width()),
            ));
        }
        if step == 0 {
            m.fit_scales(&source);
        }
        let state = training_sample(&source, cfg.alpha, s, cfg.seed, step)?;
        let tape = Tape::new();
        let p = bind(&tape, &m);
        let (lf, la) = m.dsm_loss(&p, &source, &state)?;
        let loss = lf.add(la);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                t: state.t,
                loss: value,
            });
        }
        let grads = tape.backward(loss);
        let g: Vec<Matrix> = p.iter().map(|v| grads.wrt(*v)).collect();
        if cfg.cosine_decay {
            opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.epochs as f64).cos());
        }
        opt.step(&mut m, &g);
        trace.push(ScoreLossRecord {
            step,
            t: state.t,
            loss_feat: lf.item(),
            loss_adj: la.item(),
        });
    }
    Ok((m, trace))
}
