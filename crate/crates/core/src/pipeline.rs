//! End-to-end adaptation: guided generation of an intermediate graph from the
//! source, then a target GCN trained on it with an MMD alignment term.
//!
//! Training is staged. The score model, classifier and guidance networks are
//! fit first; the generated graph is then fixed while the target GCN trains.

use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result, StageExt};
use crate::graph::{augment, recover_labels, save_graph, AugmentedGraph, Graph};
use crate::guidance::{
    guidance_gradient, train_domain_classifier, train_guidance, ClassifierConfig, ClassifierReport, DomainClassifier,
    GuidanceArch, GuidanceLossRecord, GuidanceModel, GuidanceTrainConfig,
};
use crate::matrix::{CsrMatrix, Matrix};
use crate::nn::{self, bind, dropout_mask, glorot, Adam, Gcn, Params};
use crate::rng::{split_seed, stream, DiffRng};
use crate::score::{train_score, ScoreArch, ScoreLossRecord, ScoreModel, ScoreTrainConfig};
use crate::sde::{perturb, quantize_adjacency, reverse_step, scale_adjacency, select_subset, Drift, VeSchedule};

// ---------------------------------------------------------------------------
// Configuration

/// Learning rates admitted for the target GCN.
pub const LR_CHOICES: [f64; 3] = [1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Fraction of source nodes perturbed during generation.
    pub alpha: f64,
    /// Weight of the MMD term.
    pub eta: f64,
    /// Reverse steps.
    pub t_steps: usize,
    /// Target GCN learning rate.
    pub lr: f64,
    pub hidden: usize,
    pub dropout: f64,
    /// Target GCN epochs per round.
    pub epochs: usize,
    pub rounds: usize,
    /// Edge-dropout draws averaged in the density ratio.
    pub s_mc: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    pub score_epochs: usize,
    pub score_lr: f64,
    pub classifier_epochs: usize,
    pub guidance_epochs: usize,
    /// Standardized features enter the diffusion multiplied by
    /// `feature_scale · sigma_max`.
    pub feature_scale: f64,
    /// Multiplier on the guidance drift; 0 disables guidance.
    pub guidance_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            eta: 0.1,
            t_steps: 50,
            lr: 1e-3,
            hidden: 64,
            dropout: 0.2,
            epochs: 150,
            rounds: 5,
            s_mc: 16,
            sigma_min: 0.001,
            sigma_max: 0.01,
            seed: 0,
            score_epochs: 300,
            score_lr: 1e-3,
            classifier_epochs: 200,
            guidance_epochs: 100,
            feature_scale: 1.0,
            guidance_weight: 1.0,
        }
    }
}

fn check_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::invalid(format!("{key} = {v} is outside [{lo}, {hi}]")))
    }
}

fn check_count(key: &str, v: usize, lo: usize, hi: usize) -> Result<()> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{key} = {v} is outside [{lo}, {hi}]")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("alpha", self.alpha, 0.0, 1.0)?;
        check_range("eta", self.eta, 0.0, 0.5)?;
        check_count("t_steps", self.t_steps, 1, 150)?;
        if !LR_CHOICES.iter().any(|&c| (self.lr - c).abs() <= 1e-12 * c) {
            return Err(Error::invalid(format!("lr = {} is not one of 1e-4, 1e-3, 1e-2", self.lr)));
        }
        check_count("hidden", self.hidden, 1, 4096)?;
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::invalid(format!("dropout = {} is outside [0, 1)", self.dropout)));
        }
        check_count("epochs", self.epochs, 1, 100_000)?;
        check_count("rounds", self.rounds, 1, 1000)?;
        check_count("s_mc", self.s_mc, 1, 10_000)?;
        self.schedule()?;
        check_range("score_lr", self.score_lr, 1e-8, 1.0)?;
        check_range("feature_scale", self.feature_scale, 1e-6, 1e6)?;
        check_range("guidance_weight", self.guidance_weight, 0.0, 1e6)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<VeSchedule> {
        VeSchedule::new(self.sigma_min, self.sigma_max, self.t_steps)
    }
}

// ---------------------------------------------------------------------------
// MMD

/// Sum of Gaussian kernels `exp(−‖x − y‖² / (2h²))` over the bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdKernel {
    pub bandwidths: Vec<f64>,
}

impl MmdKernel {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("MMD bandwidths must be positive and finite"));
        }
        Ok(MmdKernel { bandwidths })
    }

    /// `{0.5, 1, 2}` times the median pairwise distance of the pooled samples.
    pub fn median_heuristic(a: &Matrix, b: &Matrix) -> Self {
        let h = median_distance(a, b);
        MmdKernel {
            bandwidths: vec![0.5 * h, h, 2.0 * h],
        }
    }

    fn coefficients(&self) -> Vec<f64> {
        self.bandwidths.iter().map(|h| -0.5 / (h * h)).collect()
    }
}

/// Median distance over distinct pooled pairs.
fn median_distance(a: &Matrix, b: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    median_sqrt(d)
}

/// Square root of the median of squared distances; 1 when it is not
/// positive.
fn median_sqrt(mut d: Vec<f64>) -> f64 {
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let h = m.sqrt();
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1.0
    }
}

fn check_mmd_inputs(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::shape("mmd", format!("sample widths {} and {}", a.cols(), b.cols())));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("mmd needs at least one sample on each side"));
    }
    Ok(())
}

fn kernel_mean(a: &Matrix, b: &Matrix, coef: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            let d: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            total += (coef * d).exp();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// Total order on matrices so that the cross term is summed in the same
/// order whichever argument comes first.
fn canonical_first(a: &Matrix, b: &Matrix) -> bool {
    a.shape()
        .cmp(&b.shape())
        .then_with(|| {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .is_le()
}

/// Biased (V-statistic) squared MMD between the rows of `a` and `b`.
pub fn mmd(a: &Matrix, b: &Matrix, kern: &MmdKernel) -> Result<f64> {
    check_mmd_inputs(a, b)?;
    let (a, b) = if canonical_first(a, b) { (a, b) } else { (b, a) };
    let mut total = 0.0;
    for c in kern.coefficients() {
        total += kernel_mean(a, a, c) + kernel_mean(b, b, c) - 2.0 * kernel_mean(a, b, c);
    }
    Ok(total.max(0.0))
}

/// [`mmd`] recorded on the tape; bandwidths are held constant.
pub fn mmd_var<'t>(a: Var<'t>, b: Var<'t>, kern: &MmdKernel) -> Var<'t> {
    mmd_from_dists(a.pair_sq_dist(a), b.pair_sq_dist(b), a.pair_sq_dist(b), kern)
}

/// [`mmd_var`] with the median-heuristic kernel of the current values.
pub fn mmd_var_median<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (d_aa, d_bb, d_ab) = (a.pair_sq_dist(a), b.pair_sq_dist(b), a.pair_sq_dist(b));
    let mut pooled = Vec::new();
    for d in [&d_aa, &d_bb] {
        let v = d.value();
        for i in 0..v.rows() {
            pooled.extend_from_slice(&v.row(i)[i + 1..]);
        }
    }
    pooled.extend_from_slice(d_ab.value().as_slice());
    let h = median_sqrt(pooled);
    let kern = MmdKernel {
        bandwidths: vec![0.5 * h, h, 2.0 * h],
    };
    mmd_from_dists(d_aa, d_bb, d_ab, &kern)
}

fn mmd_from_dists<'t>(d_aa: Var<'t>, d_bb: Var<'t>, d_ab: Var<'t>, kern: &MmdKernel) -> Var<'t> {
    let mut total: Option<Var<'t>> = None;
    for c in kern.coefficients() {
        let term = d_aa
            .scale(c)
            .exp()
            .mean()
            .add(d_bb.scale(c).exp().mean())
            .sub(d_ab.scale(c).exp().mean().scale(2.0));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("at least one bandwidth")
}

// ---------------------------------------------------------------------------
// F1

/// Micro and macro F1. Classes absent from both `pred` and `truth` count as
/// F1 = 0 in the macro average.
pub fn evaluate_f1(pred: &[usize], truth: &[usize], c: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::shape("evaluate_f1", format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if c == 0 {
        return Err(Error::invalid("evaluate_f1 needs at least one class"));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    if pred.is_empty() {
        return Err(Error::invalid("evaluate_f1 needs at least one node"));
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
        if denom > 0.0 {
            tp as f64 / denom
        } else {
            0.0
        }
    };
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_ = (0..c).map(|k| f1(tp[k], fp[k], fn_[k])).sum::<f64>() / c as f64;
    Ok((micro, macro_))
}

// ---------------------------------------------------------------------------
// Metrics

/// One line of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub round: usize,
    pub epoch: usize,
    pub mi_f1: f64,
    pub ma_f1: f64,
    pub loss_ce: f64,
    pub loss_mmd: f64,
}

/// Best and last-epoch F1 of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub last_micro_f1: f64,
    pub last_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub rounds: Vec<RoundMetrics>,
    pub mi_mean: f64,
    pub mi_std: f64,
    pub ma_mean: f64,
    pub ma_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    // Guard the mean against rounding outside the observed range.
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean.clamp(lo, hi), var.sqrt())
}

impl Metrics {
    pub fn from_rounds(rounds: Vec<RoundMetrics>) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::invalid("metrics need at least one round"));
        }
        let mi: Vec<f64> = rounds.iter().map(|r| r.micro_f1).collect();
        let ma: Vec<f64> = rounds.iter().map(|r| r.macro_f1).collect();
        let (mi_mean, mi_std) = mean_std(&mi);
        let (ma_mean, ma_std) = mean_std(&ma);
        Ok(Metrics {
            rounds,
            mi_mean,
            mi_std,
            ma_mean,
            ma_std,
        })
    }
}

#[derive(Serialize)]
struct Summary {
    mi_mean: f64,
    mi_std: f64,
    ma_mean: f64,
    ma_std: f64,
    rounds: usize,
}

/// Per-epoch records followed by the summary record, one JSON object per
/// line.
pub fn metrics_jsonl(metrics: &Metrics, records: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    let summary = Summary {
        mi_mean: metrics.mi_mean,
        mi_std: metrics.mi_std,
        ma_mean: metrics.ma_mean,
        ma_std: metrics.ma_std,
        rounds: metrics.rounds.len(),
    };
    out.push_str(&serde_json::to_string(&summary)?);
    out.push('\n');
    Ok(out)
}

/// Writes `items` as JSON lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Space-separated text matrix, one row per line.
pub fn matrix_text(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Feature frame

/// Maps graphs into the diffusion space and back: features are standardized
/// with statistics pooled over both domains and multiplied by `scale`; the
/// adjacency is rescaled to [`crate::sde::ADJ_SCALE`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale: f64,
}

impl FeatureFrame {
    pub fn fit(source: &Graph, target: &Graph, scale: f64) -> Result<Self> {
        if source.f() != target.f() {
            return Err(Error::shape("feature frame", format!("feature widths {} and {}", source.f(), target.f())));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("feature scale must be positive"));
        }
        let f = source.f();
        let data: Vec<f64> = source
            .features()
            .as_slice()
            .iter()
            .chain(target.features().as_slice())
            .copied()
            .collect();
        let (mean, std) = Matrix::from_vec(source.n() + target.n(), f, data)?.column_stats();
        let std = std.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(FeatureFrame { mean, std, scale })
    }

    pub fn f(&self) -> usize {
        self.mean.len()
    }

    /// The labeled graph `g` in diffusion coordinates.
    pub fn encode(&self, g: &Graph) -> Result<AugmentedGraph> {
        if g.f() != self.f() {
            return Err(Error::shape("feature frame", format!("graph width {} vs {}", g.f(), self.f())));
        }
        let mut aug = augment(g)?;
        for r in 0..aug.n() {
            let row = &mut aug.xt.row_mut(r)[..self.f()];
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s * self.scale;
            }
        }
        aug.adjacency = scale_adjacency(&aug.adjacency);
        Ok(aug)
    }

    /// Feature columns of a diffusion state in the original units.
    pub fn decode_features(&self, xt: &Matrix) -> Matrix {
        let f = self.f();
        let mut x = Matrix::zeros(xt.rows(), f);
        for r in 0..xt.rows() {
            for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = xt[(r, j)] / self.scale * self.std[j] + self.mean[j];
            }
        }
        x
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert("frame.mean", Matrix::row_vector(&self.mean));
        ck.insert("frame.std", Matrix::row_vector(&self.std));
        ck.insert_scalar("frame.scale", self.scale);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mean = ck.get("frame.mean")?.as_slice().to_vec();
        let std = ck.get("frame.std")?.as_slice().to_vec();
        if mean.len() != std.len() {
            return Err(Error::Checkpoint("frame statistics differ in width".into()));
        }
        Ok(FeatureFrame {
            mean,
            std,
            scale: ck.scalar("frame.scale")?,
        })
    }
}

// ---------------------------------------------------------------------------
// Generation

/// Labeled graph produced by the guided reverse process.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedGraph {
    pub graph: Graph,
    /// Nodes whose features and incident entries were diffused.
    pub subset: Vec<usize>,
}

impl GeneratedGraph {
    pub fn labels(&self) -> Vec<usize> {
        self.graph.full_labels().expect("generated graphs are fully labeled")
    }
}

/// Perturbs an `alpha` share of `source` (diffusion coordinates) to `t = 1`
/// and integrates the reverse SDE back to `t = 0` in `s.t_steps` steps,
/// adding `weight · ∇ log Q` when a guidance model is given.
#[allow(clippy::too_many_arguments)]
pub fn generate_graph(
    source: &AugmentedGraph,
    frame: &FeatureFrame,
    score: &ScoreModel,
    guide: Option<&GuidanceModel>,
    weight: f64,
    alpha: f64,
    s: &VeSchedule,
    seed: u64,
) -> Result<GeneratedGraph> {
    if source.f != frame.f() {
        return Err(Error::shape("generate_graph", "frame does not match the source width"));
    }
    let mut rng = stream(seed, 0);
    let subset = select_subset(source.n(), alpha, &mut rng)?;
    let mut state = perturb(source, 1.0, &subset, s, &mut rng)?;
    let steps = s.t_steps;
    for k in 0..steps {
        let dt = state.t / (steps - k) as f64;
        let step_err = |e: Error| Error::NonFinite(format!("reverse step {k} of {steps}: {e}"));
        let (feat_score, adj_score) = score.scores(&state).map_err(step_err)?;
        let guides = match guide {
            Some(g) if weight > 0.0 => {
                let (gf, ga) = guidance_gradient(g, &state).map_err(step_err)?;
                Some((gf.scale(weight), ga.scale(weight)))
            }
            _ => None,
        };
        let drift = Drift {
            feat_score: &feat_score,
            adj_score: &adj_score,
            feat_guide: guides.as_ref().map(|g| &g.0),
            adj_guide: guides.as_ref().map(|g| &g.1),
        };
        state = reverse_step(&state, dt, drift, s, &mut rng).map_err(step_err)?;
        if !state.xt.is_finite() || !state.at.is_finite() {
            return Err(Error::NonFinite(format!("diffusion state after reverse step {k} of {steps}")));
        }
    }
    let adjacency = quantize_adjacency(&state.at)?;
    let labels = recover_labels(&state.xt, source.f, source.c)?;
    let features = frame.decode_features(&state.xt);
    let graph = Graph::new(features, adjacency, labels.into_iter().map(Some).collect(), source.c)?;
    Ok(GeneratedGraph { graph, subset })
}

// ---------------------------------------------------------------------------
// Target GCN

/// Two-layer GCN; the hidden layer is the embedding aligned by MMD.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGnn {
    pub encoder: Gcn,
    pub out: Matrix,
    pub bias: Matrix,
}

impl TargetGnn {
    pub fn new<R: Rng + ?Sized>(f: usize, hidden: usize, c: usize, dropout: f64, rng: &mut R) -> Self {
        TargetGnn {
            encoder: Gcn::new(f, hidden, 1, dropout, rng),
            out: glorot(hidden, c, rng),
            bias: Matrix::zeros(1, c),
        }
    }

    pub fn f(&self) -> usize {
        self.encoder.in_width()
    }

    pub fn c(&self) -> usize {
        self.out.cols()
    }

    fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x: &Matrix,
        prop: &Rc<CsrMatrix>,
        mut rng: Option<&mut DiffRng>,
    ) -> (Var<'t>, Var<'t>) {
        let tape = p[0].tape();
        let h = self.encoder.forward(&p[..1], tape.constant(x.clone()), prop, rng.as_deref_mut())[0];
        let input = match rng {
            Some(r) if self.encoder.dropout > 0.0 => {
                let (rows, cols) = h.shape();
                h.mul(tape.constant(dropout_mask(rows, cols, self.encoder.dropout, r)))
            }
            _ => h,
        };
        let logits = input.matmul(p[1]).spmm(prop).add_row(p[2]);
        (h, logits)
    }

    fn eval(&self, x: &Matrix, prop: &Rc<CsrMatrix>) -> (Matrix, Matrix) {
        let tape = Tape::new();
        let p: Vec<Var> = self.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
        let (h, z) = self.forward(&p, x, prop, None);
        let h = (*h.value()).clone();
        let z = (*z.value()).clone();
        (h, z)
    }

    /// Hidden-layer embeddings and argmax predictions for graph `g`.
    pub fn predict(&self, g: &Graph) -> Result<(Matrix, Vec<usize>)> {
        if g.f() != self.f() {
            return Err(Error::shape("target gnn", format!("feature width {} vs {}", g.f(), self.f())));
        }
        let prop = Rc::new(nn::propagation_from_edges(g.n(), &g.edges()));
        let (h, z) = self.eval(g.features(), &prop);
        Ok((h, argmax_rows(&z)))
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert_scalar("gnn.meta.dropout", self.encoder.dropout);
        ck.insert_params("gnn", self);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let w = ck.get("gnn.encoder.0.weight")?;
        let out = ck.get("gnn.out")?;
        let dropout = ck.scalar("gnn.meta.dropout")?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Checkpoint(format!("dropout {dropout}")));
        }
        let mut m = TargetGnn::new(w.rows(), w.cols(), out.cols(), dropout, &mut stream(0, 0));
        ck.restore_params("gnn", &mut m)?;
        Ok(m)
    }
}

impl Params for TargetGnn {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.encoder.tensors();
        v.push(&self.out);
        v.push(&self.bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.encoder.tensors_mut();
        v.push(&mut self.out);
        v.push(&mut self.bias);
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.encoder.tensor_names().into_iter().map(|n| format!("encoder.{n}")).collect();
        v.push("out".into());
        v.push("bias".into());
        v
    }
}


fn argmax_rows(z: &Matrix) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let row = z.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn one_hot(labels: &[usize], c: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), c);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = 1.0;
    }
    m
}

/// Rows used for the MMD term are capped at this many per domain.
pub const MMD_MAX_ROWS: usize = 1024;

fn mmd_rows<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    if n <= MMD_MAX_ROWS {
        (0..n).collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, n, MMD_MAX_ROWS).into_vec();
        idx.sort_unstable();
        idx
    }
}

struct RoundResult {
    model: TargetGnn,
    records: Vec<EpochRecord>,
    metrics: RoundMetrics,
}

fn train_round(train: &Graph, labels: &[usize], target: &Graph, eval: &Eval, cfg: &TrainConfig, round: usize) -> Result<RoundResult> {
    let seed = split_seed(cfg.seed, 1000 + round as u64);
    let mut init = stream(seed, 0);
    let mut model = TargetGnn::new(train.f(), cfg.hidden, train.c(), cfg.dropout, &mut init);
    let mut opt = Adam::new(&model, cfg.lr);
    let mut rng_train = stream(seed, 1);
    let mut rng_target = stream(seed, 2);
    let prop_train = Rc::new(nn::propagation_from_edges(train.n(), &train.edges()));
    let y = one_hot(labels, train.c());

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = (0.0f64, 0.0f64);
    let mut last = (0.0, 0.0);
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let p = bind(&tape, &model);
        let (h_train, logits) = model.forward(&p, train.features(), &prop_train, Some(&mut rng_train));
        let ce = logits.log_softmax().mul(tape.constant(y.clone())).sum().scale(-1.0 / train.n() as f64);
        let mut loss = ce;
        let mut loss_mmd = 0.0;
        if cfg.eta > 0.0 {
            let (h_target, _) = model.forward(&p, target.features(), &eval.prop, Some(&mut rng_target));
            let a = h_train.select_rows(&mmd_rows(train.n(), &mut rng_target));
            let b = h_target.select_rows(&mmd_rows(target.n(), &mut rng_target));
            let m = mmd_var_median(a, b);
            loss_mmd = m.item();
            loss = loss.add(m.scale(cfg.eta));
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: epoch,
                t: 0.0,
                loss: value,
            });
        }
        let grads = tape.backward(loss);
        let g: Vec<Matrix> = p.iter().map(|v| grads.wrt(*v)).collect();
        opt.step(&mut model, &g);

        let (_, z) = model.eval(target.features(), &eval.prop);
        let pred = argmax_rows(&z);
        let pred: Vec<usize> = eval.nodes.iter().map(|&i| pred[i]).collect();
        let (mi, ma) = evaluate_f1(&pred, &eval.truth, target.c())?;
        best = (best.0.max(mi), best.1.max(ma));
        last = (mi, ma);
        records.push(EpochRecord {
            round,
            epoch,
            mi_f1: mi,
            ma_f1: ma,
            loss_ce: ce.item(),
            loss_mmd,
        });
    }
    Ok(RoundResult {
        model,
        records,
        metrics: RoundMetrics {
            round,
            micro_f1: best.0,
            macro_f1: best.1,
            last_micro_f1: last.0,
            last_macro_f1: last.1,
        },
    })
}

struct Eval {
    prop: Rc<CsrMatrix>,
    nodes: Vec<usize>,
    truth: Vec<usize>,
}

/// Output of [`train_target_gnn`]. The model is the one of round 0.
#[derive(Debug, Clone)]
pub struct TargetTraining {
    pub model: TargetGnn,
    pub metrics: Metrics,
    pub records: Vec<EpochRecord>,
}

/// Trains a GCN on the labeled graph `train` (cross-entropy) with `eta` times
/// the MMD between hidden embeddings of `train` and `target`. F1 is measured
/// on the labeled nodes of `target` after every epoch; each round keeps its
/// best epoch.
pub fn train_target_gnn(train: &Graph, target: &Graph, cfg: &TrainConfig) -> Result<TargetTraining> {
    cfg.validate()?;
    if train.c() != target.c() {
        return Err(Error::shape("train_target_gnn", format!("class counts {} and {}", train.c(), target.c())));
    }
    if train.f() != target.f() {
        return Err(Error::shape("train_target_gnn", format!("feature widths {} and {}", train.f(), target.f())));
    }
    let labels = train
        .full_labels()
        .ok_or_else(|| Error::invalid("the training graph must be fully labeled"))?;
    let nodes: Vec<usize> = (0..target.n()).filter(|&i| target.labels()[i].is_some()).collect();
    if nodes.is_empty() {
        return Err(Error::invalid("the target graph has no labels to evaluate against"));
    }
    let truth: Vec<usize> = nodes.iter().map(|&i| target.labels()[i].expect("filtered")).collect();
    let edges = target.edges();

    let results: Vec<RoundResult> = (0..cfg.rounds)
        .into_par_iter()
        .map(|round| {
            let eval = Eval {
                prop: Rc::new(nn::propagation_from_edges(target.n(), &edges)),
                nodes: nodes.clone(),
                truth: truth.clone(),
            };
            train_round(train, &labels, target, &eval, cfg, round)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut rounds = Vec::new();
    let mut model = None;
    for r in results {
        records.extend(r.records);
        rounds.push(r.metrics);
        model.get_or_insert(r.model);
    }
    Ok(TargetTraining {
        model: model.expect("at least one round"),
        metrics: Metrics::from_rounds(rounds)?,
        records,
    })
}

/// Source-only baseline: the same GCN and protocol trained on `source`
/// without the MMD term.
pub fn source_only(source: &Graph, target: &Graph, cfg: &TrainConfig) -> Result<TargetTraining> {
    train_target_gnn(source, target, &TrainConfig { eta: 0.0, ..*cfg })
}

// ---------------------------------------------------------------------------
// Stages

/// Trained diffusion stage: score model and the frame it lives in.
#[derive(Debug, Clone)]
pub struct ScoreStage {
    pub frame: FeatureFrame,
    pub model: ScoreModel,
    pub trace: Vec<ScoreLossRecord>,
}

impl ScoreStage {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        self.frame.to_checkpoint(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(ScoreStage {
            frame: FeatureFrame::from_checkpoint(ck)?,
            model: ScoreModel::from_checkpoint(ck)?,
            trace: Vec::new(),
        })
    }
}

pub fn run_score_stage(source: &Graph, target: &Graph, cfg: &TrainConfig) -> Result<ScoreStage> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let frame = FeatureFrame::fit(source, target, cfg.feature_scale * cfg.sigma_max)?;
    let aug = frame.encode(source)?;
    let model = ScoreModel::new(source.f(), source.c(), ScoreArch::default(), s, &mut stream(cfg.seed, 10));
    let score_cfg = ScoreTrainConfig {
        epochs: cfg.score_epochs,
        alpha: cfg.alpha,
        lr: cfg.score_lr,
        cosine_decay: false,
        seed: split_seed(cfg.seed, 11),
    };
    let (model, trace) = train_score(&aug, model, &score_cfg, &s)?;
    Ok(ScoreStage { frame, model, trace })
}

/// Trained guidance stage.
#[derive(Debug, Clone)]
pub struct GuidanceStage {
    pub classifier: DomainClassifier,
    pub report: ClassifierReport,
    pub model: GuidanceModel,
    /// Clean per-node ratio of the source.
    pub ratio: Vec<f64>,
    pub trace: Vec<GuidanceLossRecord>,
}

impl GuidanceStage {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        self.classifier.to_checkpoint(&mut ck, "classifier");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(GuidanceStage {
            classifier: DomainClassifier::from_checkpoint(ck, "classifier")?,
            report: ClassifierReport {
                accuracy: f64::NAN,
                final_loss: f64::NAN,
                mean_y_source: f64::NAN,
                mean_y_target: f64::NAN,
            },
            model: GuidanceModel::from_checkpoint(ck)?,
            ratio: Vec::new(),
            trace: Vec::new(),
        })
    }
}

pub fn run_guidance_stage(source: &Graph, target: &Graph, frame: &FeatureFrame, cfg: &TrainConfig) -> Result<GuidanceStage> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let clf_cfg = ClassifierConfig {
        epochs: cfg.classifier_epochs,
        seed: split_seed(cfg.seed, 20),
        ..ClassifierConfig::default()
    };
    let (classifier, report) = train_domain_classifier(source, target, &clf_cfg)?;
    let aug = frame.encode(source)?;
    let model = GuidanceModel::new(
        aug.width(),
        aug.n(),
        GuidanceArch::default(),
        cfg.s_mc,
        s,
        &mut stream(cfg.seed, 21),
    );
    let g_cfg = GuidanceTrainConfig {
        epochs: cfg.guidance_epochs,
        alpha: cfg.alpha,
        seed: split_seed(cfg.seed, 22),
        ..GuidanceTrainConfig::default()
    };
    let (model, ratio, trace) = train_guidance(
        &aug,
        source.features(),
        source.adjacency(),
        &classifier,
        model,
        &s,
        &g_cfg,
    )?;
    Ok(GuidanceStage {
        classifier,
        report,
        model,
        ratio,
        trace,
    })
}

pub fn run_generate_stage(
    source: &Graph,
    score: &ScoreStage,
    guide: Option<&GuidanceStage>,
    cfg: &TrainConfig,
) -> Result<GeneratedGraph> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let aug = score.frame.encode(source)?;
    let mut gen = generate_graph(
        &aug,
        &score.frame,
        &score.model,
        guide.map(|g| &g.model),
        cfg.guidance_weight,
        cfg.alpha,
        &s,
        split_seed(cfg.seed, 30),
    )?;
    // Untouched rows keep their original values rather than a decoded copy.
    let mut x = gen.graph.features().clone();
    let mut in_subset = vec![false; source.n()];
    for &i in &gen.subset {
        in_subset[i] = true;
    }
    for i in (0..source.n()).filter(|&i| !in_subset[i]) {
        x.row_mut(i).copy_from_slice(source.features().row(i));
    }
    gen.graph = Graph::new(x, gen.graph.adjacency().clone(), gen.graph.labels().to_vec(), gen.graph.c())?;
    Ok(gen)
}

/// Everything produced by [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub score: ScoreStage,
    pub guidance: GuidanceStage,
    pub generated: GeneratedGraph,
    pub target: TargetTraining,
    /// Hidden-layer embeddings of the target nodes under the round-0 model.
    pub embeddings: Matrix,
}

impl PipelineOutput {
    pub fn metrics(&self) -> &Metrics {
        &self.target.metrics
    }

    /// Writes checkpoints, the generated graph, embeddings, metrics and loss
    /// traces into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.score.to_checkpoint().save(dir.join("score.ckpt"))?;
        self.guidance.to_checkpoint().save(dir.join("guidance.ckpt"))?;
        let mut gnn = Checkpoint::new();
        self.target.model.to_checkpoint(&mut gnn);
        gnn.save(dir.join("gnn.ckpt"))?;
        save_graph(&self.generated.graph, dir.join("generated.graph"))?;
        std::fs::write(dir.join("embeddings.txt"), matrix_text(&self.embeddings))?;
        std::fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&self.target.metrics, &self.target.records)?)?;
        write_jsonl(dir.join("score_loss.jsonl"), &self.score.trace)?;
        write_jsonl(dir.join("guidance_loss.jsonl"), &self.guidance.trace)?;
        Ok(())
    }
}

/// Score training, classifier and guidance training, guided generation and
/// target GCN training, in that order. Errors carry the failing stage.
pub fn run_pipeline(source: &Graph, target: &Graph, cfg: &TrainConfig) -> Result<PipelineOutput> {
    cfg.validate().stage("config")?;
    if source.f() != target.f() || source.c() != target.c() {
        return Err(Error::shape(
            "run_pipeline",
            format!(
                "source has f = {}, c = {}; target has f = {}, c = {}",
                source.f(),
                source.c(),
                target.f(),
                target.c()
            ),
        ))
        .stage("input");
    }
    if !source.is_fully_labeled() {
        return Err(Error::invalid("the source graph must be fully labeled")).stage("input");
    }
    let score = run_score_stage(source, target, cfg).stage("train-score")?;
    let guidance = run_guidance_stage(source, target, &score.frame, cfg).stage("train-guidance")?;
    let generated = run_generate_stage(source, &score, Some(&guidance), cfg).stage("generate")?;
    let trained = train_target_gnn(&generated.graph, target, cfg).stage("adapt")?;
    let (embeddings, _) = trained.model.predict(target).stage("adapt")?;
    Ok(PipelineOutput {
        score,
        guidance,
        generated,
        target: trained,
        embeddings,
    })
}
