//! Contextual stochastic block model pairs with a controllable domain shift.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::rng::{normal, stream};

/// Target-domain perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Shift {
    /// Rotation of every class mean in the plane of feature dims 0 and 1, in
    /// radians.
    pub rotation: f64,
    /// Added to `intra_p` for the target.
    pub intra_delta: f64,
    /// Added to `inter_q` for the target.
    pub inter_delta: f64,
}

impl Shift {
    pub fn is_zero(&self) -> bool {
        *self == Shift::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsbmSpec {
    pub n: usize,
    pub c: usize,
    pub intra_p: f64,
    pub inter_q: f64,
    pub class_means: Vec<Vec<f64>>,
    pub feature_std: f64,
    pub shift: Shift,
}

impl CsbmSpec {
    /// Two classes with means `±separation/2` along feature dim 0.
    pub fn two_class(n: usize, f: usize, separation: f64, feature_std: f64, intra_p: f64, inter_q: f64) -> Self {
        let mut m0 = vec![0.0; f];
        let mut m1 = vec![0.0; f];
        m0[0] = separation / 2.0;
        m1[0] = -separation / 2.0;
        CsbmSpec {
            n,
            c: 2,
            intra_p,
            inter_q,
            class_means: vec![m0, m1],
            feature_std,
            shift: Shift::default(),
        }
    }

    pub fn f(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(prob(self.intra_p) && prob(self.inter_q) && self.inter_q <= self.intra_p) {
            return Err(Error::invalid(format!(
                "need 0 <= inter_q ({}) <= intra_p ({}) <= 1",
                self.inter_q, self.intra_p
            )));
        }
        if !(self.feature_std > 0.0 && self.feature_std.is_finite()) {
            return Err(Error::invalid("feature_std must be positive"));
        }
        if self.c == 0 || self.class_means.len() != self.c {
            return Err(Error::invalid(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.c
            )));
        }
        let f = self.f();
        if f == 0 || self.class_means.iter().any(|m| m.len() != f) {
            return Err(Error::invalid("class means must share a positive dimension"));
        }
        if self.shift.rotation != 0.0 && f < 2 {
            return Err(Error::invalid("a mean rotation needs at least two feature dims"));
        }
        Ok(())
    }

    fn target_probs(&self) -> (f64, f64) {
        let intra = (self.intra_p + self.shift.intra_delta).clamp(0.0, 1.0);
        let inter = (self.inter_q + self.shift.inter_delta).clamp(0.0, 1.0);
        (intra, inter)
    }

    fn target_means(&self) -> Vec<Vec<f64>> {
        let (s, c) = self.shift.rotation.sin_cos();
        self.class_means
            .iter()
            .map(|m| {
                let mut r = m.clone();
                if self.shift.rotation != 0.0 {
                    r[0] = c * m[0] - s * m[1];
                    r[1] = s * m[0] + c * m[1];
                }
                r
            })
            .collect()
    }
}

/// Node `i` belongs to class `i mod c`.
fn draw<R: Rng>(n: usize, means: &[Vec<f64>], std: f64, intra: f64, inter: f64, rng: &mut R) -> Result<Graph> {
    let c = means.len();
    let f = means[0].len();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut x = Matrix::zeros(n, f);
    for i in 0..n {
        for (v, m) in x.row_mut(i).iter_mut().zip(&means[labels[i]]) {
            *v = m + std * normal(rng);
        }
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { intra } else { inter };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(x, &edges, labels.into_iter().map(Some).collect(), c)
}

/// Source from the base model, target from the shifted one. Both carry
/// labels; the target's are ground truth for evaluation only.
pub fn gen_csbm_pair(spec: &CsbmSpec, seed: u64) -> Result<(Graph, Graph)> {
    spec.validate()?;
    let source = draw(
        spec.n,
        &spec.class_means,
        spec.feature_std,
        spec.intra_p,
        spec.inter_q,
        &mut stream(seed, 0),
    )?;
    let (intra, inter) = spec.target_probs();
    let target = draw(
        spec.n,
        &spec.target_means(),
        spec.feature_std,
        intra,
        inter,
        &mut stream(seed, 1),
    )?;
    Ok((source, target))
}
