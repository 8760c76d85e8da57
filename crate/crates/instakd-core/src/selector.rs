//! Learnable selector ensemble: K direction vectors that score pooled
//! instance features, plus the diversity penalty that keeps the directions
//! from collapsing onto each other.

use crate::error::{Error, Result};
use crate::tensor::{softmax_into, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Whether instance scores compete across the whole batch or only within
/// their own image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScope {
    Batch,
    Image,
}

/// Which network's pooled features produced a set of scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    Teacher,
    Student,
}

/// Consensus attention over instances, with the per-selector slices kept
/// around for inspection and the softmax group size of each instance kept
/// for mean-one rescaling downstream.
#[derive(Clone, Debug)]
pub struct AttentionScores {
    /// Averaged score per instance; each softmax group sums to 1.
    pub values: Vec<f64>,
    pub source: ScoreSource,
    /// [I, K] softmax outputs before averaging.
    pub per_selector: Option<Tensor>,
    /// How many instances competed in each instance's softmax group.
    pub group_size: Vec<usize>,
}

impl AttentionScores {
    /// Score, average, and tag in one step.
    pub fn compute(
        features: &Tensor,
        vectors: &Tensor,
        groups: &[Vec<usize>],
        source: ScoreSource,
    ) -> AttentionScores {
        let per = score_instances(features, vectors, groups);
        let values = average_scores(&per);
        let mut group_size = vec![0usize; values.len()];
        for g in groups {
            for &i in g {
                group_size[i] = g.len();
            }
        }
        AttentionScores { values, source, per_selector: Some(per), group_size }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// K learnable direction vectors, one row each, in pooled-feature space.
#[derive(Clone, Debug)]
pub struct SelectorEnsemble {
    pub vectors: Tensor,
}

impl SelectorEnsemble {
    /// Gaussian init with standard deviation 1/sqrt(dim), so logits start
    /// with roughly unit scale regardless of the pooled feature size.
    pub fn init(k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("selector ensemble needs k >= 1 and dim >= 1"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sigma = 1.0 / (dim as f64).sqrt();
        let mut data = Vec::with_capacity(k * dim);
        while data.len() < k * dim {
            // Box-Muller transform; uniform in (0, 1] keeps the log finite.
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(sigma * r * theta.cos());
            if data.len() < k * dim {
                data.push(sigma * r * theta.sin());
            }
        }
        Ok(SelectorEnsemble { vectors: Tensor::from_vec(&[k, dim], data)? })
    }

    pub fn k(&self) -> usize {
        self.vectors.dims()[0]
    }
    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }
}

/// Raw alignment logits [I, K]: row i is feature_i dotted with every selector.
pub fn selector_logits(features: &Tensor, vectors: &Tensor) -> Tensor {
    let (i, d) = (features.dims()[0], features.dims()[1]);
    let (k, dv) = (vectors.dims()[0], vectors.dims()[1]);
    assert_eq!(d, dv, "feature dim {d} vs selector dim {dv}");
    let mut out = Tensor::zeros(&[i, k]);
    for row in 0..i {
        let f = &features.data()[row * d..(row + 1) * d];
        for sel in 0..k {
            let e = &vectors.data()[sel * d..(sel + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += f[j] * e[j];
            }
            *out.at2_mut(row, sel) = acc;
        }
    }
    out
}

/// Indices of each softmax group. `Image` scope groups instances sharing a
/// batch index; `Batch` scope is a single group over everything.
pub fn score_groups(scope: ScoreScope, batch_index: &[usize], batch: usize) -> Vec<Vec<usize>> {
    match scope {
        ScoreScope::Batch => {
            if batch_index.is_empty() {
                vec![]
            } else {
                vec![(0..batch_index.len()).collect()]
            }
        }
        ScoreScope::Image => {
            let mut groups = vec![Vec::new(); batch];
            for (i, &n) in batch_index.iter().enumerate() {
                groups[n].push(i);
            }
            groups.retain(|g| !g.is_empty());
            groups
        }
    }
}

/// Per-selector attention over instances: softmax of the logits along the
/// instance axis, independently per selector column and per group.
/// Output [I, K]; each group's column sums to 1.
pub fn score_instances(features: &Tensor, vectors: &Tensor, groups: &[Vec<usize>]) -> Tensor {
    let logits = selector_logits(features, vectors);
    softmax_over_groups(&logits, groups)
}

/// Column-wise grouped softmax of precomputed logits [I, K].
pub fn softmax_over_groups(logits: &Tensor, groups: &[Vec<usize>]) -> Tensor {
    let (i, k) = (logits.dims()[0], logits.dims()[1]);
    let mut out = Tensor::zeros(&[i, k]);
    let mut col = vec![0.0; i];
    let mut col_out = vec![0.0; i];
    for sel in 0..k {
        for row in 0..i {
            col[row] = logits.at2(row, sel);
        }
        for g in groups {
            softmax_into(&col, g, &mut col_out);
            for &row in g {
                *out.at2_mut(row, sel) = col_out[row];
            }
        }
    }
    out
}

/// Consensus importance per instance: the mean over the K selector columns.
pub fn average_scores(scores: &Tensor) -> Vec<f64> {
    let (i, k) = (scores.dims()[0], scores.dims()[1]);
    let mut out = vec![0.0; i];
    for row in 0..i {
        let mut acc = 0.0;
        for sel in 0..k {
            acc += scores.at2(row, sel);
        }
        out[row] = acc / k as f64;
    }
    out
}

/// Redundancy penalty over the raw selector vectors:
/// (|sum_k E_k|^2 - sum_k |E_k|^2) / sum_k |E_k|^2.
/// Zero when the vectors are mutually orthogonal, positive when they share
/// direction, negative when they cancel.
pub fn diversity_loss(vectors: &Tensor) -> f64 {
    diversity_loss_grad(vectors).0
}

/// Loss and its gradient w.r.t. every selector vector.
pub fn diversity_loss_grad(vectors: &Tensor) -> (f64, Tensor) {
    let (k, d) = (vectors.dims()[0], vectors.dims()[1]);
    let mut s = vec![0.0; d];
    let mut t = 0.0;
    for sel in 0..k {
        for j in 0..d {
            let v = vectors.at2(sel, j);
            s[j] += v;
            t += v * v;
        }
    }
    assert!(t > 0.0, "diversity loss undefined for all-zero selectors");
    let s_sq: f64 = s.iter().map(|v| v * v).sum();
    let numer = s_sq - t;
    let loss = numer / t;
    // d/dE_k [numer/t] = (2S - 2E_k)/t - numer * 2E_k / t^2
    let mut grad = Tensor::zeros(&[k, d]);
    for sel in 0..k {
        for j in 0..d {
            let e = vectors.at2(sel, j);
            *grad.at2_mut(sel, j) = 2.0 * (s[j] - e) / t - 2.0 * numer * e / (t * t);
        }
    }
    (loss, grad)
}

/// Stage-one objective: the frozen-teacher task loss plus the weighted
/// diversity penalty.
pub fn selector_training_loss(task_loss: f64, div_loss: f64, mu: f64) -> f64 {
    task_loss + mu * div_loss
}
