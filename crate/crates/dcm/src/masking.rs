//! Dynamic connection masking: edge activations, importance scoring, mask
//! construction under five strategies, and mask application.
//!
//! The importance score of an edge is the population standard deviation of
//! its activation across the batch. Node-wise masking ranks each input
//! node's C outgoing edges by score and removes the bottom `q = floor(p*C)`;
//! the other strategies vary the selection criterion but keep the same
//! machinery. Masks are non-destructive: weights persist and re-enter the
//! forward pass as soon as the mask stops covering them.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DcmError, Result};
use crate::heads::KanHead;
use crate::matrix::Matrix;
use crate::ops::silu;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    NodeWise,
    EdgeWise,
    Random,
    ByWeight,
    NodeWiseInverted,
}

impl MaskStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskStrategy::NodeWise => "node_wise",
            MaskStrategy::EdgeWise => "edge_wise",
            MaskStrategy::Random => "random",
            MaskStrategy::ByWeight => "by_weight",
            MaskStrategy::NodeWiseInverted => "node_wise_inverted",
        }
    }

    /// Whether the strategy consumes activation-derived importance scores.
    pub fn uses_scores(&self) -> bool {
        matches!(
            self,
            MaskStrategy::NodeWise | MaskStrategy::EdgeWise | MaskStrategy::NodeWiseInverted
        )
    }
}

impl FromStr for MaskStrategy {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node_wise" => Ok(MaskStrategy::NodeWise),
            "edge_wise" => Ok(MaskStrategy::EdgeWise),
            "random" => Ok(MaskStrategy::Random),
            "by_weight" => Ok(MaskStrategy::ByWeight),
            "node_wise_inverted" => Ok(MaskStrategy::NodeWiseInverted),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown mask strategy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskInterval {
    PerIteration,
    PerEpoch,
}

impl MaskInterval {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskInterval::PerIteration => "per_iteration",
            MaskInterval::PerEpoch => "per_epoch",
        }
    }
}

impl FromStr for MaskInterval {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_iteration" => Ok(MaskInterval::PerIteration),
            "per_epoch" => Ok(MaskInterval::PerEpoch),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown mask interval `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStage {
    TrainOnly,
    TrainAndTest,
}

impl MaskStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskStage::TrainOnly => "train_only",
            MaskStage::TrainAndTest => "train_and_test",
        }
    }
}

impl FromStr for MaskStage {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_only" => Ok(MaskStage::TrainOnly),
            "train_and_test" => Ok(MaskStage::TrainAndTest),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown mask stage `{other}`"
            ))),
        }
    }
}

/// When and how masking is applied during a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingPolicy {
    pub enabled: bool,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub interval: MaskInterval,
    pub stage: MaskStage,
}

impl MaskingPolicy {
    pub fn disabled() -> Self {
        MaskingPolicy {
            enabled: false,
            strategy: MaskStrategy::NodeWise,
            ratio: 0.6,
            interval: MaskInterval::PerIteration,
            stage: MaskStage::TrainOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(DcmError::InvalidParameter(format!(
                "mask ratio must lie strictly inside (0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Binary d x C mask; entry (k, j) gates the edge from input node k to class
/// node j. `true` keeps the edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    features: usize,
    classes: usize,
    keep: Vec<bool>,
}

impl MaskMatrix {
    pub fn all_ones(features: usize, classes: usize) -> Self {
        MaskMatrix {
            features,
            classes,
            keep: vec![true; features * classes],
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_kept(&self, k: usize, j: usize) -> bool {
        self.keep[k * self.classes + j]
    }

    pub fn set_masked(&mut self, k: usize, j: usize) {
        self.keep[k * self.classes + j] = false;
    }

    /// The multiplicative gate for edge (k, j): one when kept, zero when
    /// masked.
    pub fn factor<F: Scalar>(&self, k: usize, j: usize) -> F {
        if self.is_kept(k, j) {
            F::one()
        } else {
            F::zero()
        }
    }

    pub fn is_all_ones(&self) -> bool {
        self.keep.iter().all(|&b| b)
    }

    pub fn zeros_in_node(&self, k: usize) -> usize {
        (0..self.classes).filter(|&j| !self.is_kept(k, j)).count()
    }

    pub fn total_zeros(&self) -> usize {
        self.keep.iter().filter(|&&b| !b).count()
    }

    /// Masked class indices of node `k`, ascending.
    pub fn masked_classes(&self, k: usize) -> Vec<usize> {
        (0..self.classes).filter(|&j| !self.is_kept(k, j)).collect()
    }

    /// Text debug export: a header line, then one line per input node
    /// listing its masked class indices.
    pub fn to_debug_text(&self, ratio: f64, strategy: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "d={} C={} p={} strategy={}",
            self.features, self.classes, ratio, strategy
        );
        for k in 0..self.features {
            let _ = write!(s, "{k}:");
            for j in self.masked_classes(k) {
                let _ = write!(s, " {j}");
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Parse the debug text format back into a mask plus its header fields
    /// `(ratio, strategy)`.
    pub fn from_debug_text(text: &str, source: &str) -> Result<(Self, f64, String)> {
        let malformed = |line: usize, message: String| DcmError::MalformedInput {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| malformed(1, "empty mask file".into()))?;
        let mut d = None;
        let mut c = None;
        let mut p = None;
        let mut strategy = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| malformed(1, format!("bad header field `{field}`")))?;
            match key {
                "d" => d = value.parse::<usize>().ok(),
                "C" => c = value.parse::<usize>().ok(),
                "p" => p = value.parse::<f64>().ok(),
                "strategy" => strategy = Some(value.to_string()),
                _ => return Err(malformed(1, format!("unknown header key `{key}`"))),
            }
        }
        let (d, c, p, strategy) = match (d, c, p, strategy) {
            (Some(d), Some(c), Some(p), Some(s)) => (d, c, p, s),
            _ => return Err(malformed(1, "header must define d, C, p, strategy".into())),
        };
        let mut mask = MaskMatrix::all_ones(d, c);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (node, rest) = line
                .split_once(':')
                .ok_or_else(|| malformed(idx + 1, "expected `k: j1 j2 ...`".into()))?;
            let k: usize = node
                .trim()
                .parse()
                .map_err(|_| malformed(idx + 1, format!("bad node index `{node}`")))?;
            if k >= d {
                return Err(malformed(idx + 1, format!("node {k} out of range for d={d}")));
            }
            for tok in rest.split_whitespace() {
                let j: usize = tok
                    .parse()
                    .map_err(|_| malformed(idx + 1, format!("bad class index `{tok}`")))?;
                if j >= c {
                    return Err(malformed(idx + 1, format!("class {j} out of range for C={c}")));
                }
                mask.set_masked(k, j);
            }
        }
        Ok((mask, p, strategy))
    }
}

/// Per-edge activations a_ijk for a batch, laid out (i, j, k).
#[derive(Debug, Clone)]
pub struct EdgeActivations<F: Scalar> {
    batch: usize,
    classes: usize,
    features: usize,
    data: Vec<F>,
}

impl<F: Scalar> EdgeActivations<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> F {
        self.data[(i * self.classes + j) * self.features + k]
    }
}

/// MLP edge activations: a_ijk = v_ik * w_jk.
pub fn edge_activations_mlp<F: Scalar>(
    v: &Matrix<F>,
    w: &Matrix<F>,
) -> Result<EdgeActivations<F>> {
    if v.cols() != w.cols() {
        return Err(DcmError::ShapeMismatch {
            op: "edge_activations_mlp",
            left_rows: v.rows(),
            left_cols: v.cols(),
            right_rows: w.rows(),
            right_cols: w.cols(),
        });
    }
    let (batch, features, classes) = (v.rows(), v.cols(), w.rows());
    let mut data = Vec::with_capacity(batch * classes * features);
    for i in 0..batch {
        let vi = v.row(i);
        for j in 0..classes {
            let wj = w.row(j);
            for k in 0..features {
                data.push(vi[k] * wj[k]);
            }
        }
    }
    Ok(EdgeActivations {
        batch,
        classes,
        features,
        data,
    })
}

/// KAN edge activations: a_ijk = phi_jk(v_ik), the edge's actual forward
/// contribution.
pub fn edge_activations_kan<F: Scalar>(
    v: &Matrix<F>,
    head: &KanHead<F>,
) -> Result<EdgeActivations<F>> {
    if v.cols() != head.features() {
        return Err(DcmError::ShapeMismatch {
            op: "edge_activations_kan",
            left_rows: v.rows(),
            left_cols: v.cols(),
            right_rows: head.classes(),
            right_cols: head.features(),
        });
    }
    let (batch, features, classes) = (v.rows(), head.features(), head.classes());
    let grid = head.grid();
    let n = grid.basis_count();
    let mut basis = vec![F::zero(); n];
    let mut data = vec![F::zero(); batch * classes * features];
    for i in 0..batch {
        let vi = v.row(i);
        for k in 0..features {
            let x = vi[k];
            grid.basis(x, &mut basis);
            let base = silu(x);
            for j in 0..classes {
                let edge = head.edge(j, k);
                let spline: F = edge
                    .coeffs
                    .iter()
                    .zip(basis.iter())
                    .map(|(&c, &b)| c * b)
                    .fold(F::zero(), |a, s| a + s);
                data[(i * classes + j) * features + k] =
                    edge.base_weight * base + edge.spline_weight * spline;
            }
        }
    }
    Ok(EdgeActivations {
        batch,
        classes,
        features,
        data,
    })
}

/// Non-negative C x d matrix of per-edge importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores<F: Scalar> {
    scores: Matrix<F>,
}

impl<F: Scalar> ImportanceScores<F> {
    pub fn from_matrix(scores: Matrix<F>) -> Result<Self> {
        for &s in scores.data() {
            if !(s >= F::zero()) || !s.is_finite() {
                return Err(DcmError::InvalidParameter(format!(
                    "importance scores must be finite and non-negative, got {s}"
                )));
            }
        }
        Ok(ImportanceScores { scores })
    }

    pub fn classes(&self) -> usize {
        self.scores.rows()
    }

    pub fn features(&self) -> usize {
        self.scores.cols()
    }

    pub fn get(&self, j: usize, k: usize) -> F {
        self.scores[(j, k)]
    }

    pub fn matrix(&self) -> &Matrix<F> {
        &self.scores
    }
}

/// Importance as population standard deviation of each edge's activation
/// across the batch (divisor B).
pub fn importance_scores<F: Scalar>(activations: &EdgeActivations<F>) -> ImportanceScores<F> {
    let (batch, classes, features) = (
        activations.batch(),
        activations.classes(),
        activations.features(),
    );
    let inv_b = F::one() / F::from_usize(batch);
    let mut scores = Matrix::zeros(classes, features);
    for j in 0..classes {
        for k in 0..features {
            let mut mean = F::zero();
            for i in 0..batch {
                mean += activations.get(i, j, k);
            }
            mean *= inv_b;
            let mut var = F::zero();
            for i in 0..batch {
                let d = activations.get(i, j, k) - mean;
                var += d * d;
            }
            scores[(j, k)] = (var * inv_b).sqrt();
        }
    }
    ImportanceScores { scores }
}

/// Number of edges masked per input node, `floor(p * C)`.
pub fn mask_quota(ratio: f64, classes: usize) -> usize {
    (ratio * classes as f64).floor() as usize
}

fn assert_ratio(ratio: f64) {
    assert!(
        ratio > 0.0 && ratio < 1.0,
        "mask ratio must lie strictly inside (0, 1), got {ratio}"
    );
}

/// Per input node, mask the q lowest-scoring edges. Ties break toward the
/// smaller class index (stable ascending sort).
pub fn build_mask_node_wise<F: Scalar>(scores: &ImportanceScores<F>, ratio: f64) -> MaskMatrix {
    assert_ratio(ratio);
    let (classes, features) = (scores.classes(), scores.features());
    let q = mask_quota(ratio, classes);
    let mut mask = MaskMatrix::all_ones(features, classes);
    if q == 0 {
        return mask;
    }
    let mut order: Vec<usize> = Vec::with_capacity(classes);
    for k in 0..features {
        order.clear();
        order.extend(0..classes);
        // Stable sort on the score alone preserves ascending j among ties.
        order.sort_by(|&a, &b| {
            scores
                .get(a, k)
                .partial_cmp(&scores.get(b, k))
                .expect("scores are finite")
        });
        for &j in order.iter().take(q) {
            mask.set_masked(k, j);
        }
    }
    mask
}

/// Mirror of node-wise selection: the q highest-scoring edges per node are
/// masked; ties break toward the larger class index.
pub fn build_mask_node_wise_inverted<F: Scalar>(
    scores: &ImportanceScores<F>,
    ratio: f64,
) -> MaskMatrix {
    assert_ratio(ratio);
    let (classes, features) = (scores.classes(), scores.features());
    let q = mask_quota(ratio, classes);
    let mut mask = MaskMatrix::all_ones(features, classes);
    if q == 0 {
        return mask;
    }
    let mut order: Vec<usize> = Vec::with_capacity(classes);
    for k in 0..features {
        order.clear();
        order.extend(0..classes);
        order.sort_by(|&a, &b| {
            scores
                .get(b, k)
                .partial_cmp(&scores.get(a, k))
                .expect("scores are finite")
                .then(b.cmp(&a))
        });
        for &j in order.iter().take(q) {
            mask.set_masked(k, j);
        }
    }
    mask
}

/// Mask the `floor(p*C*d)` globally smallest scores; ties break by row-major
/// (j, k) order.
pub fn build_mask_edge_wise<F: Scalar>(scores: &ImportanceScores<F>, ratio: f64) -> MaskMatrix {
    assert_ratio(ratio);
    let (classes, features) = (scores.classes(), scores.features());
    let total = (ratio * (classes * features) as f64).floor() as usize;
    let mut mask = MaskMatrix::all_ones(features, classes);
    if total == 0 {
        return mask;
    }
    let mut order: Vec<usize> = (0..classes * features).collect();
    order.sort_by(|&a, &b| {
        let sa = scores.get(a / features, a % features);
        let sb = scores.get(b / features, b % features);
        sa.partial_cmp(&sb).expect("scores are finite")
    });
    for &idx in order.iter().take(total) {
        mask.set_masked(idx % features, idx / features);
    }
    mask
}

/// Per input node, mask q class indices drawn uniformly without replacement
/// from a generator seeded by `seed`. Node-wise cardinality is preserved so
/// only the selection criterion differs from node-wise masking.
pub fn build_mask_random(features: usize, classes: usize, ratio: f64, seed: u64) -> MaskMatrix {
    assert_ratio(ratio);
    let q = mask_quota(ratio, classes);
    let mut mask = MaskMatrix::all_ones(features, classes);
    if q == 0 {
        return mask;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..features {
        let picks = rand::seq::index::sample(&mut rng, classes, q);
        for j in picks.iter() {
            mask.set_masked(k, j);
        }
    }
    mask
}

/// Per input node, mask the q edges with the smallest |w_jk|; same tie rule
/// as node-wise.
pub fn build_mask_by_weight<F: Scalar>(weight: &Matrix<F>, ratio: f64) -> MaskMatrix {
    let magnitudes = ImportanceScores {
        scores: weight.map(|w| w.abs()),
    };
    build_mask_node_wise(&magnitudes, ratio)
}

/// Masked weights: `out[j][k] = m_kj * w[j][k]`. Never mutates `w`.
pub fn apply_mask<F: Scalar>(w: &Matrix<F>, mask: &MaskMatrix) -> Result<Matrix<F>> {
    if w.rows() != mask.classes() || w.cols() != mask.features() {
        return Err(DcmError::ShapeMismatch {
            op: "apply_mask",
            left_rows: w.rows(),
            left_cols: w.cols(),
            right_rows: mask.features(),
            right_cols: mask.classes(),
        });
    }
    let mut out = w.clone();
    for j in 0..w.rows() {
        for k in 0..w.cols() {
            out[(j, k)] = mask.factor::<F>(k, j) * w[(j, k)];
        }
    }
    Ok(out)
}
