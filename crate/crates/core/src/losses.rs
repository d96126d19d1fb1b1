//! Spatial softmax, heatmap L2, and the KL losses against ground-truth and
//! ground-false spatial distributions, plus disparity estimators.
//!
//! KL terms are always `KL(target ‖ predicted)`, computed elementwise as
//! `q · (ln q − ln max(p, ε))` so that a prediction equal to its target gives
//! exactly zero. Losses average over batch and keypoints.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::heatmap::{
    decode_batch, gaussian_heatmap, ground_false, normalize_spatial, AreaMask, Grid, KeypointSet,
    MaskedGroundFalse, SpatialDistribution,
};

/// Clamp applied inside every log.
pub const LOG_EPS: f64 = 1e-12;

/// Differentiable scalar loss with a per-keypoint breakdown.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: Var,
    /// Batch-mean loss of each keypoint; `value` is their mean.
    pub per_keypoint: Vec<f64>,
}

impl LossValue {
    pub fn scalar<T: Scalar>(&self, g: &Graph<T>) -> f64 {
        g.value(self.value).item().as_f64()
    }
}

/// Per-slice softmax over the flattened spatial positions of `B×K×H×W` logits.
pub fn spatial_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    g.spatial_softmax(logits)
}

fn bk(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::invalid(op, format!("expected nonempty B×K×H×W, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Mean squared error over every entry of `B×K×H×W` maps.
pub fn loss_mse<T: Scalar>(g: &mut Graph<T>, predicted: Var, target: &Tensor<T>) -> Result<LossValue> {
    if g.shape(predicted) != target.shape() {
        return Err(Error::shape("loss_mse", g.shape(predicted), target.shape()));
    }
    let (b, k, n) = bk(target.shape(), "loss_mse")?;
    let t = g.constant(target.clone());
    let diff = g.sub(predicted, t)?;
    let sq = g.mul(diff, diff)?;
    let value = g.mean(sq);

    let mut per_keypoint = vec![0.0; k];
    for (i, chunk) in g.value(sq).data().chunks(n).enumerate() {
        per_keypoint[i % k] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    per_keypoint.iter_mut().for_each(|v| *v /= (b * n) as f64);
    Ok(LossValue { value, per_keypoint })
}

/// Stacks per-sample distributions into a `B×K×H×W` tensor.
pub fn stack_distributions<T: Scalar>(dists: &[SpatialDistribution]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = dists.iter().map(|d| d.to_tensor()).collect();
    Tensor::stack_batch(&parts)
}

/// KL losses against targets built from keypoint coordinates.
#[derive(Clone, Debug)]
pub struct KlLoss {
    grid: Grid,
    sigma: f64,
    eps: f64,
    masked: Option<MaskedGroundFalse>,
}

impl KlLoss {
    pub fn new(grid: Grid, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("kl loss", format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            grid,
            sigma,
            eps: LOG_EPS,
            masked: None,
        })
    }

    /// Overrides the log clamp. Only the self-test uses anything but [`LOG_EPS`].
    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Area for single-keypoint ground-false targets.
    pub fn with_mask(mut self, mask: AreaMask) -> Result<Self> {
        if mask.grid() != self.grid {
            return Err(Error::invalid("kl loss", "mask grid differs from heatmap grid"));
        }
        self.masked = Some(MaskedGroundFalse::new(mask, self.sigma)?);
        Ok(self)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `P_T` for each sample.
    pub fn true_targets(&self, points: &[KeypointSet]) -> Result<Vec<SpatialDistribution>> {
        points
            .iter()
            .map(|p| normalize_spatial(&gaussian_heatmap(p, self.grid, self.sigma)?))
            .collect()
    }

    /// `P_F` for each sample's predictions; single-keypoint sets use the mask.
    pub fn false_targets(&self, predictions: &[KeypointSet]) -> Result<Vec<SpatialDistribution>> {
        predictions
            .iter()
            .map(|p| match (p.len(), &self.masked) {
                (1, Some(m)) => m.distribution(p.points[0]),
                (1, None) => Err(Error::invalid(
                    "loss_false",
                    "single-keypoint ground-false targets need an area mask",
                )),
                _ => ground_false(p, self.grid, self.sigma),
            })
            .collect()
    }

    /// Mean over batch and keypoints of `KL(target ‖ predicted)`.
    pub fn kl_to<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        predicted_dist: Var,
        targets: &[SpatialDistribution],
    ) -> Result<LossValue> {
        let (b, k, n) = bk(g.shape(predicted_dist), "kl")?;
        if targets.len() != b {
            return Err(Error::invalid("kl", format!("{} targets for batch of {b}", targets.len())));
        }
        let q: Tensor<T> = stack_distributions(targets)?;
        if q.shape() != g.shape(predicted_dist) {
            return Err(Error::shape("kl", q.shape(), g.shape(predicted_dist)));
        }
        // Same clamp on both sides keeps KL(q ‖ q) exactly zero.
        let eps = T::from_f64(self.eps);
        let ln_q = q.map(|v| if v > T::zero() { v.max(eps).ln() } else { T::zero() });
        let qv = g.constant(q);
        let ln_qv = g.constant(ln_q);
        let ln_p = g.log(predicted_dist, self.eps);
        let gap = g.sub(ln_qv, ln_p)?;
        let terms = g.mul(qv, gap)?;
        let total = g.sum(terms);
        let value = g.scale(total, 1.0 / (b * k) as f64);

        let mut per_keypoint = vec![0.0; k];
        for (i, chunk) in g.value(terms).data().chunks(n).enumerate() {
            per_keypoint[i % k] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        per_keypoint.iter_mut().for_each(|v| *v /= b as f64);
        Ok(LossValue { value, per_keypoint })
    }

    /// `L_T`: KL from the normalized Gaussian at each ground-truth keypoint.
    pub fn loss_true<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        predicted_dist: Var,
        targets: &[KeypointSet],
    ) -> Result<LossValue> {
        let dists = self.true_targets(targets)?;
        self.kl_to(g, predicted_dist, &dists)
    }

    /// `L_F`: KL from the ground-false distribution of the keypoints decoded
    /// from `reference_logits`. Only the reference's value is read.
    pub fn loss_false<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        predicted_dist: Var,
        reference_logits: Var,
    ) -> Result<LossValue> {
        let decoded = decode_batch(g.value(reference_logits))?;
        let dists = self.false_targets(&decoded)?;
        self.kl_to(g, predicted_dist, &dists)
    }
}

/// Loss used to compare two hypotheses' outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisparityKind {
    /// `L_T` of the first head's distribution against `P_T` at the second head's argmax.
    Kl,
    /// Mean squared difference of raw maps, second head as fixed reference.
    L2,
}

/// `disp(f', f)`: batch mean of `L(f', f)`. `reference` only contributes its value.
pub fn disparity<T: Scalar>(
    g: &mut Graph<T>,
    kl: &KlLoss,
    adversarial_logits: Var,
    reference_logits: Var,
    kind: DisparityKind,
) -> Result<LossValue> {
    if g.shape(adversarial_logits) != g.shape(reference_logits) {
        return Err(Error::shape(
            "disparity",
            g.shape(adversarial_logits),
            g.shape(reference_logits),
        ));
    }
    match kind {
        DisparityKind::Kl => {
            let decoded = decode_batch(g.value(reference_logits))?;
            let p = g.spatial_softmax(adversarial_logits)?;
            kl.loss_true(g, p, &decoded)
        }
        DisparityKind::L2 => {
            let target = g.value(reference_logits).clone();
            loss_mse(g, adversarial_logits, &target)
        }
    }
}

/// `disp_target − disp_source`.
pub fn discrepancy<T: Scalar>(g: &mut Graph<T>, target: &LossValue, source: &LossValue) -> Result<LossValue> {
    if target.per_keypoint.len() != source.per_keypoint.len() {
        return Err(Error::invalid("disparity_discrepancy", "keypoint counts differ"));
    }
    let value = g.sub(target.value, source.value)?;
    let per_keypoint = target
        .per_keypoint
        .iter()
        .zip(&source.per_keypoint)
        .map(|(t, s)| t - s)
        .collect();
    Ok(LossValue { value, per_keypoint })
}

/// Disparity discrepancy estimated on one source and one target batch of
/// `(f', f)` logit pairs.
pub fn disparity_discrepancy<T: Scalar>(
    g: &mut Graph<T>,
    kl: &KlLoss,
    source: (Var, Var),
    target: (Var, Var),
    kind: DisparityKind,
) -> Result<LossValue> {
    for (name, v) in [("source", source.0), ("target", target.0)] {
        if g.shape(v).first().copied().unwrap_or(0) == 0 {
            return Err(Error::invalid("disparity_discrepancy", format!("empty {name} batch")));
        }
    }
    let dt = disparity(g, kl, target.0, target.1, kind)?;
    let ds = disparity(g, kl, source.0, source.1, kind)?;
    discrepancy(g, &dt, &ds)
}
