// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering interventions against an abstract logit oracle: KL divergence
//! between output distributions, KL-targeted scale calibration, and
//! neuron-group amplification.

use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SnmfError};
use crate::scalar::Scalar;

pub const DEFAULT_KL_TARGETS: [f64; 7] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];

/// Where an intervention is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The `d_a`-dimensional MLP hidden activation.
    MlpActivation,
    /// The `d`-dimensional MLP output written to the residual stream.
    MlpOutput,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::MlpActivation => "mlp_activation",
            Site::MlpOutput => "mlp_output",
        })
    }
}

impl std::str::FromStr for Site {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp_activation" => Ok(Site::MlpActivation),
            "mlp_output" => Ok(Site::MlpOutput),
            other => Err(format!(
                "unknown site {other:?}; expected mlp_activation or mlp_output"
            )),
        }
    }
}

/// `+f` or `−f`. Serialized as the integer `1` or `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub const BOTH: [Sign; 2] = [Sign::Positive, Sign::Negative];

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }

    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Sign::Positive => v,
            Sign::Negative => -v,
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i64::deserialize(d)? {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            other => Err(serde::de::Error::custom(format!(
                "sign must be 1 or -1, got {other}"
            ))),
        }
    }
}

/// Adds `sign * scale * direction` at `site` of `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec<T> {
    pub site: Site,
    pub layer: usize,
    pub direction: Array1<T>,
    pub sign: Sign,
    pub scale: T,
}

impl<T: Scalar> InterventionSpec<T> {
    pub fn new(site: Site, layer: usize, direction: Array1<T>, sign: Sign, scale: T) -> Result<Self> {
        let spec = Self {
            site,
            layer,
            direction,
            sign,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.direction.iter().any(|v| !v.is_finite()) {
            return Err(SnmfError::NonFinite);
        }
        if self.direction.iter().all(|v| *v == T::zero()) {
            return Err(SnmfError::InvalidArgument(
                "intervention direction is zero".into(),
            ));
        }
        if !self.scale.is_finite() || self.scale < T::zero() {
            return Err(SnmfError::InvalidArgument(format!(
                "intervention scale must be finite and nonnegative, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn with_scale(&self, scale: T) -> Self {
        Self {
            scale,
            ..self.clone()
        }
    }

    /// The additive offset `sign * scale * direction`.
    pub fn offset(&self) -> Array1<T> {
        let s = self.sign.apply(self.scale);
        self.direction.mapv(|v| v * s)
    }
}

/// A fixed model and prompt that turns an optional intervention into logits.
/// Must be deterministic: the same spec always yields the same logits.
pub trait LogitOracle<T: Scalar> {
    fn vocab_size(&self) -> usize;

    /// Expected direction length at `site`, or `None` if the site is unsupported.
    fn direction_dim(&self, site: Site) -> Option<usize>;

    fn evaluate(&self, spec: Option<&InterventionSpec<T>>) -> Result<Array1<T>>;

    /// Whether `evaluate` may be called from several threads at once.
    fn concurrency_safe(&self) -> bool {
        false
    }
}

/// Logits that respond linearly to interventions at one layer:
/// `base + U δ` at the output site and `base + U W_V δ` at the activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReadoutOracle<T> {
    pub base_logits: Array1<T>,
    /// `|V| x d` unembedding.
    pub unembed: Array2<T>,
    /// `d x d_a` MLP down-projection, needed for the activation site.
    pub w_v: Option<Array2<T>>,
    pub layer: usize,
}

impl<T: Scalar> LinearReadoutOracle<T> {
    pub fn new(
        base_logits: Array1<T>,
        unembed: Array2<T>,
        w_v: Option<Array2<T>>,
        layer: usize,
    ) -> Result<Self> {
        if base_logits.len() != unembed.nrows() {
            return Err(SnmfError::DimensionMismatch(format!(
                "{} base logits for a {}-token unembedding",
                base_logits.len(),
                unembed.nrows()
            )));
        }
        if base_logits.len() < 2 {
            return Err(SnmfError::InvalidArgument(
                "vocabulary needs at least two tokens".into(),
            ));
        }
        if let Some(w) = &w_v {
            if w.nrows() != unembed.ncols() {
                return Err(SnmfError::DimensionMismatch(format!(
                    "W_V has {} rows, unembedding has {} columns",
                    w.nrows(),
                    unembed.ncols()
                )));
            }
        }
        Ok(Self {
            base_logits,
            unembed,
            w_v,
            layer,
        })
    }

    /// Random standard-normal model: base logits, `|V| x d` unembedding and
    /// `d x d_a` down-projection scaled by `1/sqrt(d)` and `1/sqrt(d_a)`.
    pub fn synthetic(vocab: usize, d: usize, d_a: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_a == 0 {
            return Err(SnmfError::InvalidArgument(
                "synthetic oracle needs positive dimensions".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * scale);
        let base = Array1::from_shape_simple_fn(vocab, || draw(1.0));
        let unembed = Array2::from_shape_simple_fn((vocab, d), || draw(1.0 / (d as f64).sqrt()));
        let w_v = Array2::from_shape_simple_fn((d, d_a), || draw(1.0 / (d_a as f64).sqrt()));
        Self::new(base, unembed, Some(w_v), 0)
    }
}

impl<T: Scalar> LogitOracle<T> for LinearReadoutOracle<T> {
    fn vocab_size(&self) -> usize {
        self.base_logits.len()
    }

    fn direction_dim(&self, site: Site) -> Option<usize> {
        match site {
            Site::MlpOutput => Some(self.unembed.ncols()),
            Site::MlpActivation => self.w_v.as_ref().map(|w| w.ncols()),
        }
    }

    fn evaluate(&self, spec: Option<&InterventionSpec<T>>) -> Result<Array1<T>> {
        let Some(spec) = spec else {
            return Ok(self.base_logits.clone());
        };
        spec.validate()?;
        if spec.layer != self.layer {
            return Err(SnmfError::InvalidArgument(format!(
                "oracle reads out layer {}, intervention targets layer {}",
                self.layer, spec.layer
            )));
        }
        let expected = self.direction_dim(spec.site).ok_or_else(|| {
            SnmfError::InvalidArgument(format!("oracle has no {} site", spec.site))
        })?;
        if spec.direction.len() != expected {
            return Err(SnmfError::DimensionMismatch(format!(
                "{} direction has {} entries, expected {expected}",
                spec.site,
                spec.direction.len()
            )));
        }
        let delta = spec.offset();
        let resid = match (spec.site, &self.w_v) {
            (Site::MlpActivation, Some(w)) => w.dot(&delta),
            _ => delta,
        };
        Ok(&self.base_logits + &self.unembed.dot(&resid))
    }

    fn concurrency_safe(&self) -> bool {
        true
    }
}

fn log_softmax<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    x.mapv(|v| v - lse)
}

/// `KL(softmax(base) ‖ softmax(intervened))`, clamped at zero.
pub fn kl_divergence<T: Scalar>(base: &Array1<T>, intervened: &Array1<T>) -> Result<T> {
    if base.len() != intervened.len() {
        return Err(SnmfError::DimensionMismatch(format!(
            "{} base logits, {} intervened logits",
            base.len(),
            intervened.len()
        )));
    }
    if base.len() < 2 {
        return Err(SnmfError::InvalidArgument(
            "KL divergence needs at least two logits".into(),
        ));
    }
    if base.iter().chain(intervened.iter()).any(|v| !v.is_finite()) {
        return Err(SnmfError::NonFinite);
    }
    let lp = log_softmax(base);
    let lq = log_softmax(intervened);
    let kl = lp
        .iter()
        .zip(lq.iter())
        .map(|(&p, &q)| p.exp() * (p - q))
        .sum::<T>();
    Ok(kl.max(T::zero()))
}

/// Scale search: a geometric grid, then bisection inside the first grid
/// interval whose upper end reaches the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearch {
    pub min_scale: f64,
    pub max_scale: f64,
    pub grid_points: usize,
    pub max_bisections: usize,
    /// Bisection stops once `|KL − target| ≤ tolerance · target`.
    pub tolerance: f64,
}

impl Default for ScaleSearch {
    fn default() -> Self {
        Self {
            min_scale: 1e-2,
            max_scale: 1e2,
            grid_points: 16,
            max_bisections: 40,
            tolerance: 1e-3,
        }
    }
}

impl ScaleSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.max_scale > self.min_scale && self.max_scale.is_finite()) {
            return Err(SnmfError::InvalidConfig(format!(
                "scale bounds must satisfy 0 < min < max, got [{}, {}]",
                self.min_scale, self.max_scale
            )));
        }
        if self.grid_points < 2 {
            return Err(SnmfError::InvalidConfig("scale grid needs at least 2 points".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(SnmfError::InvalidConfig("tolerance must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let ratio = self.max_scale / self.min_scale;
        let last = (self.grid_points - 1) as f64;
        (0..self.grid_points)
            .map(|j| {
                if j + 1 == self.grid_points {
                    self.max_scale
                } else {
                    self.min_scale * ratio.powf(j as f64 / last)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleCalibration {
    pub scale: f64,
    pub achieved_kl: f64,
    /// False when even the largest scale stays below the target; `scale` is
    /// then the upper bound.
    pub reachable: bool,
    pub evaluations: usize,
}

/// Finds the scale at which steering along `sign * direction` moves the
/// output distribution by `target_kl`.
pub fn calibrate_scale<T: Scalar>(
    oracle: &dyn LogitOracle<T>,
    template: &InterventionSpec<T>,
    target_kl: f64,
    search: &ScaleSearch,
) -> Result<ScaleCalibration> {
    search.validate()?;
    template.validate()?;
    if !(target_kl > 0.0 && target_kl.is_finite()) {
        return Err(SnmfError::InvalidArgument(format!(
            "target KL must be positive, got {target_kl}"
        )));
    }
    let base = oracle.evaluate(None)?;
    let mut evaluations = 0;
    let mut kl_at = |scale: f64| -> Result<f64> {
        evaluations += 1;
        let logits = oracle.evaluate(Some(&template.with_scale(T::from_f64_lossy(scale))))?;
        Ok(kl_divergence(&base, &logits)?.to_f64_lossy())
    };

    let mut best = (f64::NAN, f64::NAN);
    let consider = |best: &mut (f64, f64), s: f64, kl: f64| {
        if best.0.is_nan() || (kl - target_kl).abs() < (best.1 - target_kl).abs() {
            *best = (s, kl);
        }
    };

    let mut bracket = None;
    let mut prev = 0.0;
    for s in search.grid() {
        let kl = kl_at(s)?;
        consider(&mut best, s, kl);
        if kl >= target_kl {
            bracket = Some((prev, s));
            break;
        }
        prev = s;
    }
    let Some((mut lo, mut hi)) = bracket else {
        let top = search.max_scale;
        let kl = kl_at(top)?;
        log::warn!("target KL {target_kl} unreachable: KL at scale {top} is {kl}");
        return Ok(ScaleCalibration {
            scale: top,
            achieved_kl: kl,
            reachable: false,
            evaluations,
        });
    };

    for _ in 0..search.max_bisections {
        if (best.1 - target_kl).abs() <= search.tolerance * target_kl {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let kl = kl_at(mid)?;
        consider(&mut best, mid, kl);
        if kl < target_kl {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ScaleCalibration {
        scale: best.0,
        achieved_kl: best.1,
        reachable: true,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteeringEntry {
    pub sign: Sign,
    pub target_kl: f64,
    pub scale: f64,
    pub achieved_kl: f64,
    pub reachable: bool,
}

/// Calibrates every (sign, target) pair, signs outermost.
pub fn steering_run<T: Scalar>(
    oracle: &dyn LogitOracle<T>,
    site: Site,
    layer: usize,
    direction: &Array1<T>,
    targets: &[f64],
    search: &ScaleSearch,
) -> Result<Vec<SteeringEntry>> {
    let mut out = Vec::with_capacity(2 * targets.len());
    for sign in Sign::BOTH {
        let template = InterventionSpec::new(site, layer, direction.clone(), sign, T::one())?;
        for &target in targets {
            let c = calibrate_scale(oracle, &template, target, search)?;
            out.push(SteeringEntry {
                sign,
                target_kl: target,
                scale: c.scale,
                achieved_kl: c.achieved_kl,
                reachable: c.reachable,
            });
        }
    }
    Ok(out)
}

/// Logit change from adding `scale` to every neuron in `neurons` at the
/// activation site of `layer`.
pub fn amplify_neurons<T: Scalar>(
    oracle: &dyn LogitOracle<T>,
    layer: usize,
    neurons: &[usize],
    scale: T,
) -> Result<Array1<T>> {
    if neurons.is_empty() {
        return Err(SnmfError::InvalidArgument("neuron set is empty".into()));
    }
    let d_a = oracle.direction_dim(Site::MlpActivation).ok_or_else(|| {
        SnmfError::InvalidArgument("oracle has no mlp_activation site".into())
    })?;
    let mut direction = Array1::<T>::zeros(d_a);
    for &i in neurons {
        if i >= d_a {
            return Err(SnmfError::InvalidArgument(format!(
                "neuron {i} out of range for d_a={d_a}"
            )));
        }
        direction[i] = T::one();
    }
    let spec = InterventionSpec::new(Site::MlpActivation, layer, direction, Sign::Positive, scale)?;
    let base = oracle.evaluate(None)?;
    Ok(oracle.evaluate(Some(&spec))? - &base)
}

/// Portable description of one calibrated intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringManifest {
    pub site: Site,
    pub layer: usize,
    /// Path to the AMX file holding the direction vector.
    pub direction_ref: String,
    pub sign: Sign,
    pub scale: f64,
    pub target_kl: f64,
    pub achieved_kl: f64,
}

impl SteeringManifest {
    pub fn from_entry(site: Site, layer: usize, direction_ref: impl Into<String>, e: &SteeringEntry) -> Self {
        Self {
            site,
            layer,
            direction_ref: direction_ref.into(),
            sign: e.sign,
            scale: e.scale,
            target_kl: e.target_kl,
            achieved_kl: e.achieved_kl,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn oracle() -> LinearReadoutOracle<f64> {
        LinearReadoutOracle::new(
            array![0.0, 0.5, -0.5],
            array![[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]],
            Some(array![[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]),
            3,
        )
        .unwrap()
    }

    #[test]
    fn kl_hand_example() {
        let kl = kl_divergence(&array![0.0, 0.0], &array![3f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
        assert_eq!(kl_divergence(&array![1.0, 2.0, 3.0], &array![1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_bad_input() {
        assert!(kl_divergence(&array![0.0, f64::NAN], &array![0.0, 0.0]).is_err());
        assert!(kl_divergence(&array![0.0], &array![0.0]).is_err());
        assert!(kl_divergence(&array![0.0, 1.0], &array![0.0]).is_err());
    }

    #[test]
    fn spec_validation() {
        let zero = InterventionSpec::new(Site::MlpOutput, 0, array![0.0, 0.0], Sign::Positive, 1.0);
        assert!(zero.is_err());
        let neg = InterventionSpec::new(Site::MlpOutput, 0, array![1.0, 0.0], Sign::Positive, -1.0);
        assert!(neg.is_err());
        let s = InterventionSpec::new(Site::MlpOutput, 0, array![1.0, -2.0], Sign::Negative, 2.0).unwrap();
        assert_eq!(s.offset(), array![-2.0, 4.0]);
    }

    #[test]
    fn sign_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&Sign::Negative).unwrap(), "-1");
        assert_eq!(serde_json::from_str::<Sign>("1").unwrap(), Sign::Positive);
        assert!(serde_json::from_str::<Sign>("0").is_err());
        assert_eq!(serde_json::to_string(&Site::MlpActivation).unwrap(), "\"mlp_activation\"");
    }

    #[test]
    fn oracle_checks_site_layer_and_length() {
        let o = oracle();
        let bad_layer = InterventionSpec::new(Site::MlpOutput, 0, array![1.0, 0.0], Sign::Positive, 1.0).unwrap();
        assert!(o.evaluate(Some(&bad_layer)).is_err());
        let bad_len = InterventionSpec::new(Site::MlpOutput, 3, array![1.0, 0.0, 1.0], Sign::Positive, 1.0).unwrap();
        assert!(o.evaluate(Some(&bad_len)).is_err());
        let ok = InterventionSpec::new(Site::MlpActivation, 3, array![1.0, 0.0, 0.0], Sign::Positive, 1.0).unwrap();
        assert_eq!(o.evaluate(Some(&ok)).unwrap(), array![1.0, 0.5, -1.5]);
    }

    #[test]
    fn amplification_closed_form() {
        let o = oracle();
        let d = amplify_neurons(&o, 3, &[0, 2], 2.0).unwrap();
        // W_V 1_S = [3, -1]; U [3, -1] = [3, -1, -4]
        assert_eq!(d, array![6.0, -2.0, -8.0]);
        assert_eq!(amplify_neurons(&o, 3, &[1], 0.0).unwrap(), array![0.0, 0.0, 0.0]);
        assert!(amplify_neurons(&o, 3, &[], 1.0).is_err());
        assert!(amplify_neurons(&o, 3, &[3], 1.0).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        let o = oracle();
        let t = InterventionSpec::new(Site::MlpOutput, 3, array![1.0, 0.5], Sign::Positive, 1.0).unwrap();
        for target in [1e-4, 0.3, 2.0] {
            let c = calibrate_scale(&o, &t, target, &ScaleSearch::default()).unwrap();
            assert!(c.reachable);
            assert!((c.achieved_kl - target).abs() <= 0.1 * target, "{target}: {c:?}");
        }
    }

    #[test]
    fn null_direction_is_unreachable() {
        // U [1, 1]ᵀ shifts every logit equally, so the softmax never moves.
        let o = LinearReadoutOracle::new(array![0.0, 1.0], array![[1.0, 0.0], [1.0, 0.0]], None, 0).unwrap();
        let t = InterventionSpec::new(Site::MlpOutput, 0, array![1.0, 0.0], Sign::Positive, 1.0).unwrap();
        let c = calibrate_scale(&o, &t, 0.1, &ScaleSearch::default()).unwrap();
        assert!(!c.reachable);
        assert_eq!(c.scale, 1e2);
        assert_eq!(c.achieved_kl, 0.0);
    }

    #[test]
    fn grid_spans_bounds() {
        let g = ScaleSearch::default().grid();
        assert_eq!(g.len(), 16);
        assert!((g[0] - 1e-2).abs() < 1e-18);
        assert_eq!(g[15], 1e2);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn manifest_json_fields() {
        let e = SteeringEntry {
            sign: Sign::Negative,
            target_kl: 0.4,
            scale: 3.5,
            achieved_kl: 0.41,
            reachable: true,
        };
        let m = SteeringManifest::from_entry(Site::MlpOutput, 12, "f.amx", &e);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["sign"], -1);
        assert_eq!(v["site"], "mlp_output");
        assert_eq!(v["direction_ref"], "f.amx");
        let back: SteeringManifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
