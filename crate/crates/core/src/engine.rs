// SPDX-License-Identifier: MIT OR Apache-2.0

//! Semi-nonnegative matrix factorization `A ≈ Z Y` with `Y ≥ 0`.
//!
//! One iteration is: closed-form ridge solve for `Z`, hard winner-take-all
//! sparsification of every column of `Z`, multiplicative update of `Y`, and
//! a rescaling that gives every row of `Y` unit ℓ₂ norm while leaving the
//! product `Z Y` unchanged.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnmfError};
use crate::linalg::Cholesky;
use crate::scalar::Scalar;
use crate::FactorizationBundle;

pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 700;
pub const DEFAULT_REL_TOL: f64 = 1e-7;
pub const DEFAULT_SPARSITY: f64 = 0.01;

/// Hyperparameters of a single factorization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationConfig {
    /// Number of features.
    pub k: usize,
    /// Winner-take-all keep fraction per feature column, in `(0, 1]`.
    /// `1.0` disables sparsification.
    pub sparsity: f64,
    /// Ridge constant of the feature solve.
    pub lambda: f64,
    /// Added to the denominator of the multiplicative update.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once `|L_prev - L| <= rel_tol * L_prev`.
    pub rel_tol: f64,
    pub seed: u64,
    /// Rescale rows of `Y` to unit norm after each iteration.
    pub renormalize: bool,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        Self {
            k: 100,
            sparsity: DEFAULT_SPARSITY,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
            seed: 0,
            renormalize: true,
        }
    }
}

impl FactorizationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SnmfError::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad(format!("sparsity must lie in (0, 1], got {}", self.sparsity));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and > 0, got {}", self.epsilon));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.rel_tol >= 0.0) {
            return bad(format!("rel_tol must be >= 0, got {}", self.rel_tol));
        }
        Ok(())
    }
}

/// `(iteration, ½‖A − ZY‖²_F)` pairs, iterations strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossTrace(Vec<(usize, f64)>);

impl LossTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(usize, f64)>) -> Self {
        Self(pairs)
    }

    /// Panics if `iteration` does not increase or `loss` is negative.
    pub fn push(&mut self, iteration: usize, loss: f64) {
        if let Some(&(last, _)) = self.0.last() {
            assert!(iteration > last, "loss trace iterations must increase");
        }
        assert!(loss >= 0.0 || loss.is_nan(), "loss must be non-negative");
        self.0.push((iteration, loss));
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.0.last().map(|&(_, l)| l)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// What an observer sees after each completed iteration.
pub struct IterationState<'a, T> {
    pub iteration: usize,
    pub loss: f64,
    pub z: &'a Array2<T>,
    pub y: &'a Array2<T>,
}

/// Prints `iter=<i> loss=<v>` to stderr every `every` iterations.
pub fn stderr_progress<T>(every: usize) -> impl FnMut(&IterationState<'_, T>) {
    move |s| {
        if every > 0 && s.iteration % every == 0 {
            eprintln!("iter={} loss={:e}", s.iteration, s.loss);
        }
    }
}

/// Random starting point: `Z` i.i.d. standard normal, `Y` i.i.d. uniform on `[0, 1)`.
///
/// `Z` is drawn first (row-major), then `Y`, from one ChaCha8 stream.
pub fn init_factors<T: Scalar>(
    d_a: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<(Array2<T>, Array2<T>)> {
    if d_a == 0 || k == 0 || n == 0 {
        return Err(SnmfError::InvalidArgument(format!(
            "init_factors needs positive dimensions, got d_a={d_a} k={k} n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_simple_fn((d_a, k), || {
        T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
    });
    let y = Array2::from_shape_simple_fn((k, n), || T::from_f64_lossy(rng.random::<f64>()));
    Ok((z, y))
}

/// Closed-form feature update `Z = A Yᵀ (Y Yᵀ + λI)⁻¹`.
pub fn update_features<T: Scalar>(
    a: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    lambda: T,
) -> Result<Array2<T>> {
    if a.ncols() != y.ncols() {
        return Err(SnmfError::DimensionMismatch(format!(
            "A has {} columns, Y has {}",
            a.ncols(),
            y.ncols()
        )));
    }
    let mut gram = y.dot(&y.t());
    for i in 0..gram.nrows() {
        gram[[i, i]] += lambda;
    }
    let rhs = a.dot(&y.t());
    Cholesky::new(gram.view())?.solve_right(rhs.view())
}

#[inline]
fn pos<T: Scalar>(v: T) -> T {
    v.max(T::zero())
}

#[inline]
fn neg<T: Scalar>(v: T) -> T {
    (-v).max(T::zero())
}

/// Multiplicative coefficient update
/// `Y ← Y ⊙ sqrt(([ZᵀA]₊ + [ZᵀZ]₋ Y) / ([ZᵀA]₋ + [ZᵀZ]₊ Y + ε))`.
///
/// Output is nonnegative whenever `Y` is, and zeros stay zero.
pub fn update_coefficients<T: Scalar>(
    a: ArrayView2<'_, T>,
    z: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    epsilon: T,
) -> Result<Array2<T>> {
    let mut out = y.to_owned();
    update_coefficients_in_place(a, z, &mut out, epsilon)?;
    Ok(out)
}

pub fn update_coefficients_in_place<T: Scalar>(
    a: ArrayView2<'_, T>,
    z: ArrayView2<'_, T>,
    y: &mut Array2<T>,
    epsilon: T,
) -> Result<()> {
    if a.nrows() != z.nrows() || z.ncols() != y.nrows() || a.ncols() != y.ncols() {
        return Err(SnmfError::DimensionMismatch(format!(
            "A {:?}, Z {:?}, Y {:?} do not compose",
            a.dim(),
            z.dim(),
            y.dim()
        )));
    }
    if !(epsilon > T::zero()) {
        return Err(SnmfError::InvalidArgument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let zta = z.t().dot(&a);
    let ztz = z.t().dot(&z);
    let ztz_pos = ztz.mapv(pos);
    let ztz_neg = ztz.mapv(neg);
    let num_y = ztz_neg.dot(&*y);
    let den_y = ztz_pos.dot(&*y);
    Zip::from(&mut *y)
        .and(&zta)
        .and(&num_y)
        .and(&den_y)
        .for_each(|yv, &g, &ny, &dy| {
            if *yv > T::zero() {
                let num = pos(g) + ny;
                let den = neg(g) + dy + epsilon;
                *yv *= (num / den).sqrt();
            }
        });
    Ok(())
}

/// Support size kept by winner-take-all: `⌈p · d_a⌉`, at least 1.
///
/// Products that land within rounding of an integer count as that integer,
/// so `p = 6/64` on 64 rows keeps exactly 6.
pub fn wta_support_size(d_a: usize, p: f64) -> usize {
    if d_a == 0 {
        return 0;
    }
    let x = p * d_a as f64;
    let r = x.round();
    let kept = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (kept as usize).clamp(1, d_a)
}

/// Keeps the `⌈p · d_a⌉` largest-magnitude entries of each column of `Z`.
/// Ties go to the lower row index.
pub fn apply_wta<T: Scalar>(z: ArrayView2<'_, T>, p: f64) -> Array2<T> {
    let mut out = z.to_owned();
    apply_wta_in_place(&mut out, p);
    out
}

pub fn apply_wta_in_place<T: Scalar>(z: &mut Array2<T>, p: f64) {
    let d_a = z.nrows();
    let keep = wta_support_size(d_a, p);
    if keep >= d_a {
        return;
    }
    let mut order: Vec<usize> = Vec::with_capacity(d_a);
    for mut col in z.columns_mut() {
        order.clear();
        order.extend(0..d_a);
        let by_magnitude = |&i: &usize, &j: &usize| {
            col[j]
                .abs()
                .partial_cmp(&col[i].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        };
        order.select_nth_unstable_by(keep - 1, by_magnitude);
        for &i in &order[keep..] {
            col[i] = T::zero();
        }
    }
}

/// Scales each nonzero row of `Y` to unit ℓ₂ norm and the matching column
/// of `Z` by the inverse factor. All-zero rows are left alone.
pub fn renormalize<T: Scalar>(
    z: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>) {
    let mut z = z.to_owned();
    let mut y = y.to_owned();
    renormalize_in_place(&mut z, &mut y);
    (z, y)
}

pub fn renormalize_in_place<T: Scalar>(z: &mut Array2<T>, y: &mut Array2<T>) {
    assert_eq!(z.ncols(), y.nrows(), "Z columns must match Y rows");
    for (mut zc, mut yr) in z.axis_iter_mut(Axis(1)).zip(y.axis_iter_mut(Axis(0))) {
        let norm = yr.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() && norm.is_finite() {
            yr.mapv_inplace(|v| v / norm);
            zc.mapv_inplace(|v| v * norm);
        }
    }
}

/// `½ ‖A − Z Y‖²_F`.
pub fn reconstruction_loss<T: Scalar>(
    a: ArrayView2<'_, T>,
    z: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
) -> T {
    let zy = z.dot(&y);
    let sq: T = Zip::from(&a)
        .and(&zy)
        .fold(T::zero(), |acc, &x, &r| acc + (x - r) * (x - r));
    T::half() * sq
}

/// Runs the full alternating optimization. See [`factorize_with`] to observe
/// every iteration.
pub fn factorize<T: Scalar>(
    a: ArrayView2<'_, T>,
    config: &FactorizationConfig,
) -> Result<FactorizationBundle<T>> {
    factorize_with(a, config, |_: &IterationState<'_, T>| {})
}

pub fn factorize_with<T, F>(
    a: ArrayView2<'_, T>,
    config: &FactorizationConfig,
    mut observe: F,
) -> Result<FactorizationBundle<T>>
where
    T: Scalar,
    F: FnMut(&IterationState<'_, T>),
{
    config.validate()?;
    let (d_a, n) = a.dim();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SnmfError::NonFinite);
    }
    if config.k > d_a.min(n) {
        log::warn!(
            "k={} exceeds min(d_a={d_a}, n={n}); the factorization is over-complete",
            config.k
        );
    }
    let lambda = T::from_f64_lossy(config.lambda);
    let epsilon = T::from_f64_lossy(config.epsilon);
    let (mut z, mut y) = init_factors::<T>(d_a, config.k, n, config.seed)?;
    let mut trace = LossTrace::new();
    let mut prev: Option<f64> = None;

    for it in 0..config.max_iters {
        z = update_features(a, y.view(), lambda)?;
        if config.sparsity < 1.0 {
            apply_wta_in_place(&mut z, config.sparsity);
        }
        update_coefficients_in_place(a, z.view(), &mut y, epsilon)?;
        if config.renormalize {
            renormalize_in_place(&mut z, &mut y);
        }
        let loss = reconstruction_loss(a, z.view(), y.view()).to_f64_lossy();
        trace.push(it, loss);
        observe(&IterationState {
            iteration: it,
            loss,
            z: &z,
            y: &y,
        });
        if !loss.is_finite() {
            return Err(SnmfError::NonFinite);
        }
        if loss == 0.0 {
            break;
        }
        if let Some(p) = prev {
            if (p - loss).abs() <= config.rel_tol * p {
                break;
            }
        }
        prev = Some(loss);
    }

    Ok(FactorizationBundle {
        z,
        y,
        config: config.clone(),
        loss_trace: trace,
        columns: None,
    })
}
