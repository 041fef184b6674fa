// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature hierarchies: recursive factorization of the feature matrix, joint
//! fine-tuning of the whole chain, context maps back to token positions, and
//! the pruned parent/child feature tree.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::analysis::top_contexts;
use crate::engine::{factorize_with, FactorizationConfig, IterationState, LossTrace};
use crate::error::{Result, SnmfError};
use crate::io::{FactorizationBundle, TokenContext};
use crate::scalar::Scalar;

pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_TOP_CONTEXTS: usize = 10;

/// One level of the chain. Level 0 factors `A`; level `i + 1` factors `Z_i`,
/// so `Y_{i+1}` is `k_{i+1} x k_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel<T> {
    pub index: usize,
    pub z: Array2<T>,
    pub y: Array2<T>,
    pub config: FactorizationConfig,
    pub loss_trace: LossTrace,
}

impl<T: Scalar> HierarchyLevel<T> {
    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    pub fn to_bundle(&self, columns: Option<Vec<TokenContext>>) -> FactorizationBundle<T> {
        FactorizationBundle {
            z: self.z.clone(),
            y: self.y.clone(),
            config: self.config.clone(),
            loss_trace: self.loss_trace.clone(),
            columns,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyResult<T> {
    pub levels: Vec<HierarchyLevel<T>>,
}

impl<T: Scalar> HierarchyResult<T> {
    pub fn k_schedule(&self) -> Vec<usize> {
        self.levels.iter().map(HierarchyLevel::k).collect()
    }

    pub fn top(&self) -> &HierarchyLevel<T> {
        self.levels.last().expect("a hierarchy has at least one level")
    }

    /// The coefficient chain `[Y_0, .., Y_L]`.
    pub fn coefficients(&self) -> Vec<Array2<T>> {
        self.levels.iter().map(|l| l.y.clone()).collect()
    }

    /// `½‖A − Z_L Y_L ⋯ Y_0‖²`.
    pub fn joint_loss(&self, a: ArrayView2<'_, T>) -> Result<T> {
        chain_loss(a, self.top().z.view(), &self.coefficients())
    }

    /// `½‖Z_i − Z_{i+1} Y_{i+1}‖²` for each adjacent pair.
    pub fn level_residuals(&self) -> Vec<T> {
        self.levels
            .windows(2)
            .map(|w| {
                let zy = w[1].z.dot(&w[1].y);
                T::half()
                    * Zip::from(&w[0].z)
                        .and(&zy)
                        .fold(T::zero(), |acc, &x, &r| acc + (x - r) * (x - r))
            })
            .collect()
    }
}

/// Factors `A` with `k_schedule[0]`, then each resulting `Z` with the next
/// entry. Level `i` uses `config` with `k = k_schedule[i]` and seed `seed + i`.
pub fn recursive_factorize<T: Scalar>(
    a: ArrayView2<'_, T>,
    k_schedule: &[usize],
    config: &FactorizationConfig,
) -> Result<HierarchyResult<T>> {
    recursive_factorize_with(a, k_schedule, config, |_, _: &IterationState<'_, T>| {})
}

/// Like [`recursive_factorize`], reporting `(level, state)` after every iteration.
pub fn recursive_factorize_with<T, F>(
    a: ArrayView2<'_, T>,
    k_schedule: &[usize],
    config: &FactorizationConfig,
    mut observe: F,
) -> Result<HierarchyResult<T>>
where
    T: Scalar,
    F: FnMut(usize, &IterationState<'_, T>),
{
    if k_schedule.is_empty() {
        return Err(SnmfError::InvalidConfig("k schedule is empty".into()));
    }
    if let Some(w) = k_schedule.windows(2).find(|w| w[1] >= w[0]) {
        return Err(SnmfError::InvalidConfig(format!(
            "k schedule must be strictly decreasing, found {} then {}",
            w[0], w[1]
        )));
    }
    let mut levels: Vec<HierarchyLevel<T>> = Vec::with_capacity(k_schedule.len());
    for (i, &k) in k_schedule.iter().enumerate() {
        let cfg = FactorizationConfig {
            k,
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let input = match levels.last() {
            Some(prev) => prev.z.view(),
            None => a,
        };
        let b = factorize_with(input, &cfg, |s| observe(i, s))?;
        log::info!(
            "level {i}: k={k} loss={:e} after {} iterations",
            b.loss_trace.last_loss().unwrap_or(f64::NAN),
            b.loss_trace.len()
        );
        levels.push(HierarchyLevel {
            index: i,
            z: b.z,
            y: b.y,
            config: cfg,
            loss_trace: b.loss_trace,
        });
    }
    Ok(HierarchyResult { levels })
}

fn check_chain<T: Scalar>(a: ArrayView2<'_, T>, z: ArrayView2<'_, T>, ys: &[Array2<T>]) -> Result<()> {
    let Some(y0) = ys.first() else {
        return Err(SnmfError::InvalidArgument("empty coefficient chain".into()));
    };
    if y0.ncols() != a.ncols() {
        return Err(SnmfError::DimensionMismatch(format!(
            "Y_0 has {} columns, A has {}",
            y0.ncols(),
            a.ncols()
        )));
    }
    for i in 1..ys.len() {
        if ys[i].ncols() != ys[i - 1].nrows() {
            return Err(SnmfError::DimensionMismatch(format!(
                "Y_{i} is {}x{} but Y_{} has {} rows",
                ys[i].nrows(),
                ys[i].ncols(),
                i - 1,
                ys[i - 1].nrows()
            )));
        }
    }
    let top = ys.last().expect("non-empty");
    if z.nrows() != a.nrows() || z.ncols() != top.nrows() {
        return Err(SnmfError::DimensionMismatch(format!(
            "Z_L is {}x{}, expected {}x{}",
            z.nrows(),
            z.ncols(),
            a.nrows(),
            top.nrows()
        )));
    }
    Ok(())
}

/// `[P_0, .., P_L]` with `P_0 = Y_0` and `P_i = Y_i P_{i-1}`.
fn prefix_products<T: Scalar>(ys: &[Array2<T>]) -> Vec<Array2<T>> {
    let mut out: Vec<Array2<T>> = Vec::with_capacity(ys.len());
    for y in ys {
        let p = match out.last() {
            Some(prev) => y.dot(prev),
            None => y.clone(),
        };
        out.push(p);
    }
    out
}

fn half_sq_norm<T: Scalar>(m: &Array2<T>) -> T {
    T::half() * m.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

/// `½‖A − Z Y_L ⋯ Y_0‖²` for a coefficient chain `ys = [Y_0, .., Y_L]`.
pub fn chain_loss<T: Scalar>(a: ArrayView2<'_, T>, z: ArrayView2<'_, T>, ys: &[Array2<T>]) -> Result<T> {
    check_chain(a, z, ys)?;
    let p = prefix_products(ys);
    let r = &a - &z.dot(p.last().expect("non-empty"));
    Ok(half_sq_norm(&r))
}

#[derive(Debug, Clone)]
pub struct ChainGradients<T> {
    pub loss: T,
    pub z: Array2<T>,
    /// Gradient for each `Y_i`, same order as the chain.
    pub ys: Vec<Array2<T>>,
}

/// Loss and full (unmasked) gradients of [`chain_loss`].
pub fn chain_gradients<T: Scalar>(
    a: ArrayView2<'_, T>,
    z: ArrayView2<'_, T>,
    ys: &[Array2<T>],
) -> Result<ChainGradients<T>> {
    check_chain(a, z, ys)?;
    let p = prefix_products(ys);
    let top = ys.len() - 1;
    let r = &a - &z.dot(&p[top]);
    let loss = half_sq_norm(&r);
    let grad_z = -r.dot(&p[top].t());

    let mut grads = vec![Array2::<T>::zeros((0, 0)); ys.len()];
    let mut q = z.to_owned();
    for i in (0..=top).rev() {
        let qr = q.t().dot(&r);
        let g = if i == 0 { qr } else { qr.dot(&p[i - 1].t()) };
        grads[i] = -g;
        if i > 0 {
            q = q.dot(&ys[i]);
        }
    }
    Ok(ChainGradients {
        loss,
        z: grad_z,
        ys: grads,
    })
}

/// Step size for [`fine_tune`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Fixed(f64),
    /// Half the inverse of the largest Frobenius bound on any block's
    /// gradient Lipschitz constant, measured at the starting point.
    Auto,
}

impl std::str::FromStr for LearningRate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|e| format!("learning rate must be a number or \"auto\": {e}"))
    }
}

fn sq_fro<T: Scalar>(m: &Array2<T>) -> f64 {
    m.iter().fold(0.0, |acc, v| {
        let x = v.to_f64_lossy();
        acc + x * x
    })
}

fn auto_learning_rate<T: Scalar>(z: &Array2<T>, ys: &[Array2<T>]) -> f64 {
    let p = prefix_products(ys);
    let top = ys.len() - 1;
    let mut bound = sq_fro(&p[top]);
    let mut q = z.clone();
    for i in (0..=top).rev() {
        let b = if i == 0 {
            sq_fro(&q)
        } else {
            sq_fro(&q) * sq_fro(&p[i - 1])
        };
        bound = bound.max(b);
        if i > 0 {
            q = q.dot(&ys[i]);
        }
    }
    if bound > 0.0 {
        0.5 / bound
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome<T> {
    pub result: HierarchyResult<T>,
    pub initial_loss: f64,
    /// Loss of the returned (best-seen) iterate.
    pub final_loss: f64,
    pub learning_rate: f64,
    pub best_step: usize,
    /// Loss before the first step and after each step.
    pub trace: LossTrace,
}

/// Gradient descent on `½‖A − Z_L Y_L ⋯ Y_0‖²` over `Z_L` and every `Y_i`.
///
/// `Z_L` keeps its sparsity pattern (the gradient is masked to its current
/// support) and every `Y_i` is clamped at zero after each step. The best
/// iterate seen is returned. Intermediate `Z_i` are not part of the objective
/// and are left as they were.
pub fn fine_tune<T: Scalar>(
    a: ArrayView2<'_, T>,
    hierarchy: &HierarchyResult<T>,
    learning_rate: LearningRate,
    steps: usize,
) -> Result<FineTuneOutcome<T>> {
    fine_tune_with(a, hierarchy, learning_rate, steps, |_, _| {})
}

/// Like [`fine_tune`], reporting `(step, loss)` after every step.
pub fn fine_tune_with<T, F>(
    a: ArrayView2<'_, T>,
    hierarchy: &HierarchyResult<T>,
    learning_rate: LearningRate,
    steps: usize,
    mut observe: F,
) -> Result<FineTuneOutcome<T>>
where
    T: Scalar,
    F: FnMut(usize, f64),
{
    let mut z = hierarchy.top().z.clone();
    let mut ys = hierarchy.coefficients();
    check_chain(a, z.view(), &ys)?;
    let lr = match learning_rate {
        LearningRate::Fixed(v) if v > 0.0 && v.is_finite() => v,
        LearningRate::Fixed(v) => {
            return Err(SnmfError::InvalidConfig(format!(
                "learning rate must be positive and finite, got {v}"
            )))
        }
        LearningRate::Auto => auto_learning_rate(&z, &ys),
    };
    let step_size = T::from_f64_lossy(lr);
    let mask = z.mapv(|v| if v != T::zero() { T::one() } else { T::zero() });

    let mut trace = LossTrace::new();
    let mut best = (z.clone(), ys.clone());
    let mut best_step = 0;
    let mut initial = f64::NAN;
    let mut best_loss = f64::INFINITY;

    for step in 0..=steps {
        let g = chain_gradients(a, z.view(), &ys)?;
        let loss = g.loss.to_f64_lossy();
        trace.push(step, loss);
        if step == 0 {
            initial = loss;
        } else {
            observe(step, loss);
        }
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(SnmfError::Diverged {
                step,
                loss,
                initial,
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best_step = step;
            best = (z.clone(), ys.clone());
        }
        if step == steps || loss == 0.0 {
            break;
        }
        Zip::from(&mut z)
            .and(&g.z)
            .and(&mask)
            .for_each(|w, &d, &m| *w -= step_size * d * m);
        for (y, d) in ys.iter_mut().zip(&g.ys) {
            Zip::from(y).and(d).for_each(|w, &d| {
                *w -= step_size * d;
                if *w < T::zero() {
                    *w = T::zero();
                }
            });
        }
    }

    let mut result = hierarchy.clone();
    let (bz, bys) = best;
    let top = result.levels.len() - 1;
    result.levels[top].z = bz;
    for (level, y) in result.levels.iter_mut().zip(bys) {
        level.y = y;
    }
    Ok(FineTuneOutcome {
        result,
        initial_loss: initial,
        final_loss: best_loss,
        learning_rate: lr,
        best_step,
        trace,
    })
}

/// `P_i = Y_i ⋯ Y_0`, mapping level-`i` features to the `n` input columns.
pub fn context_map<T: Scalar>(levels: &[HierarchyLevel<T>], i: usize) -> Result<Array2<T>> {
    if i >= levels.len() {
        return Err(SnmfError::InvalidArgument(format!(
            "level {i} out of range for {} levels",
            levels.len()
        )));
    }
    let mut p = levels[0].y.clone();
    for level in &levels[1..=i] {
        if level.y.ncols() != p.nrows() {
            return Err(SnmfError::DimensionMismatch(format!(
                "Y_{} has {} columns, previous level has {} features",
                level.index,
                level.y.ncols(),
                p.nrows()
            )));
        }
        p = level.y.dot(&p);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub level: usize,
    pub feature: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub top_contexts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    /// `[level, feature]` at level `i + 1`.
    pub parent: [usize; 2],
    /// `[level, feature]` at level `i`.
    pub child: [usize; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTree {
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<TreeEdge>,
    pub threshold: f64,
}

fn context_label(columns: Option<&[TokenContext]>, j: usize) -> String {
    match columns.map(|c| &c[j]) {
        Some(c) if !c.window_text.is_empty() => c.window_text.clone(),
        Some(c) => c.token_text.clone(),
        None => format!("#{j}"),
    }
}

/// Connects each level-`i + 1` feature to the level-`i` features whose share of
/// its (row-normalized) `Y_{i+1}` row is at least `threshold`.
pub fn build_tree<T: Scalar>(
    levels: &[HierarchyLevel<T>],
    threshold: f64,
    top_contexts_per_node: usize,
    columns: Option<&[TokenContext]>,
) -> Result<FeatureTree> {
    if !(threshold >= 0.0) {
        return Err(SnmfError::InvalidArgument(format!(
            "edge threshold must be nonnegative, got {threshold}"
        )));
    }
    let mut nodes = Vec::new();
    for i in 0..levels.len() {
        let p = context_map(levels, i)?;
        for f in 0..p.nrows() {
            let top_contexts = if top_contexts_per_node == 0 {
                Vec::new()
            } else {
                let m = top_contexts_per_node.min(p.ncols());
                top_contexts(p.view(), columns, f, m)?
                    .hits
                    .iter()
                    .map(|h| context_label(columns, h.column))
                    .collect()
            };
            nodes.push(TreeNode {
                level: i,
                feature: f,
                label: None,
                top_contexts,
            });
        }
    }
    let mut edges = Vec::new();
    for upper in &levels[1..] {
        let i = upper.index;
        for (p, row) in upper.y.rows().into_iter().enumerate() {
            let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
            if !(sum > 0.0) {
                continue;
            }
            for (c, v) in row.iter().enumerate() {
                let w = v.to_f64_lossy() / sum;
                if w > 0.0 && w >= threshold {
                    edges.push(TreeEdge {
                        parent: [i, p],
                        child: [i - 1, c],
                        weight: w,
                    });
                }
            }
        }
    }
    Ok(FeatureTree {
        nodes,
        edges,
        threshold,
    })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

impl FeatureTree {
    /// Attaches a human-readable label to a node. Returns false if no such node exists.
    pub fn set_label(&mut self, level: usize, feature: usize, label: impl Into<String>) -> bool {
        match self
            .nodes
            .iter_mut()
            .find(|n| n.level == level && n.feature == feature)
        {
            Some(n) => {
                n.label = Some(label.into());
                true
            }
            None => false,
        }
    }

    /// Children of `[level, feature]`, in edge order.
    pub fn children(&self, level: usize, feature: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.parent == [level, feature])
            .map(|e| e.child[1])
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph feature_tree {\n  rankdir=BT;\n  node [shape=box];\n");
        for n in &self.nodes {
            let mut label = match &n.label {
                Some(l) => format!("L{} #{}: {}", n.level, n.feature, l),
                None => format!("L{} #{}", n.level, n.feature),
            };
            for c in n.top_contexts.iter().take(3) {
                label.push('\n');
                label.push_str(c);
            }
            let _ = writeln!(s, "  n{}_{} [label=\"{}\"];", n.level, n.feature, dot_escape(&label));
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  n{}_{} -> n{}_{} [label=\"{:.3}\"];",
                e.child[0], e.child[1], e.parent[0], e.parent[1], e.weight
            );
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn level(index: usize, z: Array2<f64>, y: Array2<f64>) -> HierarchyLevel<f64> {
        HierarchyLevel {
            index,
            config: FactorizationConfig {
                k: z.ncols(),
                ..Default::default()
            },
            z,
            y,
            loss_trace: LossTrace::new(),
        }
    }

    #[test]
    fn schedule_must_decrease() {
        let a = Array2::<f64>::ones((4, 6));
        let cfg = FactorizationConfig::default();
        assert!(recursive_factorize(a.view(), &[2, 2], &cfg).is_err());
        assert!(recursive_factorize(a.view(), &[2, 3], &cfg).is_err());
        assert!(recursive_factorize(a.view(), &[], &cfg).is_err());
    }

    #[test]
    fn context_map_identity_propagation() {
        let y0 = array![[1.0, 0.0, 2.0], [0.5, 0.5, 0.0]];
        let levels = vec![
            level(0, Array2::zeros((4, 2)), y0.clone()),
            level(1, Array2::zeros((4, 2)), Array2::eye(2)),
        ];
        assert_eq!(context_map(&levels, 0).unwrap(), y0);
        assert_eq!(context_map(&levels, 1).unwrap(), y0);
        assert!(context_map(&levels, 2).is_err());
    }

    #[test]
    fn tree_threshold_filter() {
        let levels = vec![
            level(0, Array2::zeros((3, 2)), Array2::ones((2, 4))),
            level(1, Array2::zeros((3, 2)), array![[0.9, 0.05], [0.0, 0.8]]),
        ];
        let t = build_tree(&levels, 0.1, 2, None).unwrap();
        let pairs: Vec<_> = t.edges.iter().map(|e| (e.parent, e.child)).collect();
        assert_eq!(pairs, vec![([1, 0], [0, 0]), ([1, 1], [0, 1])]);
        assert_eq!(t.nodes.len(), 4);

        let all = build_tree(&levels, 0.0, 0, None).unwrap();
        assert_eq!(all.edges.len(), 3);
        assert!(build_tree(&levels, -1.0, 0, None).is_err());
    }

    #[test]
    fn zero_steps_leave_levels_unchanged() {
        let a = array![[1.0, 2.0, 0.5], [0.0, 1.0, 3.0]];
        let h = HierarchyResult {
            levels: vec![level(0, array![[1.0], [0.5]], array![[1.0, 2.0, 1.5]])],
        };
        let out = fine_tune(a.view(), &h, LearningRate::Fixed(0.01), 0).unwrap();
        assert_eq!(out.result, h);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn fine_tune_reduces_loss_and_keeps_support() {
        let a = array![[1.0, 2.0, 0.5, 0.0], [0.0, 1.0, 3.0, 1.0], [2.0, 0.0, 1.0, 1.0]];
        let h = HierarchyResult {
            levels: vec![
                level(0, Array2::zeros((3, 2)), array![[1.0, 0.2, 0.0, 0.5], [0.1, 0.3, 1.0, 0.4]]),
                level(1, array![[1.0], [0.0], [0.7]], array![[0.6, 0.8]]),
            ],
        };
        let out = fine_tune(a.view(), &h, LearningRate::Auto, 50).unwrap();
        assert!(out.final_loss < out.initial_loss);
        let top = &out.result.levels[1];
        assert_eq!(top.z[[1, 0]], 0.0);
        assert!(out.result.levels.iter().all(|l| l.y.iter().all(|&v| v >= 0.0)));
        assert_eq!(out.result.levels[0].z, h.levels[0].z);
    }

    #[test]
    fn huge_step_reports_divergence() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let h = HierarchyResult {
            levels: vec![level(0, array![[1.0], [1.0]], array![[1.0, 1.0]])],
        };
        assert!(matches!(
            fine_tune(a.view(), &h, LearningRate::Fixed(10.0), 20),
            Err(SnmfError::Diverged { .. })
        ));
        assert!(fine_tune(a.view(), &h, LearningRate::Fixed(0.0), 1).is_err());
    }

    #[test]
    fn learning_rate_parses() {
        assert_eq!("auto".parse::<LearningRate>().unwrap(), LearningRate::Auto);
        assert_eq!("0.5".parse::<LearningRate>().unwrap(), LearningRate::Fixed(0.5));
        assert!("fast".parse::<LearningRate>().is_err());
    }

    #[test]
    fn dot_export_escapes_quotes() {
        let mut t = FeatureTree {
            nodes: vec![TreeNode {
                level: 0,
                feature: 0,
                label: None,
                top_contexts: vec!["say \"hi\"".into()],
            }],
            edges: vec![],
            threshold: 0.1,
        };
        assert!(t.set_label(0, 0, "greeting"));
        assert!(!t.set_label(1, 0, "missing"));
        let dot = t.to_dot();
        assert!(dot.contains("say \\\"hi\\\""));
        assert!(dot.contains("greeting"));
    }
}
