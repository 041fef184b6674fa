// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpreting learned features: top activating contexts, concept-detection
//! scores, residual-stream and vocabulary projections, the difference-of-means
//! baseline, and neuron-overlap structure between features.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Result, SnmfError};
use crate::io::TokenContext;
use crate::scalar::Scalar;

/// Floor applied to both mean similarities before taking the log-ratio.
pub const SIMILARITY_FLOOR: f64 = 1e-6;

/// Indices of the `m` largest values, descending, ties to the lower index.
fn top_indices<T: Scalar>(values: ArrayView1<'_, T>, m: usize, key: impl Fn(T) -> T) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        key(values[j])
            .partial_cmp(&key(values[i]))
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(m);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextHit {
    pub column: usize,
    pub weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<TokenContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopContexts {
    pub feature: usize,
    pub hits: Vec<ContextHit>,
    /// No token metadata was available; hits carry column indices only.
    pub metadata_missing: bool,
    /// The feature row is identically zero, so the ranking is pure tie order.
    pub all_zero: bool,
}

/// The `m` columns where row `feature` of `coeffs` (a `Y` or context map) is largest.
pub fn top_contexts<T: Scalar>(
    coeffs: ArrayView2<'_, T>,
    columns: Option<&[TokenContext]>,
    feature: usize,
    m: usize,
) -> Result<TopContexts> {
    if feature >= coeffs.nrows() {
        return Err(SnmfError::InvalidArgument(format!(
            "feature {feature} out of range for {} features",
            coeffs.nrows()
        )));
    }
    if m == 0 {
        return Err(SnmfError::InvalidArgument("m must be at least 1".into()));
    }
    if let Some(c) = columns {
        if c.len() != coeffs.ncols() {
            return Err(SnmfError::DimensionMismatch(format!(
                "{} metadata columns for {} coefficient columns",
                c.len(),
                coeffs.ncols()
            )));
        }
    }
    let row = coeffs.row(feature);
    let all_zero = row.iter().all(|v| *v == T::zero());
    if all_zero {
        log::warn!("feature {feature} has an all-zero coefficient row");
    }
    let hits = top_indices(row, m, |v| v)
        .into_iter()
        .map(|j| ContextHit {
            column: j,
            weight: row[j].to_f64_lossy(),
            context: columns.map(|c| c[j].clone()),
        })
        .collect();
    Ok(TopContexts {
        feature,
        hits,
        metadata_missing: columns.is_none(),
        all_zero,
    })
}

/// Groups the columns of an activation matrix into sentences by `doc_id`,
/// in order of first appearance.
pub fn split_sentences<T: Scalar>(
    activations: ArrayView2<'_, T>,
    columns: &[TokenContext],
) -> Result<Vec<Array2<T>>> {
    if columns.len() != activations.ncols() {
        return Err(SnmfError::DimensionMismatch(format!(
            "{} metadata columns for {} activation columns",
            columns.len(),
            activations.ncols()
        )));
    }
    let mut order: Vec<u64> = Vec::new();
    for c in columns {
        if !order.contains(&c.doc_id) {
            order.push(c.doc_id);
        }
    }
    Ok(order
        .into_iter()
        .map(|doc| {
            let cols: Vec<usize> = columns
                .iter()
                .enumerate()
                .filter(|(_, c)| c.doc_id == doc)
                .map(|(j, _)| j)
                .collect();
            activations.select(Axis(1), &cols)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptScore<T> {
    pub feature: usize,
    /// Mean over activating sentences of the per-sentence max cosine.
    pub a_act: T,
    /// Same for neutral sentences.
    pub a_neu: T,
    pub s_cd: T,
    /// One of the means was floored at [`SIMILARITY_FLOOR`].
    pub clamped: bool,
}

fn norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.dot(&v).sqrt()
}

/// Max cosine similarity between `z` and any token column of `sentence`.
fn sentence_max_cosine<T: Scalar>(z: ArrayView1<'_, T>, z_norm: T, sentence: ArrayView2<'_, T>) -> T {
    sentence
        .columns()
        .into_iter()
        .map(|x| {
            let xn = norm(x);
            if xn > T::zero() {
                z.dot(&x) / (z_norm * xn)
            } else {
                T::zero()
            }
        })
        .fold(T::neg_infinity(), T::max)
}

fn mean_max_cosine<T: Scalar>(
    z: ArrayView1<'_, T>,
    z_norm: T,
    sentences: &[ArrayView2<'_, T>],
    which: &str,
) -> Result<T> {
    if sentences.is_empty() {
        return Err(SnmfError::InvalidArgument(format!("{which} sentence set is empty")));
    }
    let mut sum = T::zero();
    for (i, s) in sentences.iter().enumerate() {
        if s.nrows() != z.len() {
            return Err(SnmfError::DimensionMismatch(format!(
                "{which} sentence {i} has dimension {}, feature has {}",
                s.nrows(),
                z.len()
            )));
        }
        if s.ncols() == 0 {
            return Err(SnmfError::InvalidArgument(format!(
                "{which} sentence {i} has no tokens"
            )));
        }
        sum += sentence_max_cosine(z, z_norm, *s);
    }
    Ok(sum / T::from_usize_lossy(sentences.len()))
}

/// Log-ratio of mean per-sentence max cosine similarity between a feature
/// and activating versus neutral sentences. Each sentence is `d_a x tokens`.
pub fn concept_detection_score<T: Scalar>(
    feature: usize,
    z: ArrayView1<'_, T>,
    activating: &[ArrayView2<'_, T>],
    neutral: &[ArrayView2<'_, T>],
) -> Result<ConceptScore<T>> {
    let z_norm = norm(z);
    if !(z_norm > T::zero()) {
        return Err(SnmfError::InvalidArgument(format!(
            "feature {feature} has zero norm"
        )));
    }
    let a_act = mean_max_cosine(z, z_norm, activating, "activating")?;
    let a_neu = mean_max_cosine(z, z_norm, neutral, "neutral")?;
    let floor = T::from_f64_lossy(SIMILARITY_FLOOR);
    let clamped = a_act < floor || a_neu < floor;
    // ln(a) - ln(b) rather than ln(a / b): swapping the sets negates it exactly.
    let s_cd = a_act.max(floor).ln() - a_neu.max(floor).ln();
    Ok(ConceptScore {
        feature,
        a_act,
        a_neu,
        s_cd,
        clamped,
    })
}

/// Residual-stream direction `f = W_V z` written by an MLP feature.
pub fn residual_feature<T: Scalar>(w_v: ArrayView2<'_, T>, z: ArrayView1<'_, T>) -> Result<Array1<T>> {
    if w_v.ncols() != z.len() {
        return Err(SnmfError::DimensionMismatch(format!(
            "W_V is {}x{}, feature has {} entries",
            w_v.nrows(),
            w_v.ncols(),
            z.len()
        )));
    }
    Ok(w_v.dot(&z))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocabProjection {
    /// Token ids by logit, descending.
    pub top: Vec<usize>,
    /// Token ids by logit, ascending.
    pub bottom: Vec<usize>,
}

/// Projects a residual direction through the unembedding and returns the
/// `m` most promoted and most suppressed token ids.
pub fn vocab_projection<T: Scalar>(
    f: ArrayView1<'_, T>,
    unembed: ArrayView2<'_, T>,
    m: usize,
) -> Result<VocabProjection> {
    if unembed.ncols() != f.len() {
        return Err(SnmfError::DimensionMismatch(format!(
            "unembedding is {}x{}, direction has {} entries",
            unembed.nrows(),
            unembed.ncols(),
            f.len()
        )));
    }
    if m > unembed.nrows() {
        return Err(SnmfError::InvalidArgument(format!(
            "m={m} exceeds vocabulary size {}",
            unembed.nrows()
        )));
    }
    let logits = unembed.dot(&f);
    Ok(VocabProjection {
        top: top_indices(logits.view(), m, |v| v),
        bottom: top_indices(logits.view(), m, |v| -v),
    })
}

/// Difference of means between two sets of representations (columns).
pub fn diff_means<T: Scalar>(positive: ArrayView2<'_, T>, negative: ArrayView2<'_, T>) -> Result<Array1<T>> {
    if positive.ncols() == 0 || negative.ncols() == 0 {
        return Err(SnmfError::InvalidArgument(
            "diff_means needs at least one positive and one negative sample".into(),
        ));
    }
    if positive.nrows() != negative.nrows() {
        return Err(SnmfError::DimensionMismatch(format!(
            "positive samples have dimension {}, negative {}",
            positive.nrows(),
            negative.nrows()
        )));
    }
    let mp = positive.mean_axis(Axis(1)).expect("non-empty");
    let mn = negative.mean_axis(Axis(1)).expect("non-empty");
    Ok(mp - mn)
}

/// Per column, the `m` largest-magnitude entries become 1 and the rest 0.
pub fn binarize_features<T: Scalar>(z: ArrayView2<'_, T>, m: usize) -> Result<Array2<T>> {
    let d_a = z.nrows();
    if m == 0 || m > d_a {
        return Err(SnmfError::InvalidArgument(format!(
            "binarization size must lie in 1..={d_a}, got {m}"
        )));
    }
    let mut out = Array2::<T>::zeros(z.raw_dim());
    for (col, mut dst) in z.columns().into_iter().zip(out.columns_mut()) {
        for i in top_indices(col, m, |v| v.abs()) {
            dst[i] = T::one();
        }
    }
    Ok(out)
}

fn supports<T: Scalar>(zbar: ArrayView2<'_, T>) -> Result<Vec<BTreeSet<usize>>> {
    let mut out = Vec::with_capacity(zbar.ncols());
    for (j, col) in zbar.columns().into_iter().enumerate() {
        let mut s = BTreeSet::new();
        for (i, &v) in col.iter().enumerate() {
            if v == T::one() {
                s.insert(i);
            } else if v != T::zero() {
                return Err(SnmfError::InvalidArgument(format!(
                    "binarized matrix has non-binary entry {v} at ({i}, {j})"
                )));
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// `k x k` counts of shared top neurons between every pair of features.
pub fn overlap_matrix<T: Scalar>(zbar: ArrayView2<'_, T>) -> Result<Array2<u64>> {
    let sup = supports(zbar)?;
    let k = sup.len();
    let mut m = Array2::<u64>::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let c = sup[i].intersection(&sup[j]).count() as u64;
            m[[i, j]] = c;
            m[[j, i]] = c;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeuronSetReport {
    pub group: Vec<usize>,
    /// Neurons in the support of every feature of the group.
    pub base: Vec<usize>,
    /// Per group member, neurons in no other member's support.
    pub exclusive: Vec<Vec<usize>>,
    pub support_sizes: Vec<usize>,
    /// Common support size when every member has the same one.
    pub binarization_size: Option<usize>,
}

pub fn neuron_base_and_exclusive<T: Scalar>(
    zbar: ArrayView2<'_, T>,
    group: &[usize],
) -> Result<NeuronSetReport> {
    if group.len() < 2 {
        return Err(SnmfError::InvalidArgument(
            "a neuron-set group needs at least two features".into(),
        ));
    }
    let k = zbar.ncols();
    let mut seen = BTreeSet::new();
    for &g in group {
        if g >= k {
            return Err(SnmfError::InvalidArgument(format!(
                "feature {g} out of range for {k} features"
            )));
        }
        if !seen.insert(g) {
            return Err(SnmfError::InvalidArgument(format!("feature {g} listed twice")));
        }
    }
    let sup = supports(zbar)?;
    let members: Vec<&BTreeSet<usize>> = group.iter().map(|&g| &sup[g]).collect();

    let mut base = members[0].clone();
    for s in &members[1..] {
        base = base.intersection(s).copied().collect();
    }
    let exclusive = members
        .iter()
        .enumerate()
        .map(|(a, s)| {
            s.iter()
                .copied()
                .filter(|i| {
                    members
                        .iter()
                        .enumerate()
                        .all(|(b, other)| a == b || !other.contains(i))
                })
                .collect()
        })
        .collect();
    let support_sizes: Vec<usize> = members.iter().map(|s| s.len()).collect();
    let binarization_size = support_sizes
        .iter()
        .all(|&s| s == support_sizes[0])
        .then_some(support_sizes[0]);
    Ok(NeuronSetReport {
        group: group.to_vec(),
        base: base.into_iter().collect(),
        exclusive,
        support_sizes,
        binarization_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn top_contexts_orders_by_weight() {
        let y = array![[0.1, 0.9, 0.5]];
        let t = top_contexts(y.view(), None, 0, 2).unwrap();
        assert_eq!(t.hits.iter().map(|h| h.column).collect::<Vec<_>>(), vec![1, 2]);
        assert!(t.metadata_missing);
        assert!(!t.all_zero);
    }

    #[test]
    fn top_contexts_zero_row_uses_tie_order() {
        let y = Array2::<f64>::zeros((2, 5));
        let t = top_contexts(y.view(), None, 1, 3).unwrap();
        assert!(t.all_zero);
        assert_eq!(t.hits.iter().map(|h| h.column).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn top_contexts_rejects_bad_feature() {
        let y = Array2::<f64>::zeros((2, 5));
        assert!(top_contexts(y.view(), None, 2, 1).is_err());
        assert!(top_contexts(y.view(), None, 0, 0).is_err());
    }

    #[test]
    fn concept_score_hand_example() {
        let z: Array1<f64> = array![1.0, 0.0];
        let act = array![[1.0, 0.0], [0.0, 1.0]];
        let neu = array![[1.0], [1.0]];
        let s = concept_detection_score(0, z.view(), &[act.view()], &[neu.view()]).unwrap();
        assert!((s.a_act - 1.0).abs() < 1e-15);
        assert!((s.a_neu - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((s.s_cd - 2f64.sqrt().ln()).abs() < 1e-10);
        assert!(!s.clamped);
    }

    #[test]
    fn concept_score_identical_and_swapped_sets() {
        let z = array![0.3, -1.0, 2.0];
        let a = array![[1.0, 0.2], [0.0, -1.0], [0.5, 0.5]];
        let b = array![[0.1, 2.0, 0.0], [1.0, 0.3, 0.4], [0.0, 1.0, 0.9]];
        let same = concept_detection_score(0, z.view(), &[a.view()], &[a.view()]).unwrap();
        assert_eq!(same.s_cd, 0.0);
        let fwd = concept_detection_score(0, z.view(), &[a.view(), b.view()], &[b.view()]).unwrap();
        let rev = concept_detection_score(0, z.view(), &[b.view()], &[a.view(), b.view()]).unwrap();
        assert_eq!(fwd.s_cd, -rev.s_cd);
    }

    #[test]
    fn concept_score_clamps_negative_means() {
        let z = array![1.0, 0.0];
        let act = array![[-1.0], [0.0]];
        let neu = array![[1.0], [1.0]];
        let s = concept_detection_score(0, z.view(), &[act.view()], &[neu.view()]).unwrap();
        assert!(s.clamped);
        assert!((s.s_cd - (1e-6f64.ln() - (1.0 / 2f64.sqrt()).ln())).abs() < 1e-12);
    }

    #[test]
    fn concept_score_errors() {
        let zero = array![0.0, 0.0];
        let s = array![[1.0], [0.0]];
        assert!(concept_detection_score(0, zero.view(), &[s.view()], &[s.view()]).is_err());
        let z = array![1.0, 0.0];
        assert!(concept_detection_score(0, z.view(), &[], &[s.view()]).is_err());
        let empty = Array2::<f64>::zeros((2, 0));
        assert!(concept_detection_score(0, z.view(), &[empty.view()], &[s.view()]).is_err());
    }

    #[test]
    fn residual_feature_selects_column() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(residual_feature(w.view(), array![1.0, 0.0].view()).unwrap(), array![1.0, 3.0]);
        assert_eq!(residual_feature(w.view(), array![0.0, 0.0].view()).unwrap(), array![0.0, 0.0]);
        assert!(residual_feature(w.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn vocab_projection_identity() {
        let u = Array2::<f64>::eye(3);
        let p = vocab_projection(array![0.2, -1.0, 5.0].view(), u.view(), 1).unwrap();
        assert_eq!(p.top, vec![2]);
        assert_eq!(p.bottom, vec![1]);
        let z = vocab_projection(array![0.0, 0.0, 0.0].view(), u.view(), 2).unwrap();
        assert_eq!(z.top, vec![0, 1]);
        assert_eq!(z.bottom, vec![0, 1]);
        assert!(vocab_projection(array![0.0, 0.0, 0.0].view(), u.view(), 4).is_err());
    }

    #[test]
    fn diff_means_examples() {
        let p = array![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        let n = array![[0.0, 0.0], [1.0, 1.0]];
        assert_eq!(diff_means(p.view(), n.view()).unwrap(), array![1.0, -1.0]);
        assert_eq!(diff_means(p.view(), p.view()).unwrap(), array![0.0, 0.0]);
        assert!(diff_means(p.view(), Array2::<f64>::zeros((2, 0)).view()).is_err());
    }

    #[test]
    fn binarize_examples() {
        let z = array![[0.5], [-2.0], [1.0]];
        assert_eq!(binarize_features(z.view(), 2).unwrap(), array![[0.0], [1.0], [1.0]]);
        assert_eq!(binarize_features(z.view(), 3).unwrap(), array![[1.0], [1.0], [1.0]]);
        assert!(binarize_features(z.view(), 0).is_err());
        assert!(binarize_features(z.view(), 4).is_err());
    }

    #[test]
    fn overlap_examples() {
        let mut disjoint = Array2::<f64>::zeros((10, 2));
        let mut same = Array2::<f64>::zeros((10, 2));
        for i in 0..5 {
            disjoint[[i, 0]] = 1.0;
            disjoint[[i + 5, 1]] = 1.0;
            same[[i, 0]] = 1.0;
            same[[i, 1]] = 1.0;
        }
        assert_eq!(overlap_matrix(disjoint.view()).unwrap(), array![[5, 0], [0, 5]]);
        assert_eq!(overlap_matrix(same.view()).unwrap(), array![[5, 5], [5, 5]]);
        disjoint[[0, 0]] = 0.5;
        assert!(overlap_matrix(disjoint.view()).is_err());
    }

    #[test]
    fn neuron_sets_examples() {
        let mut zb = Array2::<f64>::zeros((5, 2));
        for i in [1, 2, 3] {
            zb[[i, 0]] = 1.0;
        }
        for i in [1, 2, 4] {
            zb[[i, 1]] = 1.0;
        }
        let r = neuron_base_and_exclusive(zb.view(), &[0, 1]).unwrap();
        assert_eq!(r.base, vec![1, 2]);
        assert_eq!(r.exclusive, vec![vec![3], vec![4]]);
        assert_eq!(r.binarization_size, Some(3));

        let mut same = Array2::<f64>::zeros((4, 3));
        for j in 0..3 {
            same[[0, j]] = 1.0;
            same[[2, j]] = 1.0;
        }
        let r = neuron_base_and_exclusive(same.view(), &[0, 1, 2]).unwrap();
        assert_eq!(r.base, vec![0, 2]);
        assert!(r.exclusive.iter().all(|e| e.is_empty()));

        assert!(neuron_base_and_exclusive(same.view(), &[0]).is_err());
        assert!(neuron_base_and_exclusive(same.view(), &[0, 3]).is_err());
        assert!(neuron_base_and_exclusive(same.view(), &[1, 1]).is_err());
    }

    #[test]
    fn sentences_group_by_doc() {
        let a = array![[1.0, 2.0, 3.0, 4.0]];
        let ctx = |d| TokenContext {
            doc_id: d,
            position: 0,
            token_text: "t".into(),
            window_text: String::new(),
        };
        let s = split_sentences(a.view(), &[ctx(5), ctx(2), ctx(5), ctx(2)]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], array![[1.0, 3.0]]);
        assert_eq!(s[1], array![[2.0, 4.0]]);
    }
}
