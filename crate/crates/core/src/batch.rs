//! Batch data model, ragged flattening and cosine similarity.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{domain, structural, Result};
use crate::scalar::Scalar;

/// A mini-batch of `(audio features, phoneme ids, keyword id)` triples with
/// ragged sequence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeBatch<T> {
    /// One `T_a × F` matrix per utterance.
    pub audio_features: Vec<Array2<T>>,
    /// One phoneme index sequence per utterance.
    pub phoneme_ids: Vec<Vec<usize>>,
    /// Keyword (word) class per utterance.
    pub keyword_ids: Vec<usize>,
}

impl<T: Scalar> PhonemeBatch<T> {
    pub fn len(&self) -> usize {
        self.keyword_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyword_ids.is_empty()
    }

    /// Checks the batch invariants against a vocabulary size and feature dim.
    pub fn validate(&self, vocab: usize, feature_dim: usize) -> Result<()> {
        let n = self.keyword_ids.len();
        if self.audio_features.len() != n || self.phoneme_ids.len() != n {
            return Err(structural!(
                "batch has {} audio, {} text and {} keyword entries",
                self.audio_features.len(),
                self.phoneme_ids.len(),
                n
            ));
        }
        for (i, (audio, ids)) in self.audio_features.iter().zip(&self.phoneme_ids).enumerate() {
            if ids.is_empty() {
                return Err(structural!("utterance {i} has no phonemes"));
            }
            if audio.nrows() < ids.len() {
                return Err(structural!(
                    "utterance {i}: {} frames for {} phonemes",
                    audio.nrows(),
                    ids.len()
                ));
            }
            if audio.ncols() != feature_dim {
                return Err(structural!(
                    "utterance {i}: feature dim {} != {feature_dim}",
                    audio.ncols()
                ));
            }
            if let Some(&bad) = ids.iter().find(|&&p| p >= vocab) {
                return Err(domain!("utterance {i}: phoneme id {bad} >= vocabulary {vocab}"));
            }
        }
        Ok(())
    }
}

/// Per-utterance sequences of `d`-dimensional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RaggedEmbeddings<T> {
    pub values: Vec<Array2<T>>,
}

impl<T: Scalar> RaggedEmbeddings<T> {
    pub fn new(values: Vec<Array2<T>>) -> Result<Self> {
        if let Some(first) = values.first() {
            let d = first.ncols();
            if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| v.ncols() != d) {
                return Err(structural!("sequence {i} has embedding dim != {d}"));
            }
        }
        Ok(Self { values })
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.ncols())
    }
}

/// Batch- and position-flattened embeddings with one phoneme label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatEmbeddings<T> {
    pub matrix: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> FlatEmbeddings<T> {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// Inverse of [`ragged_flatten`]: regroups rows by their source sequence.
    pub fn split(&self, lengths: &[usize]) -> Result<(RaggedEmbeddings<T>, Vec<Vec<usize>>)> {
        let total: usize = lengths.iter().sum();
        if total != self.rows() {
            return Err(structural!("lengths sum to {total}, flat has {} rows", self.rows()));
        }
        let mut at = 0;
        let mut values = Vec::with_capacity(lengths.len());
        let mut labels = Vec::with_capacity(lengths.len());
        for &len in lengths {
            values.push(self.matrix.slice(ndarray::s![at..at + len, ..]).to_owned());
            labels.push(self.labels[at..at + len].to_vec());
            at += len;
        }
        Ok((RaggedEmbeddings { values }, labels))
    }
}

/// Concatenates ragged label sequences batch-major.
pub fn flat_labels(labels: &[Vec<usize>]) -> Vec<usize> {
    labels.iter().flatten().copied().collect()
}

/// Flattens ragged embeddings batch-major (sequence 0's positions first).
pub fn ragged_flatten<T: Scalar>(embs: &RaggedEmbeddings<T>, labels: &[Vec<usize>]) -> Result<FlatEmbeddings<T>> {
    if embs.values.len() != labels.len() {
        return Err(structural!(
            "{} embedding sequences but {} label sequences",
            embs.values.len(),
            labels.len()
        ));
    }
    for (i, (e, l)) in embs.values.iter().zip(labels).enumerate() {
        if e.nrows() != l.len() {
            return Err(structural!(
                "sequence {i}: {} embedding rows but {} labels",
                e.nrows(),
                l.len()
            ));
        }
    }
    let d = embs.dim();
    let matrix = if embs.values.is_empty() {
        Array2::zeros((0, d))
    } else {
        let views: Vec<_> = embs.values.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| structural!("{e}"))?
    };
    Ok(FlatEmbeddings {
        matrix,
        labels: flat_labels(labels),
    })
}

fn norm<T: Scalar>(v: ArrayView1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Cosine similarity. Zero-norm inputs are rejected rather than smoothed.
pub fn cosine_sim<T: Scalar>(u: ArrayView1<T>, v: ArrayView1<T>) -> Result<T> {
    if u.len() != v.len() {
        return Err(structural!("vector lengths {} and {}", u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > T::zero()) || !(nv > T::zero()) {
        return Err(domain!("cosine similarity of a zero-norm vector"));
    }
    let c = u.dot(&v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// All-pairs cosine similarity between the rows of `a` (m×d) and `b` (n×d).
pub fn pairwise_cosine<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<Array2<T>> {
    if a.ncols() != b.ncols() {
        return Err(structural!("dims {} and {}", a.ncols(), b.ncols()));
    }
    let normalized = |m: ArrayView2<T>, name: &str| -> Result<Array2<T>> {
        let mut out = m.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = norm(row.view());
            if !(n > T::zero()) {
                return Err(domain!("row {i} of {name} has zero norm"));
            }
            row.mapv_inplace(|x| x / n);
        }
        Ok(out)
    };
    let an = normalized(a, "A")?;
    let bn = normalized(b, "B")?;
    Ok(an.dot(&bn.t()).mapv(|c| c.max(-T::one()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn flatten_shapes_and_label_order() {
        let embs = RaggedEmbeddings::new(vec![Array2::<f64>::zeros((2, 4)), Array2::zeros((3, 4))]).unwrap();
        let flat = ragged_flatten(&embs, &[vec![1, 2], vec![3, 4, 5]]).unwrap();
        assert_eq!(flat.matrix.dim(), (5, 4));
        assert_eq!(flat.labels.len(), 5);

        let one = RaggedEmbeddings::new(vec![array![[1.5, -2.0]]]).unwrap();
        let flat = ragged_flatten(&one, &[vec![7]]).unwrap();
        assert_eq!(flat.matrix, array![[1.5, -2.0]]);
        assert_eq!(flat.labels, vec![7]);
    }

    #[test]
    fn flatten_labels_follow_batch_major_walk() {
        let labels = vec![vec![5, 5, 7], vec![2], vec![9, 9]];
        let embs = RaggedEmbeddings::new(labels.iter().map(|l| Array2::<f64>::zeros((l.len(), 3))).collect()).unwrap();
        let flat = ragged_flatten(&embs, &labels).unwrap();
        let mut walk = Vec::new();
        for seq in &labels {
            walk.extend(seq.iter().copied());
        }
        assert_eq!(flat.labels, walk);
        assert_eq!(flat.labels, vec![5, 5, 7, 2, 9, 9]);
    }

    #[test]
    fn flatten_rejects_length_mismatch() {
        let embs = RaggedEmbeddings::new(vec![Array2::<f64>::zeros((2, 4))]).unwrap();
        assert!(matches!(
            ragged_flatten(&embs, &[vec![1, 2, 3]]),
            Err(crate::Error::Structural(_))
        ));
        assert!(ragged_flatten(&embs, &[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = array![1.0f64, 2.0, 3.0];
        assert!((cosine_sim(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-15);
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(cosine_sim(a.view(), b.view()).unwrap(), 0.0);
        let c = array![1.0, 1.0];
        let expect = 1.0 / 2f64.sqrt();
        assert!((cosine_sim(a.view(), c.view()).unwrap() - expect).abs() < 1e-12);
        let z = array![0.0, 0.0];
        assert!(matches!(cosine_sim(a.view(), z.view()), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn pairwise_examples() {
        let a = array![[0.6f64, 0.8]];
        let p = pairwise_cosine(a.view(), a.view()).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-15);

        let eye = Array2::<f64>::eye(3);
        assert_eq!(pairwise_cosine(eye.view(), eye.view()).unwrap(), eye);

        let bad = array![[1.0, 0.0], [0.0, 0.0]];
        let err = pairwise_cosine(a.view(), bad.view()).unwrap_err();
        assert!(err.to_string().contains("row 1 of B"));
    }

    #[test]
    fn pairwise_matches_scalar_loop() {
        let a = array![[0.3, -1.0, 2.0, 0.5], [1.2, 0.1, -0.7, 0.0], [-0.4, 0.9, 0.3, 1.1]];
        let b = array![[0.5, 0.5, -0.5, 2.0], [-1.0, 0.2, 0.3, -0.6]];
        let p = pairwise_cosine(a.view(), b.view()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let (ai, bj) = (a.row(i), b.row(j));
                let loop_dot: f64 = (0..4).map(|k| ai[k] * bj[k]).sum();
                let na: f64 = (0..4).map(|k| ai[k] * ai[k]).sum::<f64>().sqrt();
                let nb: f64 = (0..4).map(|k| bj[k] * bj[k]).sum::<f64>().sqrt();
                let oracle = loop_dot / (na * nb);
                assert!((p[[i, j]] - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300) + 1e-15);
                let scalar = cosine_sim(ai, bj).unwrap();
                assert!((p[[i, j]] - scalar).abs() <= 1e-12 * scalar.abs() + 1e-15);
            }
        }
    }

    fn nonzero_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.1f64..2.0, rows * cols).prop_flat_map(move |mags| {
            proptest::collection::vec(any::<bool>(), rows * cols).prop_map(move |signs| {
                let data: Vec<f64> = mags.iter().zip(&signs).map(|(&m, &s)| if s { m } else { -m }).collect();
                Array2::from_shape_vec((rows, cols), data).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn flatten_split_round_trip(lengths in proptest::collection::vec(1usize..5, 1..6), seed in 0u64..1000) {
            let d = 3;
            let values: Vec<Array2<f64>> = lengths
                .iter()
                .enumerate()
                .map(|(i, &l)| Array2::from_shape_fn((l, d), |(r, c)| (seed as f64) * 0.001 + (i * 100 + r * 10 + c) as f64))
                .collect();
            let labels: Vec<Vec<usize>> = lengths.iter().enumerate().map(|(i, &l)| (0..l).map(|p| (i + p) % 7).collect()).collect();
            let embs = RaggedEmbeddings::new(values).unwrap();
            let flat = ragged_flatten(&embs, &labels).unwrap();
            let (back, back_labels) = flat.split(&lengths).unwrap();
            prop_assert_eq!(back, embs);
            prop_assert_eq!(back_labels, labels);
        }

        #[test]
        fn pairwise_transpose_symmetry(a in nonzero_matrix(3, 4), b in nonzero_matrix(2, 4)) {
            let ab = pairwise_cosine(a.view(), b.view()).unwrap();
            let ba = pairwise_cosine(b.view(), a.view()).unwrap();
            for i in 0..3 { for j in 0..2 {
                prop_assert!((ab[[i, j]] - ba[[j, i]]).abs() < 1e-12);
            }}
        }

        #[test]
        fn cosine_scale_invariance(a in nonzero_matrix(2, 5), c in 0.01f64..100.0) {
            let u = a.row(0);
            let v = a.row(1);
            let cu = u.mapv(|x| x * c);
            let s1 = cosine_sim(u, v).unwrap();
            let s2 = cosine_sim(cu.view(), v).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}
