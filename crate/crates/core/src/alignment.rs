//! Cross-attention alignment of audio frames onto phoneme positions and the
//! monotonic matching loss on the resulting affinity matrix.
//!
//! The text sequence is the query and the audio sequence serves as both key
//! and value, so the aggregated output has one row per phoneme. The matching
//! loss compares the affinity matrix of a matched pair with a row-normalized
//! Gaussian band around the diagonal; this band target is a reconstruction
//! (the original target matrix is defined elsewhere) and is parameterized by
//! a single relative width `ρ`.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::error::{structural, Error, Result};
use crate::scalar::Scalar;

/// Affinity `A` (`T_t × T_a`, row-stochastic) and aggregated audio `A·E_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityResult<T> {
    pub affinity: Array2<T>,
    pub aggregated: Array2<T>,
}

/// Graph form of the cross attention. Returns `(affinity, aggregated)`.
pub fn cross_attend_var<T: Scalar>(g: &mut Graph<T>, text: Var, audio: Var) -> (Var, Var) {
    let d = g.cols(text);
    let logits = g.matmul_t(text, audio);
    let logits = g.scale(logits, T::one() / T::from_usize_lossy(d).sqrt());
    let affinity = g.row_softmax(logits);
    let aggregated = g.matmul(affinity, audio);
    (affinity, aggregated)
}

pub fn cross_attend<T: Scalar>(text: &Array2<T>, audio: &Array2<T>) -> Result<AffinityResult<T>> {
    if text.nrows() == 0 || audio.nrows() == 0 {
        return Err(structural!(
            "cross attention over empty sequence ({}x{})",
            text.nrows(),
            audio.nrows()
        ));
    }
    if text.ncols() != audio.ncols() {
        return Err(structural!("dims {} and {}", text.ncols(), audio.ncols()));
    }
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let a = g.constant(audio.clone());
    let (aff, agg) = cross_attend_var(&mut g, t, a);
    Ok(AffinityResult {
        affinity: g.value(aff).clone(),
        aggregated: g.value(agg).clone(),
    })
}

/// Row-normalized Gaussian band centered on the stretched diagonal
/// `j* = i·(T_a−1)/max(T_t−1, 1)` with standard deviation `ρ·T_a`.
pub fn monotonic_target<T: Scalar>(t_text: usize, t_audio: usize, rho: f64) -> Array2<T> {
    let width = (rho * t_audio as f64).max(f64::MIN_POSITIVE);
    let stretch = (t_audio as f64 - 1.0) / ((t_text.max(2) - 1) as f64);
    let mut target = Array2::zeros((t_text, t_audio));
    for i in 0..t_text {
        let center = i as f64 * stretch;
        let weights: Vec<f64> = (0..t_audio)
            .map(|j| {
                let z = (j as f64 - center) / width;
                (-0.5 * z * z).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in weights.into_iter().enumerate() {
            target[[i, j]] = T::c(w / total);
        }
    }
    target
}

fn check_row_stochastic<T: Scalar>(a: &Array2<T>) -> Result<()> {
    for (i, row) in a.rows().into_iter().enumerate() {
        let s = row.sum().to_f64_lossy();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("affinity row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Graph form of the matching loss. Non-matching pairs contribute a constant
/// zero.
pub fn monotonic_matching_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    affinity: Var,
    is_match: bool,
    rho: f64,
) -> Result<Var> {
    if !is_match {
        return Ok(g.scalar_constant(T::zero()));
    }
    check_row_stochastic(g.value(affinity))?;
    let (tt, ta) = g.shape(affinity);
    let target = g.constant(monotonic_target(tt, ta, rho));
    let diff = g.sub(affinity, target);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

pub fn monotonic_matching_loss<T: Scalar>(affinity: &Array2<T>, is_match: bool, rho: f64) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(affinity.clone());
    let l = monotonic_matching_loss_var(&mut g, a, is_match, rho)?;
    Ok(g.scalar(l))
}
