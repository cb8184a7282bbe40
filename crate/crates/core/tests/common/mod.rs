#![allow(dead_code, clippy::needless_range_loop)]

pub mod criteria;
pub mod grads;

use adml::autodiff::{Graph, Var};
use adml::params::{Bound, ParamStore};
use adml::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

/// Labels over `classes`, each class present at least twice when room allows.
pub fn rand_labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|i| (i / 2) % classes).collect();
    for x in l.iter_mut() {
        if rng.random_bool(0.3) {
            *x = rng.random_range(0..classes);
        }
    }
    l
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

const H: f64 = 1e-5;

/// Worst relative error, over every input and every stored parameter,
/// between backprop gradients and central finite differences of `f`.
pub fn grad_check<F>(inputs: &[Array2<f64>], store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var], &Bound) -> Result<Var>,
{
    let value = |inputs: &[Array2<f64>], store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let b = store.bind(&mut g, true);
        let l = f(&mut g, &vs, &b).expect("loss evaluates");
        g.scalar(l)
    };

    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let b = store.bind(&mut g, true);
    let l = f(&mut g, &vs, &b).expect("loss evaluates");
    g.backward(l);
    let grad_of = |v: Var, shape: (usize, usize)| g.grad(v).cloned().unwrap_or_else(|| Array2::zeros(shape));

    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grad_of(vs[k], x.dim());
        let mut numeric = Array2::zeros(x.dim());
        let mut xs = inputs.to_vec();
        for idx in ndarray::indices(x.dim()) {
            let x0 = xs[k][idx];
            xs[k][idx] = x0 + H;
            let up = value(&xs, store);
            xs[k][idx] = x0 - H;
            let down = value(&xs, store);
            xs[k][idx] = x0;
            numeric[idx] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let names: Vec<String> = store.names().cloned().collect();
    let mut s = store.clone();
    for name in names {
        let shape = store.require(&name).unwrap().dim();
        let analytic = grad_of(b.var(&name), shape);
        let mut numeric = Array2::zeros(shape);
        for idx in ndarray::indices(shape) {
            let x0 = s.get(&name).unwrap()[idx];
            s.get_mut(&name).unwrap()[idx] = x0 + H;
            let up = value(inputs, &s);
            s.get_mut(&name).unwrap()[idx] = x0 - H;
            let down = value(inputs, &s);
            s.get_mut(&name).unwrap()[idx] = x0;
            numeric[idx] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Random trial set: scores drawn from a small grid so ties are common.
pub fn rand_trials(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_len);
    let grid = rng.random_range(2..=n.max(3));
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n)
        .map(|i| {
            let base = rng.random_range(0..grid) as f64 / grid as f64;
            if labels[i] {
                base + 0.2
            } else {
                base
            }
        })
        .collect();
    (scores, labels)
}

/// Precision at each positive, walking a pessimistic ranking, summed in
/// rank order.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut precisions: Vec<(f64, usize, f64)> = Vec::new();
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    for &i in &pos {
        let s = scores[i];
        let above = scores.iter().filter(|&&x| x > s).count();
        let tied_neg = (0..scores.len()).filter(|&j| !labels[j] && scores[j] == s).count();
        let pos_above = pos.iter().filter(|&&j| scores[j] > s).count();
        let tied_pos_before = pos.iter().filter(|&&j| scores[j] == s && j < i).count();
        let rank = above + tied_neg + tied_pos_before + 1;
        let hits = pos_above + tied_pos_before + 1;
        precisions.push((s, rank, hits as f64 / rank as f64));
    }
    precisions.sort_by_key(|&(_, rank, _)| rank);
    let sum: f64 = precisions.iter().map(|&(_, _, p)| p).fold(0.0, |a, b| a + b);
    sum / pos.len() as f64
}

/// `2·wins + ties` over every positive/negative pair, then normalized.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut doubled = 0u128;
    let (mut p, mut n) = (0u128, 0u128);
    for i in 0..scores.len() {
        if labels[i] {
            p += 1;
        } else {
            n += 1;
        }
    }
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                doubled += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    doubled as f64 / (2 * p * n) as f64
}

/// `num/den` over `i128`, compared by cross multiplication.
#[derive(Clone, Copy, Debug)]
pub struct Frac(pub i128, pub i128);

impl Frac {
    pub fn lt(self, o: Frac) -> bool {
        self.0 * o.1 < o.0 * self.1
    }

    pub fn eq(self, o: Frac) -> bool {
        self.0 * o.1 == o.0 * self.1
    }
}

/// EER of the ROC convex hull: the lowest point where any segment between
/// two operating points meets the FA = miss diagonal.
pub fn eer_oracle(scores: &[f64], labels: &[bool]) -> Frac {
    let p = labels.iter().filter(|&&l| l).count() as i128;
    let n = labels.len() as i128 - p;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    // operating points in (FA·P, miss·N) so both rates share denominator N·P
    let mut pts = vec![(0i128, p * n)];
    for &t in &thresholds {
        let fa = (0..scores.len()).filter(|&i| !labels[i] && scores[i] >= t).count() as i128;
        let miss = (0..scores.len()).filter(|&i| labels[i] && scores[i] < t).count() as i128;
        pts.push((fa * p, miss * n));
    }
    let scale = p * n;
    let mut best: Option<Frac> = None;
    let mut offer = |f: Frac| {
        if best.is_none_or(|b| f.lt(b)) {
            best = Some(f);
        }
    };
    for (i, &(xa, ya)) in pts.iter().enumerate() {
        if xa == ya {
            offer(Frac(xa, scale));
        }
        for &(xb, yb) in &pts[i + 1..] {
            let (da, db) = (ya - xa, yb - xb);
            if da == 0 || db == 0 || (da > 0) == (db > 0) {
                continue;
            }
            let d = da - db;
            let num = xa * d + da * (xb - xa);
            let (num, den) = if d < 0 { (-num, -d * scale) } else { (num, d * scale) };
            offer(Frac(num, den));
        }
    }
    best.expect("some segment meets the diagonal")
}
