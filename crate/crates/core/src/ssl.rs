//! Projection heads and the three pre-training losses: class-token
//! distillation, masked-patch distillation, and nearest-neighbour
//! repulsion (KoLeo).
//!
//! Teacher quantities enter the student graph as plain arrays, never as
//! bound parameters, so the teacher path receives gradients by
//! construction of nothing at all.

use ndarray::{Array1, Array2, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, OpBackward, Tensor, Var};
use crate::nn::{trunc_normal, Binding, ParamStore};

pub const DEFAULT_TAU_TEACHER: f64 = 0.07;
pub const DEFAULT_TAU_STUDENT: f64 = 0.1;
pub const DEFAULT_CENTER_MOMENTUM: f64 = 0.9;
/// (class, patch, koleo) weights.
pub const DEFAULT_LOSS_WEIGHTS: [f64; 3] = [1.0, 1.0, 0.1];
pub const KOLEO_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

// ---- projection head ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub n_prototypes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: 2048,
            bottleneck_dim: 256,
            n_prototypes: 65_536,
        }
    }
}

impl HeadConfig {
    pub fn toy() -> Self {
        HeadConfig {
            hidden_dim: 192,
            bottleneck_dim: 48,
            n_prototypes: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.bottleneck_dim == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        if self.n_prototypes < 2 {
            return Err(Error::config("need at least 2 prototypes"));
        }
        Ok(())
    }
}

/// Three-layer MLP to a bottleneck, then cosine logits against
/// row-normalised prototype vectors. Rows of `prototypes` are unit-norm
/// from init on; the trainer re-normalises them after every update.
pub fn init_head(in_dim: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    if in_dim == 0 {
        return Err(Error::config("head input dim must be positive"));
    }
    let std = 0.02;
    let mut s = ParamStore::new();
    s.insert("fc1.weight", trunc_normal(&[in_dim, cfg.hidden_dim], std, rng))?;
    s.insert("fc1.bias", crate::nn::zeros(&[cfg.hidden_dim]))?;
    s.insert("fc2.weight", trunc_normal(&[cfg.hidden_dim, cfg.hidden_dim], std, rng))?;
    s.insert("fc2.bias", crate::nn::zeros(&[cfg.hidden_dim]))?;
    s.insert("fc3.weight", trunc_normal(&[cfg.hidden_dim, cfg.bottleneck_dim], std, rng))?;
    s.insert("fc3.bias", crate::nn::zeros(&[cfg.bottleneck_dim]))?;
    let mut protos = trunc_normal(&[cfg.n_prototypes, cfg.bottleneck_dim], std, rng);
    normalize_rows_in_place(&mut protos);
    s.insert("prototypes", protos)?;
    Ok(s)
}

pub fn normalize_rows_in_place(t: &mut Tensor) {
    let k = t.shape()[0];
    let d = t.shape()[1];
    for r in 0..k {
        let mut norm = 0.0;
        for c in 0..d {
            norm += t[[r, c]] * t[[r, c]];
        }
        let norm = norm.sqrt().max(NORM_EPS);
        for c in 0..d {
            t[[r, c]] /= norm;
        }
    }
}

pub struct HeadOut {
    /// `[n, K]` cosine logits against the prototypes.
    pub logits: Var,
    /// `[n, bottleneck]`, ℓ2-normalised.
    pub bottleneck: Var,
}

/// Forward the head inside `g`. `x` is `[n, in_dim]`.
pub fn head_forward(g: &mut Graph, bind: &Binding, x: Var) -> HeadOut {
    let h = g.matmul(x, bind.var("fc1.weight"));
    let h = g.add_bias(h, bind.var("fc1.bias"));
    let h = g.gelu(h);
    let h = g.matmul(h, bind.var("fc2.weight"));
    let h = g.add_bias(h, bind.var("fc2.bias"));
    let h = g.gelu(h);
    let z = g.matmul(h, bind.var("fc3.weight"));
    let z = g.add_bias(z, bind.var("fc3.bias"));
    let zn = g.l2_normalize_rows(z, NORM_EPS);
    let pn = g.l2_normalize_rows(bind.var("prototypes"), NORM_EPS);
    let pt = g.transpose2(pn);
    let logits = g.matmul(zn, pt);
    HeadOut {
        logits,
        bottleneck: zn,
    }
}

// ---- teacher distributions & centering ----

/// Sharpened, centred teacher distributions: row-wise
/// `softmax((logits - center) / tau)`.
pub fn teacher_probs(logits: &Array2<f64>, center: &Array1<f64>, tau: f64) -> Result<Array2<f64>> {
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if logits.ncols() != center.len() {
        return Err(Error::data(format!(
            "center length {} does not match K={}",
            center.len(),
            logits.ncols()
        )));
    }
    let mut out = Array2::zeros(logits.dim());
    for (r, row) in logits.rows().into_iter().enumerate() {
        let shifted: Vec<f64> = row
            .iter()
            .zip(center.iter())
            .map(|(l, c)| (l - c) / tau)
            .collect();
        let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = shifted.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out[[r, c]] = e / z;
        }
    }
    Ok(out)
}

/// Running centre of teacher logits, one per head.
#[derive(Clone, Debug)]
pub struct CenterState {
    pub center: Array1<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn new(k: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "center momentum must lie in [0,1], got {momentum}"
            )));
        }
        Ok(CenterState {
            center: Array1::zeros(k),
            momentum,
        })
    }

    /// `center <- m*center + (1-m)*batch_mean(logits)`.
    pub fn update(&mut self, teacher_logits: &Array2<f64>) -> Result<()> {
        if teacher_logits.nrows() == 0 {
            return Err(Error::data("center update needs a non-empty teacher batch"));
        }
        let mean = teacher_logits.mean_axis(ndarray::Axis(0)).unwrap();
        self.update_from_mean(&mean)
    }

    pub fn update_from_mean(&mut self, batch_mean: &Array1<f64>) -> Result<()> {
        if batch_mean.len() != self.center.len() {
            return Err(Error::data(format!(
                "center length {} vs batch mean length {}",
                self.center.len(),
                batch_mean.len()
            )));
        }
        if batch_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite teacher mean in center update"));
        }
        let m = self.momentum;
        ndarray::Zip::from(&mut self.center)
            .and(batch_mean)
            .for_each(|c, &b| *c = m * *c + (1.0 - m) * b);
        Ok(())
    }
}

// ---- losses ----

/// Teacher/student view pairs for the class-token loss: every teacher
/// global against every student view, skipping the pair where both index
/// the same global crop (student views are ordered globals-first).
pub fn standard_pairs(n_teacher: usize, n_student: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for t in 0..n_teacher {
        for s in 0..n_student {
            if s == t {
                continue;
            }
            pairs.push((t, s));
        }
    }
    pairs
}

/// Class-token distillation loss: mean over `pairs` of the cross-entropy
/// between the (detached) teacher distribution and the student's
/// temperature-scaled log-softmax.
pub fn dino_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_probs: &Array2<f64>,
    pairs: &[(usize, usize)],
    tau_s: f64,
) -> Result<Var> {
    if tau_s <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau_s}")));
    }
    if pairs.is_empty() {
        return Err(Error::config("class loss needs at least one view pair"));
    }
    let s_shape = g.value(student_logits).shape().to_vec();
    let (n_student, k) = (s_shape[0], s_shape[1]);
    if teacher_probs.ncols() != k {
        return Err(Error::data(format!(
            "teacher K={} vs student K={}",
            teacher_probs.ncols(),
            k
        )));
    }
    if k < 2 {
        return Err(Error::config("need at least 2 prototypes"));
    }
    let n_teacher = teacher_probs.nrows();
    // fold the pair sum into one weight matrix: W[s] = sum of teacher rows
    // paired with student view s, divided by the pair count
    let mut w = Array2::<f64>::zeros((n_student, k));
    for &(t, s) in pairs {
        if t >= n_teacher || s >= n_student {
            return Err(Error::data(format!(
                "pair ({t},{s}) out of range for {n_teacher} teacher / {n_student} student views"
            )));
        }
        let row = teacher_probs.row(t);
        for c in 0..k {
            w[[s, c]] += row[c] / pairs.len() as f64;
        }
    }
    let scaled = g.scale(student_logits, 1.0 / tau_s);
    let logq = g.log_softmax_rows(scaled);
    let w_const = g.var(w.into_dyn());
    let prod = g.mul(logq, w_const);
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0))
}

/// Masked-patch distillation loss: mean cross-entropy over masked
/// positions. Both logit sets are gathered at the same masked positions
/// of the same global view(s); row r of each must refer to the same
/// position. Returns the loss and whether any position was masked.
pub fn ibot_loss(
    g: &mut Graph,
    student_masked_logits: Var,
    teacher_probs_masked: &Array2<f64>,
    tau_s: f64,
) -> Result<(Var, bool)> {
    if tau_s <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau_s}")));
    }
    let s_shape = g.value(student_masked_logits).shape().to_vec();
    let (n, k) = (s_shape[0], s_shape[1]);
    if teacher_probs_masked.dim() != (n, k) {
        return Err(Error::data(format!(
            "masked-position misalignment: student {:?} vs teacher {:?}",
            (n, k),
            teacher_probs_masked.dim()
        )));
    }
    if n == 0 {
        return Ok((g.var(Tensor::zeros(IxDyn(&[]))), false));
    }
    let scaled = g.scale(student_masked_logits, 1.0 / tau_s);
    let logq = g.log_softmax_rows(scaled);
    let p = g.var(teacher_probs_masked.clone().into_dyn());
    let prod = g.mul(logq, p);
    let total = g.sum_all(prod);
    Ok((g.scale(total, -1.0 / n as f64), true))
}

struct KoLeoBackward {
    eps: f64,
}

impl OpBackward for KoLeoBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let n = x.shape()[0];
        let d = x.shape()[1];
        let upstream = grad.sum();
        let mut gx = Tensor::zeros(IxDyn(&[n, d]));
        for i in 0..n {
            let (j, dist) = nearest(x, i);
            // direction undefined at coincident points; contribute nothing
            if dist < 1e-12 {
                continue;
            }
            let c = upstream / (n as f64 * (dist + self.eps) * dist);
            for col in 0..d {
                let diff = x[[i, col]] - x[[j, col]];
                gx[[i, col]] -= c * diff;
                gx[[j, col]] += c * diff;
            }
        }
        vec![gx]
    }
}

fn nearest(x: &Tensor, i: usize) -> (usize, f64) {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut best = (usize::MAX, f64::INFINITY);
    for j in 0..n {
        if j == i {
            continue;
        }
        let mut sq = 0.0;
        for c in 0..d {
            let diff = x[[i, c]] - x[[j, c]];
            sq += diff * diff;
        }
        if sq < best.1 {
            best = (j, sq);
        }
    }
    (best.0, best.1.sqrt())
}

/// Nearest-neighbour repulsion over a batch of embeddings:
/// `-(1/n) * sum_i log(min_{j!=i} ||x_i - x_j|| + eps)`, computed on
/// ℓ2-normalised rows. Needs n >= 2.
pub fn koleo_loss(g: &mut Graph, embeddings: Var) -> Result<Var> {
    let shape = g.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::data(format!(
            "nearest-neighbour repulsion needs [n>=2, d] embeddings, got {shape:?}"
        )));
    }
    let xn = g.l2_normalize_rows(embeddings, NORM_EPS);
    let value = {
        let x = g.value(xn);
        let n = shape[0];
        let mut total = 0.0;
        for i in 0..n {
            let (_, dist) = nearest(x, i);
            total += (dist + KOLEO_EPS).ln();
        }
        Tensor::from_elem(IxDyn(&[]), -total / n as f64)
    };
    Ok(g.custom(value, vec![xn], Box::new(KoLeoBackward { eps: KOLEO_EPS })))
}

/// Weighted sum of the three components.
pub fn total_loss(
    g: &mut Graph,
    class_loss: Var,
    patch_loss: Var,
    koleo: Var,
    weights: [f64; 3],
) -> Result<Var> {
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::config(format!("loss weights must be >= 0, got {weights:?}")));
    }
    let a = g.scale(class_loss, weights[0]);
    let b = g.scale(patch_loss, weights[1]);
    let c = g.scale(koleo, weights[2]);
    let ab = g.add(a, b);
    Ok(g.add(ab, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::GradMap;
    use ndarray::Array2;
    use rand::prelude::*;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    // scalar reference: softmax((l-c)/tau) by plain loops
    fn probs_oracle(logits: &[f64], center: &[f64], tau: f64) -> Vec<f64> {
        let shifted: Vec<f64> = logits
            .iter()
            .zip(center)
            .map(|(l, c)| (l - c) / tau)
            .collect();
        let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = shifted.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    #[test]
    fn dino_hand_example_matches_entropy() {
        let mut g = Graph::new();
        let student = g.var(
            Array2::from_shape_vec((1, 2), vec![2f64.ln(), 0.0])
                .unwrap()
                .into_dyn(),
        );
        let teacher = Array2::from_shape_vec((1, 2), vec![2f64.ln(), 0.0]).unwrap();
        let p = teacher_probs(&teacher, &Array1::zeros(2), 1.0).unwrap();
        assert!((p[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        let loss = dino_loss(&mut g, student, &p, &[(0, 0)], 1.0).unwrap();
        let h = -(2.0 / 3.0f64 * (2.0 / 3.0f64).ln() + 1.0 / 3.0 * (1.0 / 3.0f64).ln());
        assert!((g.scalar_value(loss) - h).abs() < 1e-12);
        assert!((h - 0.6365).abs() < 1e-4);
    }

    #[test]
    fn dino_near_one_hot_loss_vanishes() {
        let mut g = Graph::new();
        let tau_s = 0.1;
        let student = g.var(
            Array2::from_shape_vec((1, 2), vec![tau_s * 20.0, 0.0])
                .unwrap()
                .into_dyn(),
        );
        let teacher = Array2::from_shape_vec((1, 2), vec![20.0, 0.0]).unwrap();
        let p = teacher_probs(&teacher, &Array1::zeros(2), 1.0).unwrap();
        let loss = dino_loss(&mut g, student, &p, &[(0, 0)], tau_s).unwrap();
        assert!(g.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn dino_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let n_teacher = 2;
            let n_student = rng.random_range(2..8);
            let teacher_logits = rand_mat(n_teacher, k, &mut rng);
            let student_logits = rand_mat(n_student, k, &mut rng);
            let center = Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0));
            let (tau_t, tau_s) = (0.07, 0.1);
            let pairs = standard_pairs(n_teacher, n_student);
            assert_eq!(pairs.len(), n_teacher * n_student - 2);

            let p = teacher_probs(&teacher_logits, &center, tau_t).unwrap();
            let mut g = Graph::new();
            let sv = g.var(student_logits.clone().into_dyn());
            let loss = dino_loss(&mut g, sv, &p, &pairs, tau_s).unwrap();
            let got = g.scalar_value(loss);

            // brute force: mean over pairs of -sum_k p_t[k] * log q_s[k]
            let mut total = 0.0;
            for &(t, s) in &pairs {
                let pt = probs_oracle(
                    teacher_logits.row(t).as_slice().unwrap(),
                    center.as_slice().unwrap(),
                    tau_t,
                );
                let qs = probs_oracle(
                    student_logits.row(s).as_slice().unwrap(),
                    &vec![0.0; k],
                    tau_s,
                );
                for c in 0..k {
                    total -= pt[c] * qs[c].ln();
                }
            }
            let want = total / pairs.len() as f64;
            assert!(
                (got - want).abs() / want.abs().max(1.0) < 1e-6,
                "got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn ibot_empty_mask_contributes_zero() {
        let mut g = Graph::new();
        let student = g.var(Array2::<f64>::zeros((0, 4)).into_dyn());
        let teacher = Array2::<f64>::zeros((0, 4));
        let (loss, engaged) = ibot_loss(&mut g, student, &teacher, 0.1).unwrap();
        assert!(!engaged);
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn ibot_identical_distribution_gives_entropy() {
        let mut g = Graph::new();
        let logits = vec![0.3, -1.0, 0.7];
        let student = g.var(Array2::from_shape_vec((1, 3), logits.clone()).unwrap().into_dyn());
        let teacher = Array2::from_shape_vec((1, 3), logits.iter().map(|v| v / 0.1).collect())
            .unwrap();
        // teacher at tau 1 over scaled logits == student softmax at tau 0.1
        let p = teacher_probs(&teacher, &Array1::zeros(3), 1.0).unwrap();
        let (loss, engaged) = ibot_loss(&mut g, student, &p, 0.1).unwrap();
        assert!(engaged);
        let h: f64 = -p.row(0).iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((g.scalar_value(loss) - h).abs() < 1e-12);
    }

    #[test]
    fn ibot_matches_per_position_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let n = rng.random_range(1..40);
            let student_logits = rand_mat(n, k, &mut rng);
            let teacher_logits = rand_mat(n, k, &mut rng);
            let center = Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0));
            let p = teacher_probs(&teacher_logits, &center, 0.07).unwrap();
            let mut g = Graph::new();
            let sv = g.var(student_logits.clone().into_dyn());
            let (loss, _) = ibot_loss(&mut g, sv, &p, 0.1).unwrap();
            let got = g.scalar_value(loss);

            let mut total = 0.0;
            for r in 0..n {
                let q = probs_oracle(student_logits.row(r).as_slice().unwrap(), &vec![0.0; k], 0.1);
                for c in 0..k {
                    total -= p[[r, c]] * q[c].ln();
                }
            }
            let want = total / n as f64;
            assert!((got - want).abs() / want.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn ibot_rejects_misalignment() {
        let mut g = Graph::new();
        let student = g.var(Array2::<f64>::zeros((3, 4)).into_dyn());
        let teacher = Array2::<f64>::zeros((2, 4));
        assert!(ibot_loss(&mut g, student, &teacher, 0.1).is_err());
    }

    #[test]
    fn koleo_hand_examples() {
        // antipodal unit vectors: both nearest distances are 2
        let mut g = Graph::new();
        let x = g.var(
            Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0])
                .unwrap()
                .into_dyn(),
        );
        let loss = koleo_loss(&mut g, x).unwrap();
        // normalisation divides by (norm + 1e-12), so distance is 2 - O(1e-12)
        assert!((g.scalar_value(loss) - -(2.0 + KOLEO_EPS).ln()).abs() < 1e-9);
        assert!((g.scalar_value(loss) - -0.6931).abs() < 1e-4);

        // identical vectors: distance 0, repulsion saturates at -ln(eps)
        let mut g = Graph::new();
        let x = g.var(
            Array2::from_shape_vec((2, 2), vec![0.6, 0.8, 0.6, 0.8])
                .unwrap()
                .into_dyn(),
        );
        let loss = koleo_loss(&mut g, x).unwrap();
        let want = -(KOLEO_EPS).ln();
        assert!((g.scalar_value(loss) - want).abs() < 1e-9);
        assert!((want - 18.42).abs() < 0.01);
    }

    #[test]
    fn koleo_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(2..12);
            let d = rng.random_range(2..6);
            let x = rand_mat(n, d, &mut rng);
            let mut g = Graph::new();
            let xv = g.var(x.clone().into_dyn());
            let loss = koleo_loss(&mut g, xv).unwrap();
            let got = g.scalar_value(loss);

            // oracle: normalise rows, O(n^2) nearest neighbour, mean log
            let mut xn = x.clone();
            for mut row in xn.rows_mut() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.mapv_inplace(|v| v / norm);
            }
            let mut total = 0.0;
            for i in 0..n {
                let mut best = f64::INFINITY;
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let dist: f64 = (0..d)
                        .map(|c| (xn[[i, c]] - xn[[j, c]]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(dist);
                }
                total += (best + KOLEO_EPS).ln();
            }
            let want = -total / n as f64;
            assert!((got - want).abs() / want.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn koleo_permutation_invariant_and_needs_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(7, 4, &mut rng);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let mut xp = Array2::zeros((7, 4));
        for (to, &from) in perm.iter().enumerate() {
            xp.row_mut(to).assign(&x.row(from));
        }
        let mut g = Graph::new();
        let a = g.var(x.into_dyn());
        let la = koleo_loss(&mut g, a).unwrap();
        let b = g.var(xp.into_dyn());
        let lb = koleo_loss(&mut g, b).unwrap();
        assert!((g.scalar_value(la) - g.scalar_value(lb)).abs() < 1e-12);

        let mut g = Graph::new();
        let single = g.var(Array2::<f64>::zeros((1, 4)).into_dyn());
        assert!(koleo_loss(&mut g, single).is_err());
    }

    #[test]
    fn koleo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // well-separated points so the argmin is stable under perturbation
        let x = Array2::from_shape_fn((5, 3), |(i, j)| {
            (i as f64 + 1.0) * if j == i % 3 { 1.0 } else { 0.2 } + rng.random_range(-0.05..0.05)
        });
        let loss_of = |t: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let v = g.var(t.clone().into_dyn());
            let l = koleo_loss(&mut g, v).unwrap();
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let v = g.var(x.clone().into_dyn());
        let l = koleo_loss(&mut g, v).unwrap();
        let grads = g.backward(l);
        let analytic = grads.get(v).unwrap();
        let step = 1e-6;
        for i in 0..5 {
            for j in 0..3 {
                let mut hi = x.clone();
                hi[[i, j]] += step;
                let mut lo = x.clone();
                lo[[i, j]] -= step;
                let num = (loss_of(&hi) - loss_of(&lo)) / (2.0 * step);
                let a = analytic[[i, j]];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "({i},{j}): analytic {a}, fd {num}");
            }
        }
    }

    #[test]
    fn center_update_endpoints_and_one_step() {
        let batch = Array2::from_shape_vec((2, 2), vec![2.0, -2.0, 0.0, 0.0]).unwrap();
        let mut c = CenterState::new(2, 0.0).unwrap();
        c.update(&batch).unwrap();
        assert_eq!(c.center.as_slice().unwrap(), &[1.0, -1.0]);

        let mut c = CenterState::new(2, 1.0).unwrap();
        c.update(&batch).unwrap();
        assert_eq!(c.center.as_slice().unwrap(), &[0.0, 0.0]);

        let mut c = CenterState::new(2, 0.9).unwrap();
        c.update(&batch).unwrap();
        assert!((c.center[0] - 0.1).abs() < 1e-15);
        assert!((c.center[1] - -0.1).abs() < 1e-15);

        assert!(CenterState::new(2, 1.5).is_err());
        assert!(c.update(&Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn centering_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_mat(3, 5, &mut rng);
        let center = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let c_shift = Array1::from_shape_fn(5, |_| rng.random_range(-3.0..3.0));
        let p1 = teacher_probs(&logits, &center, 0.07).unwrap();
        let shifted = &logits + &c_shift.view().insert_axis(ndarray::Axis(0));
        let p2 = teacher_probs(&shifted, &(&center + &c_shift), 0.07).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sharpening_raises_max_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let center = Array1::zeros(8);
        for _ in 0..100 {
            let logits = rand_mat(1, 8, &mut rng);
            let sharp = teacher_probs(&logits, &center, 0.07).unwrap();
            let soft = teacher_probs(&logits, &center, 1.0).unwrap();
            let max_sharp = sharp.iter().cloned().fold(0.0, f64::max);
            let max_soft = soft.iter().cloned().fold(0.0, f64::max);
            assert!(max_sharp > max_soft);
        }
        assert!(teacher_probs(&rand_mat(1, 8, &mut rng), &center, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let k = 6;
            let t = rand_mat(1, k, &mut rng);
            let s = rand_mat(1, k, &mut rng);
            let p = teacher_probs(&t, &Array1::zeros(k), 0.5).unwrap();
            let h: f64 = -p.row(0).iter().map(|v| v * v.ln()).sum::<f64>();
            let mut g = Graph::new();
            let sv = g.var(s.into_dyn());
            let ce = dino_loss(&mut g, sv, &p, &[(0, 0)], 1.0).unwrap();
            assert!(g.scalar_value(ce) >= h - 1e-12);
        }
    }

    #[test]
    fn total_loss_weighting_and_gradients() {
        let mut g = Graph::new();
        let a = g.var(Tensor::from_elem(IxDyn(&[]), 2.0));
        let b = g.var(Tensor::from_elem(IxDyn(&[]), 1.0));
        let c = g.var(Tensor::from_elem(IxDyn(&[]), -0.5));
        let t = total_loss(&mut g, a, b, c, [1.0, 1.0, 0.1]).unwrap();
        assert!((g.scalar_value(t) - 2.95).abs() < 1e-12);
        let t2 = total_loss(&mut g, a, b, c, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.scalar_value(t2), 2.0);
        assert!(total_loss(&mut g, a, b, c, [1.0, -0.1, 0.0]).is_err());
        // weighted-sum gradient: d(total)/da = w0 exactly
        let grads = g.backward(t);
        assert_eq!(grads.get(a).unwrap()[[]], 1.0);
        assert_eq!(grads.get(c).unwrap()[[]], 0.1);
    }

    #[test]
    fn head_shapes_and_prototype_norms() {
        let cfg = HeadConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = init_head(96, &cfg, &mut rng).unwrap();
        let protos = params.get("prototypes");
        assert_eq!(protos.shape(), &[64, 48]);
        for r in 0..64 {
            let norm: f64 = (0..48).map(|c| protos[[r, c]] * protos[[r, c]]).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let mut g = Graph::new();
        let bind = Binding::bind_all(&mut g, &params);
        let x = g.var(rand_mat(3, 96, &mut rng).into_dyn());
        let out = head_forward(&mut g, &bind, x);
        assert_eq!(g.value(out.logits).shape(), &[3, 64]);
        assert_eq!(g.value(out.bottleneck).shape(), &[3, 48]);
        // bottleneck rows unit-norm, logits are cosines in [-1, 1]
        let bn = g.value(out.bottleneck);
        for r in 0..3 {
            let norm: f64 = (0..48).map(|c| bn[[r, c]] * bn[[r, c]]).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert!(g.value(out.logits).iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let cfg = HeadConfig {
            hidden_dim: 10,
            bottleneck_dim: 6,
            n_prototypes: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = init_head(8, &cfg, &mut rng).unwrap();
        // widen the MLP response so the four bottleneck embeddings land far
        // apart; near-coincident points put the repulsion term close to its
        // singularity where finite differences are meaningless
        for name in ["fc1.weight", "fc2.weight", "fc3.weight"] {
            params.get_mut(name).mapv_inplace(|v| v * 25.0);
        }
        let x = rand_mat(4, 8, &mut rng);
        let teacher = teacher_probs(
            &rand_mat(2, 5, &mut rng),
            &Array1::zeros(5),
            0.07,
        )
        .unwrap();
        let pairs = standard_pairs(2, 4);

        let loss_of = |p: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let bind = Binding::bind_all(&mut g, p);
            let xv = g.var(x.clone().into_dyn());
            let out = head_forward(&mut g, &bind, xv);
            let dl = dino_loss(&mut g, out.logits, &teacher, &pairs, 0.1).unwrap();
            let kl = koleo_loss(&mut g, out.bottleneck).unwrap();
            let zero = g.var(Tensor::zeros(IxDyn(&[])));
            let t = total_loss(&mut g, dl, zero, kl, [1.0, 1.0, 0.1]).unwrap();
            g.scalar_value(t)
        };

        let mut g = Graph::new();
        let bind = Binding::bind_all(&mut g, &params);
        let xv = g.var(x.clone().into_dyn());
        let out = head_forward(&mut g, &bind, xv);
        {
            let bn = g.value(out.bottleneck);
            let mut min_d = f64::INFINITY;
            for i in 0..4 {
                for j in i + 1..4 {
                    let d: f64 = (0..6)
                        .map(|c| (bn[[i, c]] - bn[[j, c]]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    min_d = min_d.min(d);
                }
            }
            assert!(min_d > 0.05, "embeddings not separated enough for FD: {min_d}");
        }
        let dl = dino_loss(&mut g, out.logits, &teacher, &pairs, 0.1).unwrap();
        let kl = koleo_loss(&mut g, out.bottleneck).unwrap();
        let zero = g.var(Tensor::zeros(IxDyn(&[])));
        let t = total_loss(&mut g, dl, zero, kl, [1.0, 1.0, 0.1]).unwrap();
        let mut grads = g.backward(t);
        let mut acc = GradMap::new();
        bind.collect_grads(&mut grads, &mut acc);

        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        for (name, value) in params.iter() {
            let analytic = acc.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            let n = value.len();
            for _ in 0..5.min(n) {
                let idx = rng2.random_range(0..n);
                let step = 1e-5;
                let mut probe = params.clone();
                let base = probe.get(name).as_slice().unwrap()[idx];
                probe.get_mut(name).as_slice_mut().unwrap()[idx] = base + step;
                let hi = loss_of(&probe);
                probe.get_mut(name).as_slice_mut().unwrap()[idx] = base - step;
                let lo = loss_of(&probe);
                let num = (hi - lo) / (2.0 * step);
                let a = analytic.as_slice().unwrap()[idx];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {a}, fd {num}");
            }
        }
    }

    #[test]
    fn head_config_validation() {
        assert!(HeadConfig::default().validate().is_ok());
        assert!(HeadConfig::toy().validate().is_ok());
        let bad = HeadConfig {
            n_prototypes: 1,
            ..HeadConfig::toy()
        };
        assert!(bad.validate().is_err());
    }
}
