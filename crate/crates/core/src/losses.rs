//! Bidirectional triplet loss, the dual-path and distillation combinations,
//! and the total training objective.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scoring::ScoreMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the embedding-path triplet loss.
    pub lambda: f64,
    /// Weight of the teacher/student MSE inside the distillation loss.
    pub gamma: f64,
    /// Weight of the distillation loss in the total objective.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lambda: 0.5,
            gamma: 0.3,
            beta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `Σ_k Σ_{j≠k} [m − s(k,k) + s(k,j)]₊ + Σ_k Σ_{j≠k} [m − s(k,k) + s(j,k)]₊`
pub fn triplet_loss(s: &ScoreMatrix, margin: f64) -> Result<f64> {
    let n = s.size();
    if n < 2 {
        return Err(Error::input("triplet loss needs at least two pairs per batch"));
    }
    let mut loss = 0.0;
    for k in 0..n {
        let pos = s.get(k, k);
        for j in (0..n).filter(|&j| j != k) {
            loss += (margin - pos + s.get(k, j)).max(0.0);
            loss += (margin - pos + s.get(j, k)).max(0.0);
        }
    }
    Ok(loss)
}

pub fn dual_loss(cross: f64, embed: f64, lambda: f64) -> f64 {
    cross + lambda * embed
}

/// Student triplet loss plus `γ · mean((teacher − student)²)`.
pub fn distill_loss(student_triplet: f64, teacher: &[f64], student: &[f64], gamma: f64) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::input(format!(
            "teacher/student similarity lengths differ or are empty: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    let mse = teacher.iter().zip(student).map(|(t, s)| (t - s).powi(2)).sum::<f64>() / teacher.len() as f64;
    Ok(student_triplet + gamma * mse)
}

pub fn total_loss(dual: f64, distill: f64, beta: f64) -> f64 {
    dual + beta * distill
}

/// Graph form of [`triplet_loss`]; `scores[i][j]` is the `1 × 1` score of
/// video `i` against sentence `j`.
pub fn triplet_loss_var(g: &mut Graph, scores: &[Vec<Var>], margin: f64) -> Result<Var> {
    let n = scores.len();
    if n < 2 || scores.iter().any(|r| r.len() != n) {
        return Err(Error::input("triplet loss needs a square batch of at least 2"));
    }
    let mut terms = Vec::with_capacity(2 * n * (n - 1));
    for k in 0..n {
        let pos = scores[k][k];
        for j in (0..n).filter(|&j| j != k) {
            terms.push(hinge_term(g, pos, scores[k][j], margin)?);
            terms.push(hinge_term(g, pos, scores[j][k], margin)?);
        }
    }
    sum_scalars(g, &terms)
}

/// `Σ_n [m − positive + negative_n]₊`, for extra negatives outside the batch.
pub fn hinge_sum_var(g: &mut Graph, positive: Var, negatives: &[Var], margin: f64) -> Result<Option<Var>> {
    if negatives.is_empty() {
        return Ok(None);
    }
    let terms = negatives
        .iter()
        .map(|&neg| hinge_term(g, positive, neg, margin))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(g, &terms).map(Some)
}

fn hinge_term(g: &mut Graph, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let diff = g.sub(neg, pos)?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.relu(shifted))
}

/// Mean of squared differences between two equal-length lists of scalars.
pub fn mse_var(g: &mut Graph, teacher: &[Var], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::input("teacher/student similarity lengths differ or are empty"));
    }
    let t = g.concat_cols(teacher)?;
    let s = g.concat_cols(student)?;
    let d = g.sub(t, s)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

pub fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    match terms {
        [] => Err(Error::input("sum of no terms")),
        [one] => Ok(*one),
        _ => {
            let row = g.concat_cols(terms)?;
            Ok(g.sum(row))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn matrix(n: usize, v: &[f64]) -> ScoreMatrix {
        ScoreMatrix::new(n, v.to_vec()).unwrap()
    }

    #[test]
    fn satisfied_margins_cost_nothing() {
        let s = ScoreMatrix::from_fn(4, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(triplet_loss(&s, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn flat_two_by_two() {
        let s = matrix(2, &[0.5, 0.5, 0.5, 0.5]);
        assert!((triplet_loss(&s, 0.2).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn needs_two_pairs() {
        assert!(matches!(triplet_loss(&matrix(1, &[1.0]), 0.2), Err(Error::Input(_))));
    }

    #[test]
    fn combinations() {
        assert_eq!(dual_loss(1.0, 2.0, 0.0), 1.0);
        assert_eq!(dual_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(dual_loss(1.0, 4.0, 0.5) - dual_loss(1.0, 2.0, 0.5), 0.5 * 2.0);
        assert_eq!(distill_loss(0.7, &[0.2, -0.4], &[0.2, -0.4], 0.3).unwrap(), 0.7);
        assert!((distill_loss(0.0, &[1.0, 1.0], &[0.0, 0.0], 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(distill_loss(1.25, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap(), 1.25);
        assert!(distill_loss(0.0, &[1.0], &[0.0, 0.0], 0.3).is_err());
        assert_eq!(total_loss(1.0, 2.0, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            margin: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            beta: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn graph_triplet_matches_scalar_form() {
        let vals = [0.3, -0.1, 0.25, 0.9, 0.2, 0.15, 0.0, 0.35, 0.4];
        let s = matrix(3, &vals);
        let mut g = Graph::new();
        let vars: Vec<Vec<Var>> = (0..3)
            .map(|i| (0..3).map(|j| g.param(&Tensor::scalar(vals[i * 3 + j]))).collect())
            .collect();
        let l = triplet_loss_var(&mut g, &vars, 0.2).unwrap();
        assert!((g.value(l).item() - triplet_loss(&s, 0.2).unwrap()).abs() < 1e-15);
    }

    fn square(n: usize) -> impl Strategy<Value = ScoreMatrix> {
        proptest::collection::vec(-3.0f64..3.0, n * n).prop_map(move |v| ScoreMatrix::new(n, v).unwrap())
    }

    proptest! {
        #[test]
        fn triplet_properties(s in (2usize..6).prop_flat_map(square), c in -5.0f64..5.0, m in 0.01f64..1.0, dm in 0.0f64..1.0) {
            let base = triplet_loss(&s, m).unwrap();
            prop_assert!(base >= 0.0);
            let shifted = triplet_loss(&s.map(|v| v + c).unwrap(), m).unwrap();
            prop_assert!((base - shifted).abs() <= 1e-9 * (1.0 + base));
            prop_assert!((base - triplet_loss(&s.transpose(), m).unwrap()).abs() <= 1e-12 * (1.0 + base));
            prop_assert!(triplet_loss(&s, m + dm).unwrap() >= base);
            let satisfied = (0..s.size()).all(|k| (0..s.size()).filter(|&j| j != k)
                .all(|j| s.get(k, k) - s.get(k, j) >= m && s.get(k, k) - s.get(j, k) >= m));
            prop_assert_eq!(base == 0.0, satisfied);
        }
    }
}
