//! Lattice-level distillation loss and the combined training objective.

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::rnnt::Lattice;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillationConfig {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Softmax temperature applied to teacher and student joint outputs.
    pub temperature: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            alpha: 0.02,
            temperature: 1.0,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("distill.alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "distill.temperature = {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub transducer_loss: f64,
    pub kd_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct KdResult {
    pub loss: f64,
    /// d loss / d student log-probs, which is `-P_teacher` at every entry.
    pub grad_student_log_probs: Vec<f64>,
}

/// `sum_{t,u} sum_k P_T(k|t,u) (ln P_T(k|t,u) - ln P_S(k|t,u))`, summed over
/// every lattice node. The teacher is a constant.
pub fn kd_loss(teacher: &Lattice, student: &Lattice) -> Result<KdResult> {
    if !teacher.same_dims(student) {
        return Err(Error::shape(
            "kd_loss",
            format!(
                "teacher {}x{}x{} vs student {}x{}x{}",
                teacher.frames(),
                teacher.labels() + 1,
                teacher.vocab() + 1,
                student.frames(),
                student.labels() + 1,
                student.vocab() + 1
            ),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student.log_probs().len());
    for (&lt, &ls) in teacher.log_probs().iter().zip(student.log_probs()) {
        let pt = lt.exp();
        if pt > 0.0 {
            loss += pt * (lt - ls);
        }
        grad.push(-pt);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "kd_loss" });
    }
    // KL is non-negative; rounding can leave a tiny negative residue
    Ok(KdResult {
        loss: loss.max(0.0),
        grad_student_log_probs: grad,
    })
}

/// Gradient of [`kd_loss`] w.r.t. the student's pre-softmax logits:
/// `P_S - P_T` at every entry.
pub fn kd_grad_logits(teacher: &Lattice, student: &Lattice) -> Result<Vec<f64>> {
    if !teacher.same_dims(student) {
        return Err(Error::shape("kd_loss", "teacher and student lattices differ in shape"));
    }
    Ok(teacher
        .log_probs()
        .iter()
        .zip(student.log_probs())
        .map(|(lt, ls)| ls.exp() - lt.exp())
        .collect())
}

/// `(1 - alpha) * transducer + alpha * kd`.
pub fn total_loss(transducer_loss: f64, kd_loss: f64, config: &DistillationConfig) -> Result<LossBreakdown> {
    config.validate()?;
    Ok(LossBreakdown {
        transducer_loss,
        kd_loss,
        total: (1.0 - config.alpha) * transducer_loss + config.alpha * kd_loss,
    })
}

/// Distillation loss on a tape against fixed teacher log-probs; the result
/// backpropagates into `student_log_probs`.
pub fn kd_loss_on_tape(tape: &mut Tape, student_log_probs: Var, teacher: &Lattice) -> Result<(Var, f64)> {
    let student = crate::rnnt::lattice_from_var(tape, student_log_probs, teacher.frames(), teacher.labels())?;
    let res = kd_loss(teacher, &student)?;
    let v = tape.external_scalar(student_log_probs, res.loss, res.grad_student_log_probs)?;
    Ok((v, res.loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_node(p: [f64; 2]) -> Lattice {
        Lattice::new(1, 0, 1, vec![p[0].ln(), p[1].ln()]).unwrap()
    }

    #[test]
    fn identical_lattices_have_zero_loss() {
        let lat = Lattice::from_logits(2, 1, 2, &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5, 1.0, 1.0, -2.0, 4.0, 0.1, 0.2]).unwrap();
        assert_eq!(kd_loss(&lat, &lat).unwrap().loss, 0.0);
    }

    #[test]
    fn single_node_value() {
        let t = single_node([0.75, 0.25]);
        let s = single_node([0.5, 0.5]);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let got = kd_loss(&t, &s).unwrap().loss;
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn loss_sums_over_nodes() {
        let t = single_node([0.75, 0.25]);
        let s = single_node([0.5, 0.5]);
        let c = kd_loss(&t, &s).unwrap().loss;
        let tt = Lattice::new(2, 0, 1, [t.log_probs(), t.log_probs()].concat()).unwrap();
        let ss = Lattice::new(2, 0, 1, [s.log_probs(), s.log_probs()].concat()).unwrap();
        assert!((kd_loss(&tt, &ss).unwrap().loss - 2.0 * c).abs() < 1e-15);
    }

    #[test]
    fn direction_matters() {
        let a = single_node([0.9, 0.1]);
        let b = single_node([0.4, 0.6]);
        let ab = kd_loss(&a, &b).unwrap().loss;
        let ba = kd_loss(&b, &a).unwrap().loss;
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn shape_mismatch() {
        let a = single_node([0.9, 0.1]);
        let b = Lattice::new(2, 0, 1, vec![-0.1; 4]).unwrap();
        assert!(kd_loss(&a, &b).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let cfg = DistillationConfig { alpha: 0.0, temperature: 1.0 };
        assert_eq!(total_loss(2.0, 0.5, &cfg).unwrap().total, 2.0);
        let cfg = DistillationConfig { alpha: 1.0, temperature: 1.0 };
        assert_eq!(total_loss(2.0, 0.5, &cfg).unwrap().total, 0.5);
        let b = total_loss(2.0, 0.5, &DistillationConfig::default()).unwrap();
        assert!((b.total - 1.97).abs() < 1e-15);
        let bad = DistillationConfig { alpha: 1.5, temperature: 1.0 };
        assert!(total_loss(2.0, 0.5, &bad).is_err());
    }
}
