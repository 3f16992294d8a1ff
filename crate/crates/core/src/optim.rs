//! Adamax and Adam over the trainable entries of a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adamax,
    Adam,
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamax" => Ok(Self::Adamax),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!(
                "unknown optimizer `{s}` (expected adamax or adam)"
            ))),
        }
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adamax => "adamax",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adamax,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates per trainable parameter. `second` holds the infinity
/// norm accumulator `u` for Adamax and the squared-gradient average `v` for
/// Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    step: u64,
    ids: Vec<ParamId>,
    first: Vec<DenseArray>,
    second: Vec<DenseArray>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let ids = params.trainable_ids();
        let zeros: Vec<DenseArray> = ids
            .iter()
            .map(|&id| DenseArray::zeros(params.get(id).shape()))
            .collect();
        Self {
            cfg,
            step: 0,
            ids,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients must come in trainable-store order, as
    /// [`crate::params::Ctx::gradients`] returns them. Non-finite gradients
    /// leave everything untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, DenseArray)]) -> Result<()> {
        if grads.len() != self.ids.len() || grads.iter().zip(&self.ids).any(|((g, _), id)| g != id) {
            return Err(Error::invalid(
                "optimizer",
                "gradients do not match the trainable parameters",
            ));
        }
        if !grads.iter().all(|(_, g)| g.all_finite()) {
            return Err(Error::NonFinite { op: "optimizer step" });
        }
        self.step += 1;
        let t = self.step as i32;
        let OptimConfig {
            kind,
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (i, (id, g)) in grads.iter().enumerate() {
            let theta = params.get_mut(*id).data_mut();
            let m = self.first[i].data_mut();
            let s = self.second[i].data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                match kind {
                    OptimKind::Adamax => {
                        s[j] = (b2 * s[j]).max(gj.abs());
                        theta[j] -= (lr / bias1) * m[j] / (s[j] + eps);
                    }
                    OptimKind::Adam => {
                        s[j] = b2 * s[j] + (1.0 - b2) * gj * gj;
                        let mh = m[j] / bias1;
                        let vh = s[j] / bias2;
                        theta[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Named arrays for checkpointing.
    pub fn export(&self, params: &ParamStore) -> Vec<(String, DenseArray)> {
        let mut out = vec![("optim.step".to_string(), DenseArray::scalar(self.step as f64))];
        for (i, &id) in self.ids.iter().enumerate() {
            out.push((format!("optim.m/{}", params.name(id)), self.first[i].clone()));
            out.push((format!("optim.s/{}", params.name(id)), self.second[i].clone()));
        }
        out
    }

    /// Restores state written by [`Optimizer::export`].
    pub fn import(&mut self, params: &ParamStore, get: impl Fn(&str) -> Option<DenseArray>) -> Result<()> {
        let missing = |name: &str| Error::ConfigMismatch(format!("checkpoint lacks optimizer record `{name}`"));
        let step = get("optim.step").ok_or_else(|| missing("optim.step"))?.item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::ConfigMismatch(format!("optimizer step {step} is not a count")));
        }
        for (i, &id) in self.ids.iter().enumerate() {
            for (prefix, slot) in [("optim.m/", &mut self.first[i]), ("optim.s/", &mut self.second[i])] {
                let name = format!("{prefix}{}", params.name(id));
                let v = get(&name).ok_or_else(|| missing(&name))?;
                if v.shape() != slot.shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "{name}: shape {:?} does not match {:?}",
                        v.shape(),
                        slot.shape()
                    )));
                }
                *slot = v;
            }
        }
        self.step = step as u64;
        Ok(())
    }
}

/// Global 2-norm of the gradients.
pub fn global_norm(grads: &[(ParamId, DenseArray)]) -> f64 {
    grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`, and
/// returns the norm before clipping. `max_norm ≤ 0` disables clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, DenseArray)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(kind: OptimKind, eps: f64) -> (ParamStore, ParamId, Optimizer) {
        let mut p = ParamStore::new();
        let id = p.add("theta", DenseArray::scalar(0.0));
        let cfg = OptimConfig {
            kind,
            eps,
            ..OptimConfig::default()
        };
        let opt = Optimizer::new(cfg, &p);
        (p, id, opt)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut p, id, mut opt) = one_param(OptimKind::Adamax, 1e-8);
        opt.step(&mut p, &[(id, DenseArray::scalar(0.0))]).unwrap();
        assert_eq!(p.get(id).item(), 0.0);
    }

    #[test]
    fn adamax_hand_evaluation() {
        let (mut p, id, mut opt) = one_param(OptimKind::Adamax, 0.0);
        opt.step(&mut p, &[(id, DenseArray::scalar(1.0))]).unwrap();
        assert!((p.get(id).item() + 0.01).abs() < 1e-15);
        opt.step(&mut p, &[(id, DenseArray::scalar(1.0))]).unwrap();
        assert!((p.get(id).item() + 0.02).abs() < 1e-15);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut p, id, mut opt) = one_param(OptimKind::Adam, 0.0);
        opt.step(&mut p, &[(id, DenseArray::scalar(3.0))]).unwrap();
        assert!((p.get(id).item() + 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let (mut p, id, mut opt) = one_param(OptimKind::Adamax, 1e-8);
        let err = opt.step(&mut p, &[(id, DenseArray::scalar(f64::NAN))]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(p.get(id).item(), 0.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut p = ParamStore::new();
        let id = p.add("g", DenseArray::zeros(&[2]));
        let mut g = vec![(id, DenseArray::from_vec(vec![30.0, 40.0]))];
        assert_eq!(clip_global_norm(&mut g, 5.0), 50.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 0.0), global_norm(&g));
    }
}
