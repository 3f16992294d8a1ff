//! Invertibility and log-determinant checks over every layer of a model.

use std::fmt;

use crate::array::DenseArray;
use crate::error::Result;
use crate::layers::{FlowLayer, Layer};
use crate::linalg::Lu;
use crate::model::FlowModel;
use crate::params::ParamStore;

/// Largest per-sample dimension for which the Jacobian is formed.
pub const FD_MAX_DIMS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditTolerances {
    pub roundtrip: f64,
    pub logdet: f64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        Self {
            roundtrip: 1e-6,
            logdet: 1e-4,
            step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAudit {
    pub name: String,
    pub roundtrip: f64,
    /// `None` when the layer is too wide for a finite-difference Jacobian.
    pub logdet: Option<f64>,
    /// Set when the layer failed to evaluate.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub tol: AuditTolerances,
    pub layers: Vec<LayerAudit>,
    /// `decode(encode(x))` against `x` for the whole model.
    pub model_roundtrip: f64,
}

impl LayerAudit {
    pub fn passed(&self, tol: &AuditTolerances) -> bool {
        self.error.is_none() && self.roundtrip <= tol.roundtrip && self.logdet.is_none_or(|e| e <= tol.logdet)
    }
}

impl AuditReport {
    pub fn max_roundtrip(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.roundtrip)
            .fold(self.model_roundtrip, f64::max)
    }

    pub fn max_logdet(&self) -> Option<f64> {
        self.layers.iter().filter_map(|l| l.logdet).reduce(f64::max)
    }

    pub fn failures(&self) -> Vec<&LayerAudit> {
        self.layers.iter().filter(|l| !l.passed(&self.tol)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.model_roundtrip <= self.tol.roundtrip
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            let status = if l.passed(&self.tol) { "ok" } else { "FAIL" };
            write!(f, "{status:4} {:32} roundtrip {:.3e}", l.name, l.roundtrip)?;
            match l.logdet {
                Some(e) => write!(f, "  logdet {e:.3e}")?,
                None => write!(f, "  logdet -")?,
            }
            if let Some(e) = &l.error {
                write!(f, "  error: {e}")?;
            }
            writeln!(f)?;
        }
        writeln!(f, "model roundtrip {:.3e}", self.model_roundtrip)?;
        write!(f, "max roundtrip {:.3e}", self.max_roundtrip())?;
        if let Some(e) = self.max_logdet() {
            write!(f, ", max logdet {e:.3e}")?;
        }
        Ok(())
    }
}

/// Finite-difference `log |det J|` minus the layer's reported logdet, for
/// one sample `x: [1, h, w, c]`.
fn logdet_error(layer: &Layer, params: &ParamStore, x: &DenseArray, step: f64) -> Result<f64> {
    let d = x.len();
    let (y0, ld) = layer.forward_array(params, x)?;
    let dout = y0.len();
    let mut jac = DenseArray::zeros(&[dout, d]);
    let mut xp = x.clone();
    for j in 0..d {
        let orig = xp.data()[j];
        xp.data_mut()[j] = orig + step;
        let fp = layer.forward_array(params, &xp)?.0;
        xp.data_mut()[j] = orig - step;
        let fm = layer.forward_array(params, &xp)?.0;
        xp.data_mut()[j] = orig;
        for i in 0..dout {
            jac.data_mut()[i * d + j] = (fp.data()[i] - fm.data()[i]) / (2.0 * step);
        }
    }
    Ok((Lu::factor(&jac)?.log_abs_det() - ld.data()[0]).abs())
}

fn audit_layer(layer: &Layer, params: &ParamStore, x: &DenseArray, tol: &AuditTolerances) -> LayerAudit {
    let mut out = LayerAudit {
        name: layer.name().to_string(),
        roundtrip: 0.0,
        logdet: None,
        error: None,
    };
    let run = |out: &mut LayerAudit| -> Result<()> {
        let (y, _) = layer.forward_array(params, x)?;
        let back = layer.inverse(params, &y)?;
        out.roundtrip = back.max_abs_diff(x);
        let per_sample = x.len() / x.shape()[0];
        if per_sample <= FD_MAX_DIMS {
            let first = x.select_rows(&[0]);
            out.logdet = Some(logdet_error(layer, params, &first, tol.step)?);
        }
        Ok(())
    };
    if let Err(e) = run(&mut out) {
        out.roundtrip = f64::INFINITY;
        out.error = Some(e.to_string());
    }
    if !out.roundtrip.is_finite() && out.error.is_none() {
        out.error = Some("non-finite round trip".into());
    }
    out
}

/// Audits each layer on the activations `x` produces as it flows through
/// the model, then the full encode/decode round trip.
pub fn audit(model: &FlowModel, params: &ParamStore, x: &DenseArray, tol: AuditTolerances) -> Result<AuditReport> {
    let mut layers = Vec::new();
    let traced = model.trace_layers(params, x, |layer, h| {
        layers.push(audit_layer(layer, params, h, &tol));
        Ok(())
    });
    let model_roundtrip = match traced {
        Ok(()) => match model.encode(params, x).and_then(|(z, _)| model.decode(params, &z)) {
            Ok(back) => back.max_abs_diff(x),
            Err(_) => f64::INFINITY,
        },
        // A layer failed to evaluate; it is already recorded above.
        Err(_) => f64::INFINITY,
    };
    Ok(AuditReport {
        tol,
        layers,
        model_roundtrip,
    })
}
