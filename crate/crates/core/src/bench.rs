//! Statistics of the matexp cost coefficient `m = s + k − 1`.

use std::io::Write;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::matexp::{matexp, SquareWeight};
use crate::rng::FlowRng;

pub const BENCH_COLUMNS: &str = "norm1,trial,s,k,m";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchRow {
    pub norm_index: usize,
    pub trial: usize,
    pub s: u32,
    pub k: u32,
    pub m: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: u32,
    pub max: u32,
}

/// Running mean and variance (Welford) plus extremes of `m`.
#[derive(Debug, Clone, Default)]
struct Accumulator {
    count: usize,
    mean: f64,
    m2: f64,
    min: u32,
    max: u32,
}

impl Accumulator {
    fn push(&mut self, m: u32) {
        if self.count == 0 {
            self.min = m;
            self.max = m;
        }
        self.min = self.min.min(m);
        self.max = self.max.max(m);
        self.count += 1;
        let x = f64::from(m);
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn stats(&self) -> BenchStats {
        BenchStats {
            count: self.count,
            mean: self.mean,
            std: if self.count > 0 {
                (self.m2 / self.count as f64).sqrt()
            } else {
                0.0
            },
            min: self.min,
            max: self.max,
        }
    }
}

/// Gaussian `dim × dim` matrix rescaled to the given 1-norm.
pub fn random_weight(dim: usize, norm1: f64, rng: &mut FlowRng) -> SquareWeight {
    let w = DenseArray::new(&[dim, dim], rng.normals(dim * dim)).expect("square shape");
    let n = w.norm1();
    let w = if n > 0.0 { w.scale(norm1 / n) } else { w };
    SquareWeight::new(w).expect("square weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub norms: Vec<f64>,
    pub trials: usize,
    pub eps: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            norms: vec![0.1, 0.25, 0.5, 1.0, 1.5],
            trials: 1000,
            eps: crate::matexp::DEFAULT_EPS,
            dim: 8,
            seed: 0,
        }
    }
}

/// Runs `trials` matexp evaluations per target norm, calling `visit` on each
/// row as it is produced, and returns the aggregate statistics.
pub fn expm_bench(cfg: &BenchConfig, mut visit: impl FnMut(&BenchRow) -> Result<()>) -> Result<BenchStats> {
    if cfg.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    let mut rng = FlowRng::derive(cfg.seed, "bench");
    let mut acc = Accumulator::default();
    for (ni, &norm) in cfg.norms.iter().enumerate() {
        if !(norm >= 0.0 && norm.is_finite()) {
            return Err(Error::Config(format!("norm {norm} must be finite and nonnegative")));
        }
        for trial in 0..cfg.trials {
            let w = random_weight(cfg.dim, norm, &mut rng);
            let r = matexp(&w, cfg.eps)?;
            acc.push(r.m);
            visit(&BenchRow {
                norm_index: ni,
                trial,
                s: r.s,
                k: r.k,
                m: r.m,
            })?;
        }
    }
    Ok(acc.stats())
}

/// [`expm_bench`] streaming CSV rows to `out`.
pub fn expm_bench_csv<W: Write>(cfg: &BenchConfig, out: &mut W) -> Result<BenchStats> {
    writeln!(out, "{BENCH_COLUMNS}")?;
    expm_bench(cfg, |r| {
        writeln!(out, "{},{},{},{},{}", cfg.norms[r.norm_index], r.trial, r.s, r.k, r.m)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_has_unit_cost() {
        let cfg = BenchConfig {
            norms: vec![0.0],
            trials: 3,
            ..BenchConfig::default()
        };
        let s = expm_bench(&cfg, |r| {
            assert_eq!((r.s, r.k, r.m), (0, 2, 1));
            Ok(())
        })
        .unwrap();
        assert_eq!((s.min, s.max, s.count), (1, 1, 3));
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn random_weight_hits_target_norm() {
        let mut rng = FlowRng::seed(3);
        let w = random_weight(5, 0.7, &mut rng);
        assert!((w.as_array().norm1() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_trial() {
        let cfg = BenchConfig {
            norms: vec![0.1, 0.4],
            trials: 4,
            ..BenchConfig::default()
        };
        let mut out = Vec::new();
        let s = expm_bench_csv(&cfg, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert_eq!(s.count, 8);
        assert!(text.starts_with(BENCH_COLUMNS));
    }
}
