//! Per-iteration optimization records and their CSV serialization.
//!
//! Both optimizers emit the same row shape:
//! `iter,objective,err_seen,err_unseen,grad_norm,wall_ms,<params...>`
//! with parameter columns named at construction (for a Gaussian iterate:
//! mean entries, then the lower triangle of L row by row). Floats are
//! written with shortest-roundtrip formatting, so equal runs produce
//! byte-identical files.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::measures::GaussianMeasure;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    /// Standard error of the objective estimate; 0 for exact evaluations.
    /// Kept in memory for noise-aware monotonicity checks, not serialized.
    pub objective_se: f64,
    pub err_seen: f64,
    pub err_unseen: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    param_names: Vec<String>,
    records: Vec<TraceRecord>,
}

/// Column names for a flattened Gaussian iterate in dimension `d`.
pub fn gaussian_param_names(d: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(d + d * (d + 1) / 2);
    for i in 0..d {
        names.push(format!("m{i}"));
    }
    for i in 0..d {
        for j in 0..=i {
            names.push(format!("L{i}_{j}"));
        }
    }
    names
}

/// Rebuild a Gaussian from a parameter row laid out by [`flatten_gaussian`].
pub fn unflatten_gaussian(values: &[f64], d: usize) -> Result<GaussianMeasure> {
    let expected = d + d * (d + 1) / 2;
    if values.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "flattened Gaussian parameter count",
            expected,
            found: values.len(),
        });
    }
    let mean = DVector::from_column_slice(&values[..d]);
    let mut l = DMatrix::zeros(d, d);
    let mut pos = d;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = values[pos];
            pos += 1;
        }
    }
    GaussianMeasure::new(mean, l)
}

/// Mean entries followed by the lower triangle of L, row by row.
pub fn flatten_gaussian(g: &GaussianMeasure) -> Vec<f64> {
    let d = g.dim();
    let mut out = Vec::with_capacity(d + d * (d + 1) / 2);
    out.extend(g.mean().iter());
    let l = g.cov_factor();
    for i in 0..d {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    out
}

impl OptimizationTrace {
    pub fn new(param_names: Vec<String>) -> Self {
        OptimizationTrace {
            param_names,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: TraceRecord) {
        assert_eq!(
            record.params.len(),
            self.param_names.len(),
            "trace record parameter count"
        );
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "iter,objective,err_seen,err_unseen,grad_norm,wall_ms")?;
        for name in &self.param_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(
                w,
                "{},{},{},{},{},{}",
                r.iter, r.objective, r.err_seen, r.err_unseen, r.grad_norm, r.wall_ms
            )?;
            for p in &r.params {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("trace rows are ASCII")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn record(iter: usize, params: Vec<f64>) -> TraceRecord {
        TraceRecord {
            iter,
            objective: 0.5,
            objective_se: 0.0,
            err_seen: 0.25,
            err_unseen: f64::NAN,
            grad_norm: 1.0 / 3.0,
            wall_ms: 0.0,
            params,
        }
    }

    #[test]
    fn header_layout_for_gaussian_params() {
        let names = gaussian_param_names(2);
        assert_eq!(names, ["m0", "m1", "L0_0", "L1_0", "L1_1"]);
        let trace = OptimizationTrace::new(names);
        let csv = trace.to_csv_string();
        assert_eq!(
            csv,
            "iter,objective,err_seen,err_unseen,grad_norm,wall_ms,m0,m1,L0_0,L1_0,L1_1\n"
        );
    }

    #[test]
    fn flatten_orders_mean_then_lower_triangle() {
        let mut l = DMatrix::zeros(2, 2);
        l[(0, 0)] = 1.0;
        l[(1, 0)] = 0.5;
        l[(1, 1)] = 2.0;
        let g = GaussianMeasure::new(DVector::from_vec(vec![3.0, 4.0]), l).unwrap();
        assert_eq!(flatten_gaussian(&g), vec![3.0, 4.0, 1.0, 0.5, 2.0]);
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let mut l = DMatrix::zeros(3, 3);
        l[(0, 0)] = 1.5;
        l[(1, 0)] = -0.25;
        l[(1, 1)] = 0.75;
        l[(2, 0)] = 0.1;
        l[(2, 1)] = -0.6;
        l[(2, 2)] = 2.0;
        let g = GaussianMeasure::new(DVector::from_vec(vec![0.3, -1.0, 4.5]), l).unwrap();
        let flat = flatten_gaussian(&g);
        let back = unflatten_gaussian(&flat, 3).unwrap();
        assert_eq!(back.mean(), g.mean());
        assert_eq!(back.cov_factor(), g.cov_factor());
        assert!(unflatten_gaussian(&flat, 2).is_err());
        assert!(unflatten_gaussian(&flat[..4], 3).is_err());
    }

    #[test]
    fn csv_floats_roundtrip_bitwise() {
        let mut trace = OptimizationTrace::new(vec!["m0".into()]);
        trace.push(record(0, vec![0.1 + 0.2]));
        trace.push(record(1, vec![-1.0 / 7.0]));
        let csv = trace.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        for (line, rec) in lines[1..].iter().zip(trace.records()) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 7);
            let back: f64 = cells[6].parse().unwrap();
            assert_eq!(back.to_bits(), rec.params[0].to_bits());
            assert_eq!(cells[3], "NaN");
        }
    }

    #[test]
    #[should_panic(expected = "parameter count")]
    fn mismatched_params_rejected() {
        let mut trace = OptimizationTrace::new(gaussian_param_names(2));
        trace.push(record(0, vec![1.0]));
    }
}
