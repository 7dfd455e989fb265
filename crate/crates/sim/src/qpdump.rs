//! Plain-text QP dump.
//!
//! ```text
//! # drift-sim QP dump v1
//! n <variables>
//! m <inequality rows>
//! H
//! <n lines of n values>
//! f
//! <one line of n values>
//! A
//! <m lines of n values>
//! b
//! <one line of m values>
//! lower
//! <one line of n values>
//! upper
//! <one line of n values>
//! ```
//!
//! Values are whitespace separated and written in shortest round-trip form;
//! unbounded entries appear as `inf` / `-inf`. An empty vector is an empty
//! line. Lines starting with `#` are ignored on load.

use crate::SimError;
use drift_core::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use std::fmt::Write;
use std::path::Path;

pub const MAGIC: &str = "# drift-sim QP dump v1";

fn line(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn to_text(p: &QpProblem) -> String {
    let mut out = String::new();
    let n = p.num_vars();
    let m = p.num_ineq();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(
        out,
        "# minimize 0.5 x'Hx + f'x subject to A x <= b and lower <= x <= upper"
    )
    .unwrap();
    writeln!(out, "n {n}").unwrap();
    writeln!(out, "m {m}").unwrap();
    writeln!(out, "H").unwrap();
    for i in 0..n {
        writeln!(out, "{}", line(p.h.row(i).iter().copied())).unwrap();
    }
    writeln!(out, "f\n{}", line(p.f.iter().copied())).unwrap();
    writeln!(out, "A").unwrap();
    for i in 0..m {
        writeln!(out, "{}", line(p.a_ieq.row(i).iter().copied())).unwrap();
    }
    writeln!(out, "b\n{}", line(p.b_ieq.iter().copied())).unwrap();
    writeln!(out, "lower\n{}", line(p.lower.iter().copied())).unwrap();
    writeln!(out, "upper\n{}", line(p.upper.iter().copied())).unwrap();
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
    first: bool,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str, SimError> {
        loop {
            let l = self
                .inner
                .next()
                .ok_or_else(|| SimError::QpDump(format!("unexpected end of input, expected {what}")))?;
            if self.first {
                self.first = false;
                if l.trim() != MAGIC {
                    return Err(SimError::QpDump("missing header line".into()));
                }
                continue;
            }
            if !l.trim_start().starts_with('#') {
                return Ok(l);
            }
        }
    }

    fn keyword(&mut self, key: &str) -> Result<(), SimError> {
        let l = self.next(key)?;
        if l.trim() == key {
            Ok(())
        } else {
            Err(SimError::QpDump(format!("expected section {key}, found {l:?}")))
        }
    }

    fn count(&mut self, key: &str) -> Result<usize, SimError> {
        let l = self.next(key)?;
        let mut parts = l.split_whitespace();
        match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
            (Some(k), Some(Ok(v)), None) if k == key => Ok(v),
            _ => Err(SimError::QpDump(format!("expected `{key} <count>`, found {l:?}"))),
        }
    }

    fn values(&mut self, what: &str, len: usize) -> Result<Vec<f64>, SimError> {
        let l = self.next(what)?;
        let vals = l
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| SimError::QpDump(format!("bad number {t:?} in {what}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != len {
            return Err(SimError::QpDump(format!(
                "{what}: expected {len} values, found {}",
                vals.len()
            )));
        }
        Ok(vals)
    }
}

pub fn from_text(text: &str) -> Result<QpProblem, SimError> {
    let mut lines = Lines {
        inner: text.lines().peekable(),
        first: true,
    };
    let n = lines.count("n")?;
    let m = lines.count("m")?;
    lines.keyword("H")?;
    let mut h = Vec::with_capacity(n * n);
    for i in 0..n {
        h.extend(lines.values(&format!("H row {i}"), n)?);
    }
    lines.keyword("f")?;
    let f = lines.values("f", n)?;
    lines.keyword("A")?;
    let mut a = Vec::with_capacity(m * n);
    for i in 0..m {
        a.extend(lines.values(&format!("A row {i}"), n)?);
    }
    lines.keyword("b")?;
    let b = lines.values("b", m)?;
    lines.keyword("lower")?;
    let lower = lines.values("lower", n)?;
    lines.keyword("upper")?;
    let upper = lines.values("upper", n)?;
    let problem = QpProblem {
        h: DMatrix::from_row_slice(n, n, &h),
        f: DVector::from_vec(f),
        a_ieq: DMatrix::from_row_slice(m, n, &a),
        b_ieq: DVector::from_vec(b),
        lower: DVector::from_vec(lower),
        upper: DVector::from_vec(upper),
    };
    problem.check_dimensions()?;
    Ok(problem)
}

pub fn save(problem: &QpProblem, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, to_text(problem)).map_err(SimError::io(path))
}

pub fn load(path: &Path) -> Result<QpProblem, SimError> {
    let text = std::fs::read_to_string(path).map_err(SimError::io(path))?;
    from_text(&text)
}
