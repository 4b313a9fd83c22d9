//! Plain-text standard-form dump.
//!
//! ```text
//! conic 1
//! size <vars> <rows>
//! cone nonneg <d> | cone soc <d> | cone psd <side>     (in order)
//! name <label> <start> <end>                            (optional)
//! c <j> <value>                                         (nonzeros only)
//! a <i> <j> <value>
//! b <i> <value>
//! end
//! ```
//!
//! Indices are zero-based, PSD blocks are in `svec` coordinates and values
//! are printed in shortest round-trip form. Blank lines and lines starting
//! with `#` are ignored.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use super::{Cone, ConicError, ConicProblem};

pub fn write_problem<W: Write>(problem: &ConicProblem, mut out: W) -> Result<(), ConicError> {
    problem.validate()?;
    let mut s = String::new();
    let _ = writeln!(s, "conic 1");
    let _ = writeln!(s, "size {} {}", problem.num_vars(), problem.num_rows());
    for k in &problem.cones {
        let _ = match k {
            Cone::NonNeg(d) => writeln!(s, "cone nonneg {d}"),
            Cone::Soc(d) => writeln!(s, "cone soc {d}"),
            Cone::Psd(side) => writeln!(s, "cone psd {side}"),
        };
    }
    for (name, r) in &problem.names {
        let _ = writeln!(s, "name {name} {} {}", r.start, r.end);
    }
    for (j, v) in problem.c.iter().enumerate().filter(|(_, v)| **v != 0.0) {
        let _ = writeln!(s, "c {j} {v}");
    }
    for j in 0..problem.a.ncols() {
        for i in 0..problem.a.nrows() {
            let v = problem.a[(i, j)];
            if v != 0.0 {
                let _ = writeln!(s, "a {i} {j} {v}");
            }
        }
    }
    for (i, v) in problem.b.iter().enumerate().filter(|(_, v)| **v != 0.0) {
        let _ = writeln!(s, "b {i} {v}");
    }
    s.push_str("end\n");
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_problem<R: BufRead>(input: R) -> Result<ConicProblem, ConicError> {
    let mut problem: Option<ConicProblem> = None;
    let mut seen_header = false;
    let mut finished = false;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let err = |msg: &str| ConicError::Parse {
            line: lineno,
            msg: msg.to_string(),
        };
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if finished {
            return Err(err("content after `end`"));
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if !seen_header {
            if f != ["conic", "1"] {
                return Err(err("expected header `conic 1`"));
            }
            seen_header = true;
            continue;
        }
        let num = |i: usize| -> Result<usize, ConicError> {
            f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| err("bad integer field"))
        };
        let real = |i: usize| -> Result<f64, ConicError> {
            f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| err("bad real field"))
        };
        match f[0] {
            "size" => {
                if problem.is_some() {
                    return Err(err("duplicate size line"));
                }
                let (n, m) = (num(1)?, num(2)?);
                problem = Some(ConicProblem::new(
                    DVector::zeros(n),
                    DMatrix::zeros(m, n),
                    DVector::zeros(m),
                    Vec::new(),
                ));
            }
            "end" => finished = true,
            tag => {
                let p = problem.as_mut().ok_or_else(|| err("size line must come first"))?;
                let (n, m) = (p.num_vars(), p.num_rows());
                match tag {
                    "cone" => {
                        let d = num(2)?;
                        let cone = match f.get(1).copied() {
                            Some("nonneg") => Cone::NonNeg(d),
                            Some("soc") => Cone::Soc(d),
                            Some("psd") => Cone::Psd(d),
                            _ => return Err(err("unknown cone kind")),
                        };
                        p.cones.push(cone);
                    }
                    "name" => {
                        let label = f.get(1).ok_or_else(|| err("missing name"))?;
                        p.names.insert(label.to_string(), num(2)?..num(3)?);
                    }
                    "c" => {
                        let j = num(1)?;
                        if j >= n {
                            return Err(err("c index out of range"));
                        }
                        p.c[j] = real(2)?;
                    }
                    "a" => {
                        let (i, j) = (num(1)?, num(2)?);
                        if i >= m || j >= n {
                            return Err(err("a index out of range"));
                        }
                        p.a[(i, j)] = real(3)?;
                    }
                    "b" => {
                        let i = num(1)?;
                        if i >= m {
                            return Err(err("b index out of range"));
                        }
                        p.b[i] = real(2)?;
                    }
                    _ => return Err(err("unknown record")),
                }
            }
        }
    }
    if !finished {
        return Err(ConicError::Parse {
            line: 0,
            msg: "missing `end`".into(),
        });
    }
    let p = problem.ok_or(ConicError::Parse {
        line: 0,
        msg: "missing size line".into(),
    })?;
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ConicProblem::new(
            DVector::from_vec(vec![1.0, 0.0, -0.1, 1.0 / 3.0]),
            DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 0.0, 1e-17, 3.5, 1.0]),
            DVector::from_vec(vec![2.0, 0.0]),
            vec![Cone::NonNeg(1), Cone::Psd(2)],
        );
        p.names.insert("v".into(), 1..4);
        let mut buf = Vec::new();
        write_problem(&p, &mut buf).unwrap();
        let q = read_problem(buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn reports_line_numbers() {
        let text = "conic 1\nsize 1 1\ncone nonneg 1\na 3 0 1.0\nend\n";
        match read_problem(text.as_bytes()) {
            Err(ConicError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }
}
