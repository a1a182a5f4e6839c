//! Text container for named matrices.
//!
//! ```text
//! gsntk-arrays 1
//! array rec 2 2
//! 0.5 -1.25
//! 3e-7 0
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! reading back is bit-exact (including `NaN`, `inf` and `-0`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::{Family, ParamSet};

const MAGIC: &str = "gsntk-arrays 1";

pub fn write_arrays<W: Write>(w: &mut W, arrays: &[(String, DMatrix<f64>)]) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    for (name, m) in arrays {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("array name {name:?}")));
        }
        writeln!(w, "array {name} {} {}", m.nrows(), m.ncols())?;
        for r in 0..m.nrows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_arrays<R: BufRead>(r: R) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let bad = |line: usize, message: String| Error::Parse { line, message };
    let header = lines.next().map(|(_, l)| l).transpose()?;
    if header.as_deref().map(str::trim_end) != Some(MAGIC) {
        return Err(bad(1, format!("expected header '{MAGIC}'")));
    }
    let mut out = Vec::new();
    while let Some((n, l)) = lines.next() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let head: Vec<&str> = l.split_whitespace().collect();
        let (name, rows, cols) = match head.as_slice() {
            ["array", name, rows, cols] => (
                name.to_string(),
                rows.parse::<usize>().map_err(|e| bad(n, format!("rows: {e}")))?,
                cols.parse::<usize>().map_err(|e| bad(n, format!("cols: {e}")))?,
            ),
            _ => return Err(bad(n, "expected 'array <name> <rows> <cols>'".into())),
        };
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let (n, l) = lines.next().ok_or_else(|| bad(n + r + 1, format!("array {name} ends early")))?;
            let l = l?;
            let vals: Vec<&str> = l.split_whitespace().collect();
            if vals.len() != cols {
                return Err(bad(n, format!("{} values for {cols} columns", vals.len())));
            }
            for (c, v) in vals.iter().enumerate() {
                m[(r, c)] = v.parse().map_err(|e| bad(n, format!("value {v:?}: {e}")))?;
            }
        }
        out.push((name, m));
    }
    Ok(out)
}

/// One array per family, named by the family.
pub fn params_to_arrays(p: &ParamSet) -> Vec<(String, DMatrix<f64>)> {
    p.iter().map(|(f, m)| (f.to_string(), m.clone())).collect()
}

pub fn params_from_arrays(arrays: Vec<(String, DMatrix<f64>)>) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, m) in arrays {
        let f: Family = name.parse()?;
        if p.get(f).is_some() {
            return Err(Error::InvalidArgument(format!("family {f} appears twice")));
        }
        p.insert(f, m);
    }
    Ok(p)
}

pub fn save_params(path: &Path, p: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_arrays(&mut w, &params_to_arrays(p))?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    params_from_arrays(read_arrays(BufReader::new(File::open(path)?))?)
}
