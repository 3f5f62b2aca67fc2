//! Plain-text tensor dump used by golden tests.
//!
//! ```text
//! shape: 2 3
//! 1.0000000000000000e0
//! ...
//! ```
//! One value per line, 17 significant digits.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub fn dump_tensor<T: Scalar>(t: &Tensor<T>) -> String {
    let mut out = String::from("shape:");
    for d in t.shape() {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    for v in t.data() {
        writeln!(out, "{:.16e}", v.as_f64()).unwrap();
    }
    out
}

pub fn parse_tensor_dump<T: Scalar>(text: &str) -> Result<Tensor<T>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("shape:"))
        .ok_or_else(|| Error::Data("tensor dump must start with `shape:`".into()))?;
    let shape = header
        .split_whitespace()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("bad extent `{s}` in dump header: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map(T::lit)
                .map_err(|e| Error::Data(format!("bad value `{l}` in dump: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&shape, data)
}
