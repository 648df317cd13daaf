//! Plain-text tensor records: a `name dim0 dim1 ...` line followed by one
//! line of space-separated values. `f64` values are written in their
//! shortest round-trip form, so a write/read cycle is lossless.

use std::io::{BufRead, Write};

use super::{AutodiffError, Tensor};

pub fn write_tensor<W: Write>(out: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    write!(out, "{name}")?;
    for d in t.shape() {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    let mut first = true;
    for v in t.data() {
        if !first {
            out.write_all(b" ")?;
        }
        first = false;
        write!(out, "{v}")?;
    }
    writeln!(out)
}

/// Streaming reader over tensor records.
pub struct TensorReader<R> {
    lines: std::io::Lines<R>,
}

impl<R: BufRead> TensorReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
        }
    }

    pub fn next_tensor(&mut self) -> Result<Option<(String, Tensor)>, AutodiffError> {
        let header = loop {
            match self.lines.next() {
                None => return Ok(None),
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
            }
        };
        let mut parts = header.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let fail = |reason: String| AutodiffError::Format {
            name: name.clone(),
            reason,
        };
        let shape = parts
            .map(|d| d.parse::<usize>().map_err(|e| fail(format!("bad dimension `{d}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let values = match self.lines.next() {
            Some(line) => line?,
            None => return Err(fail("missing value line".into())),
        };
        let data = values
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| fail(format!("bad value `{v}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(fail(format!("expected {expected} values, found {}", data.len())));
        }
        Ok(Some((name, Tensor::new(shape, data)?)))
    }
}

/// Read every record until end of input.
pub fn read_tensors<R: BufRead>(reader: R) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut r = TensorReader::new(reader);
    let mut out = Vec::new();
    while let Some(t) = r.next_tensor()? {
        out.push(t);
    }
    Ok(out)
}
