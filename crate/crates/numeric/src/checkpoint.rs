//! Versioned plain-text tensor archive.
//!
//! ```text
//! shape-checkpoint 1
//! meta <key> <value>
//! tensor <name> <rank> <dims...>
//! <values, 17 significant digits, space separated>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::NumericError;
use crate::tensor::Tensor;

const MAGIC: &str = "shape-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn err(line: usize, msg: impl std::fmt::Display) -> NumericError {
    NumericError::Checkpoint(format!("line {line}: {msg}"))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = write!(s, "tensor {name} {}", t.shape().len());
            for d in t.shape() {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            let vals: Vec<String> = t.data().iter().map(|x| format!("{x:.16e}")).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, NumericError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint"))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(MAGIC) {
            return Err(err(1, "missing header"));
        }
        let version: u32 = hp.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(1, "bad version"))?;
        if version != FORMAT_VERSION {
            return Err(err(1, format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        while let Some((ln, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| err(ln, "meta without key"))?;
                    let value: Vec<&str> = parts.collect();
                    ck.push_meta(key, value.join(" "));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| err(ln, "tensor without name"))?;
                    let rank: usize =
                        parts.next().and_then(|r| r.parse().ok()).ok_or_else(|| err(ln, "bad rank"))?;
                    let dims: Vec<usize> = parts
                        .map(|d| d.parse().map_err(|_| err(ln, format!("bad dim {d}"))))
                        .collect::<Result<_, _>>()?;
                    if dims.len() != rank {
                        return Err(err(ln, "rank does not match dims"));
                    }
                    let n: usize = dims.iter().product();
                    let (vln, vline) = lines.next().ok_or_else(|| err(ln + 1, "missing values"))?;
                    let vals: Vec<f64> = vline
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| err(vln, format!("bad value {v}"))))
                        .collect::<Result<_, _>>()?;
                    if vals.len() != n {
                        return Err(err(vln, format!("expected {n} values, found {}", vals.len())));
                    }
                    ck.push(name, Tensor::new(dims, vals)?);
                }
                Some(other) => return Err(err(ln, format!("unknown record {other}"))),
                None => {}
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericError> {
        std::fs::write(path, self.to_text()).map_err(|e| NumericError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NumericError> {
        let text = std::fs::read_to_string(path).map_err(|e| NumericError::Checkpoint(e.to_string()))?;
        Self::from_text(&text)
    }
}
