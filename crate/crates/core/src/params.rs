//! Named real arrays with declared shapes, stored as text.
//!
//! ```text
//! # comment
//! tensor ssm.a 4
//! -1 -1 -1 -1
//! tensor fuse.weight 4x4
//! 1 0 0 0
//! ...
//! ```
//!
//! A `tensor <name> <shape>` header is followed by the row-major values,
//! whitespace separated, over any number of lines. Shapes are `x`-joined
//! positive integers. Values are written in shortest round-trip form, so a
//! write/read cycle is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.insert(name.to_string(), (shape, values));
    }

    pub fn insert_vector(&mut self, name: &str, values: &[f64]) {
        self.insert(name, vec![values.len()], values.to_vec());
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Array2<f64>) {
        let (r, c) = m.dim();
        self.insert(name, vec![r, c], m.iter().copied().collect());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, values) = self.get(name)?;
        if shape.len() != 1 {
            return Err(Error::config(format!("`{name}` is not a vector")));
        }
        Ok(values.clone())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (_, values) = self.get(name)?;
        match values.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::config(format!("`{name}` is not a scalar"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, values) = self.get(name)?;
        match shape.as_slice() {
            [r, c] => Ok(Array2::from_shape_vec((*r, *c), values.clone())
                .expect("shape checked on insert")),
            _ => Err(Error::config(format!("`{name}` is not a matrix"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, (shape, values)) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join("x"));
            let row = shape.last().copied().unwrap_or(1).max(1);
            for chunk in values.chunks(row) {
                let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut current: Option<(String, Vec<usize>, Vec<f64>, usize)> = None;

        let finish = |store: &mut ParamStore,
                      cur: Option<(String, Vec<usize>, Vec<f64>, usize)>|
         -> Result<()> {
            if let Some((name, shape, values, line)) = cur {
                let expected: usize = shape.iter().product();
                if values.len() != expected {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "`{name}` declares {expected} values but has {}",
                            values.len()
                        ),
                    });
                }
                store.insert(&name, shape, values);
            }
            Ok(())
        };

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                finish(&mut store, current.take())?;
                let mut parts = rest.split_whitespace();
                let (Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next())
                else {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "expected `tensor <name> <shape>`".into(),
                    });
                };
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Parse {
                        line: lineno,
                        message: format!("bad shape `{shape}`"),
                    })?;
                current = Some((name.to_string(), shape, Vec::new(), lineno));
            } else {
                let Some((_, _, values, _)) = current.as_mut() else {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "values before any tensor header".into(),
                    });
                };
                for tok in line.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("bad number `{tok}`"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!("non-finite value `{tok}`"),
                        });
                    }
                    values.push(v);
                }
            }
        }
        finish(&mut store, current)?;
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn text_round_trip_is_exact() {
        let mut s = ParamStore::new();
        s.insert_matrix("w", &array![[0.1, -2.5e-17], [1.0 / 3.0, 7.0]]);
        s.insert_vector("b", &[std::f64::consts::PI]);
        let back = ParamStore::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.matrix("w").unwrap()[(1, 0)], 1.0 / 3.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ParamStore::parse("tensor a 2\n1.0 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = ParamStore::parse("tensor a 3\n1 2\ntensor b 1\n1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(ParamStore::parse("1 2 3").is_err());
        assert!(ParamStore::parse("tensor a 0\n").is_err());
    }

    #[test]
    fn missing_parameter_is_config_error() {
        assert!(ParamStore::new().vector("nope").unwrap_err().is_config());
    }
}
