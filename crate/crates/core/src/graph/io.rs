//! Plain-text network format.
//!
//! ```text
//! n 3
//! alpha 5.0000000000000000e-1
//! P
//! <n rows of n values>
//! lambda <n values>
//! eta0 <n values>
//! sigma <n values>
//! clusters <n labels> | clusters none
//! ```
//! Lines starting with `#` are ignored. Floats are written with 17
//! significant digits so a save/load cycle is bit-exact.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use super::SocialNetwork;
use crate::error::{Error, Result};

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

pub fn write_network<W: Write>(net: &SocialNetwork, mut out: W) -> Result<()> {
    let n = net.n();
    writeln!(out, "n {n}")?;
    writeln!(out, "alpha {:.16e}", net.alpha())?;
    writeln!(out, "P")?;
    for i in 0..n {
        writeln!(out, "{}", join(net.influence().row(i).iter().copied()))?;
    }
    writeln!(out, "lambda {}", join(net.lambda().iter().copied()))?;
    writeln!(out, "eta0 {}", join(net.eta0().iter().copied()))?;
    writeln!(out, "sigma {}", join(net.sigma().iter().copied()))?;
    match net.clusters() {
        Some(c) => {
            let labels: Vec<String> = c.iter().map(|l| l.to_string()).collect();
            writeln!(out, "clusters {}", labels.join(" "))?;
        }
        None => writeln!(out, "clusters none")?,
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    number: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        loop {
            self.number += 1;
            let line = self
                .inner
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of file at line {}", self.number)))??;
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Ok(trimmed.to_string());
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?;
        let rest = line
            .strip_prefix(key)
            .filter(|r| r.is_empty() || r.starts_with(char::is_whitespace))
            .ok_or_else(|| Error::Parse(format!("line {}: expected '{key}'", self.number)))?;
        Ok(rest.trim().to_string())
    }

    fn floats(&self, text: &str, expected: usize) -> Result<Vec<f64>> {
        let values = text
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: '{tok}': {e}", self.number))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != expected {
            return Err(Error::Parse(format!(
                "line {}: expected {expected} values, found {}",
                self.number,
                values.len()
            )));
        }
        Ok(values)
    }
}

pub fn read_network<R: BufRead>(input: R) -> Result<SocialNetwork> {
    let mut lines = Lines { inner: input.lines(), number: 0 };
    let n_text = lines.keyed("n")?;
    let n: usize =
        n_text.parse().map_err(|e| Error::Parse(format!("line {}: node count '{n_text}': {e}", lines.number)))?;
    let alpha_text = lines.keyed("alpha")?;
    let alpha = lines.floats(&alpha_text, 1)?[0];
    lines.keyed("P")?;
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let row = lines.next_line()?;
        for (j, x) in lines.floats(&row, n)?.into_iter().enumerate() {
            p[(i, j)] = x;
        }
    }
    let mut vector = |key: &str| -> Result<DVector<f64>> {
        let text = lines.keyed(key)?;
        Ok(DVector::from_vec(lines.floats(&text, n)?))
    };
    let lambda = vector("lambda")?;
    let eta0 = vector("eta0")?;
    let sigma = vector("sigma")?;
    let net = SocialNetwork::new(p, lambda, alpha, eta0, sigma)?;
    let clusters = lines.keyed("clusters")?;
    if clusters == "none" {
        return Ok(net);
    }
    let labels = clusters
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|e| Error::Parse(format!("line {}: cluster '{tok}': {e}", lines.number)))
        })
        .collect::<Result<Vec<_>>>()?;
    net.with_clusters(labels)
}
