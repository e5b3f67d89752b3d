//! Plain-text dump of final client models.
//!
//! ```text
//! fedgraph-snapshot v1
//! round <t>
//! clients <n>
//! client <index> <user_id> <tensor count>
//! tensor <name> <rows> <cols>
//! <one line per row, space separated, shortest round-trip decimals>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so
//! reading a snapshot back gives bit-identical tensors.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ClientModelParams;

pub const MAGIC: &str = "fedgraph-snapshot v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSnapshot {
    pub index: usize,
    pub user_id: u32,
    pub tensors: Vec<(String, Matrix)>,
}

pub fn write_snapshot<W: Write>(
    out: &mut W,
    round: usize,
    clients: &[ClientModelParams],
    user_ids: &[u32],
) -> Result<()> {
    if clients.len() != user_ids.len() {
        return Err(Error::Snapshot(format!("{} clients but {} user ids", clients.len(), user_ids.len())));
    }
    let io = |e| Error::io("writing snapshot", e);
    writeln!(out, "{MAGIC}\nround {round}\nclients {}", clients.len()).map_err(io)?;
    for (idx, (params, uid)) in clients.iter().zip(user_ids).enumerate() {
        let tensors = params.tensors();
        writeln!(out, "client {idx} {uid} {}", tensors.len()).map_err(io)?;
        for (name, m) in tensors {
            writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).map_err(io)?;
            for r in 0..m.rows() {
                let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" ")).map_err(io)?;
            }
        }
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    number: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.number += 1;
        match self.inner.next() {
            Some(line) => line.map_err(|e| Error::io("reading snapshot", e)),
            None => Err(Error::Snapshot(format!("unexpected end of file at line {}", self.number))),
        }
    }

    fn fields(&mut self, tag: &str, count: usize) -> Result<Vec<String>> {
        let line = self.next()?;
        let parts: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if parts.first().map(String::as_str) != Some(tag) || parts.len() != count + 1 {
            return Err(Error::Snapshot(format!("line {}: expected `{tag}` with {count} fields", self.number)));
        }
        Ok(parts[1..].to_vec())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse()
            .map_err(|_| Error::Snapshot(format!("line {}: bad number `{s}`", self.number)))
    }
}

/// Returns the round and every client's named tensors.
pub fn read_snapshot<R: BufRead>(input: R) -> Result<(usize, Vec<ClientSnapshot>)> {
    let mut lines = Lines {
        inner: input.lines(),
        number: 0,
    };
    if lines.next()? != MAGIC {
        return Err(Error::Snapshot("missing header".into()));
    }
    let round = lines.fields("round", 1)?;
    let round = lines.parse(&round[0])?;
    let count = lines.fields("clients", 1)?;
    let count: usize = lines.parse(&count[0])?;
    let mut clients = Vec::with_capacity(count);
    for _ in 0..count {
        let head = lines.fields("client", 3)?;
        let index = lines.parse(&head[0])?;
        let user_id = lines.parse(&head[1])?;
        let n_tensors: usize = lines.parse(&head[2])?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let t = lines.fields("tensor", 3)?;
            let rows: usize = lines.parse(&t[1])?;
            let cols: usize = lines.parse(&t[2])?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines.next()?;
                let row = line
                    .split_whitespace()
                    .map(|v| lines.parse::<f64>(v))
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != cols {
                    return Err(Error::Snapshot(format!("line {}: expected {cols} values", lines.number)));
                }
                data.extend(row);
            }
            tensors.push((t[0].clone(), Matrix::from_vec(rows, cols, data)?));
        }
        clients.push(ClientSnapshot {
            index,
            user_id,
            tensors,
        });
    }
    Ok((round, clients))
}
