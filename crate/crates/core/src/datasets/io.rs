//! JSON dump/load of federated datasets.
//!
//! ```json
//! {"input_dim": 1, "output_dim": 1, "heldout_ids": [2, 3],
//!  "clients": [{"id": 0, "train": {"x": [[...]], "y": [[...]]},
//!               "personalize": {...}, "eval": {...}}]}
//! ```
//!
//! Reals are written in scientific notation with 17 significant digits so that
//! every `f64` survives a round trip bit-for-bit. `heldout_ids` is optional on
//! read; clients not listed there are train clients.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;

use super::{ClientDataset, FederatedDataset};
use crate::error::{FedError, Result};
use crate::nn::{Batch, Matrix};

fn push_real(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn push_matrix(out: &mut String, m: &Matrix) {
    out.push('[');
    for (i, row) in m.iter_rows().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, &v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_real(out, v);
        }
        out.push(']');
    }
    out.push(']');
}

fn push_batch(out: &mut String, name: &str, b: &Batch) {
    write!(out, "\"{name}\":{{\"x\":").expect("write to string");
    push_matrix(out, &b.inputs);
    out.push_str(",\"y\":");
    push_matrix(out, &b.targets);
    out.push('}');
}

fn push_client(out: &mut String, c: &ClientDataset) {
    write!(out, "{{\"id\":{},", c.client_id).expect("write to string");
    push_batch(out, "train", &c.train);
    out.push(',');
    push_batch(out, "personalize", &c.personalize);
    out.push(',');
    push_batch(out, "eval", &c.eval);
    out.push('}');
}

pub fn write_dataset<W: Write>(ds: &FederatedDataset, mut writer: W) -> Result<()> {
    let mut out = String::new();
    write!(
        out,
        "{{\"input_dim\":{},\"output_dim\":{},\"heldout_ids\":[",
        ds.input_dim, ds.output_dim
    )
    .expect("write to string");
    for (i, c) in ds.heldout_clients.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{}", c.client_id).expect("write to string");
    }
    out.push_str("],\"clients\":[\n");
    for (i, c) in ds.train_clients.iter().chain(&ds.heldout_clients).enumerate() {
        if i > 0 {
            out.push_str(",\n");
        }
        push_client(&mut out, c);
    }
    out.push_str("\n]}\n");
    writer.write_all(out.as_bytes())?;
    Ok(())
}

pub fn write_dataset_file(ds: &FederatedDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

#[derive(Deserialize)]
struct RawBatch {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawClient {
    id: usize,
    train: RawBatch,
    personalize: RawBatch,
    eval: RawBatch,
}

#[derive(Deserialize)]
struct RawDataset {
    clients: Vec<RawClient>,
    input_dim: usize,
    output_dim: usize,
    #[serde(default)]
    heldout_ids: Vec<usize>,
}

fn to_batch(raw: RawBatch, d_in: usize, d_out: usize) -> Result<Batch> {
    Batch::new(Matrix::from_rows(&raw.x, d_in)?, Matrix::from_rows(&raw.y, d_out)?)
}

pub fn read_dataset<R: Read>(reader: R) -> Result<FederatedDataset> {
    let raw: RawDataset = serde_json::from_reader(reader)?;
    let (d_in, d_out) = (raw.input_dim, raw.output_dim);
    let mut train_clients = Vec::new();
    let mut heldout_clients = Vec::new();
    for c in raw.clients {
        let client = ClientDataset {
            client_id: c.id,
            train: to_batch(c.train, d_in, d_out)?,
            personalize: to_batch(c.personalize, d_in, d_out)?,
            eval: to_batch(c.eval, d_in, d_out)?,
        };
        if raw.heldout_ids.contains(&c.id) {
            heldout_clients.push(client);
        } else {
            train_clients.push(client);
        }
    }
    let ds = FederatedDataset {
        train_clients,
        heldout_clients,
        input_dim: d_in,
        output_dim: d_out,
    };
    ds.validate()?;
    if let Some(bad) = ds
        .train_clients
        .iter()
        .chain(&ds.heldout_clients)
        .flat_map(|c| [&c.train, &c.personalize, &c.eval])
        .find(|b| b.inputs.data().iter().chain(b.targets.data()).any(|v| !v.is_finite()))
    {
        return Err(FedError::NonFinite(format!("dataset split with {} rows", bad.len())));
    }
    Ok(ds)
}

pub fn read_dataset_file(path: &Path) -> Result<FederatedDataset> {
    read_dataset(std::io::BufReader::new(fs::File::open(path)?))
}
