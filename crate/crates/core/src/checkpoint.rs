//! `BMCK1` checkpoints: a magic header followed by named little-endian f32 records.
//!
//! Record layout: name length (u32 LE), UTF-8 name, rank (u32 LE), dims
//! (u32 LE each), payload (f32 LE). Records cover every parameter and
//! batch-norm buffer of the student and the teacher. The experiment config
//! is written next to the checkpoint as `<stem>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::trainer::ModelState;

pub const MAGIC: &[u8; 5] = b"BMCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Snapshot stored beside the binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub iter: usize,
    pub config: ExperimentConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn records_of(prefix: &str, net: &Network<f32>, out: &mut Vec<Record>) {
    for (name, p) in net.param_names().iter().zip(net.params()) {
        out.push(Record {
            name: format!("{prefix}/param/{name}"),
            shape: p.shape().to_vec(),
            data: p.data().to_vec(),
        });
    }
    for (name, bn) in net.bn_names().iter().zip(net.bn_states()) {
        for (buf, v) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
            out.push(Record {
                name: format!("{prefix}/bn/{name}/{buf}"),
                shape: vec![v.len()],
                data: v.clone(),
            });
        }
    }
}

pub fn state_records(state: &ModelState) -> Vec<Record> {
    let mut out = Vec::new();
    records_of("student", &state.student, &mut out);
    records_of("teacher", &state.teacher, &mut out);
    out
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut b = MAGIC.to_vec();
    for r in records {
        b.extend((r.name.len() as u32).to_le_bytes());
        b.extend(r.name.as_bytes());
        b.extend((r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            b.extend((d as u32).to_le_bytes());
        }
        for &v in &r.data {
            b.extend(v.to_le_bytes());
        }
    }
    b
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let err = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if !bytes.starts_with(MAGIC) {
        return Err(err(0, "missing BMCK1 magic".into()));
    }
    let mut pos = MAGIC.len();
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| err(*pos, format!("truncated {what}")))?;
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize, what: &str| -> Result<usize> {
        let s = take(pos, 4, what)?;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize)
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let at = pos;
        let len = u32_at(&mut pos, "name length")?;
        let name = std::str::from_utf8(take(&mut pos, len, "name")?)
            .map_err(|_| err(at + 4, "record name is not UTF-8".into()))?
            .to_string();
        let rank = u32_at(&mut pos, "rank")?;
        if rank > 8 {
            return Err(err(pos - 4, format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| u32_at(&mut pos, "dims"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, n * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Record { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, state: &ModelState, config: &ExperimentConfig) -> Result<()> {
    fs::write(path, encode(&state_records(state))).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&Sidecar {
        iter: state.iter,
        config: config.clone(),
    })
    .expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

fn assign(
    net: &mut Network<f32>,
    prefix: &str,
    records: &mut std::collections::HashMap<String, Record>,
    path: &Path,
) -> Result<()> {
    let mismatch = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let names = net.param_names().to_vec();
    for (name, p) in names.iter().zip(net.params_mut()) {
        let key = format!("{prefix}/param/{name}");
        let r = records
            .remove(&key)
            .ok_or_else(|| mismatch(format!("missing record {key}")))?;
        if r.shape != p.shape() {
            return Err(mismatch(format!(
                "{key}: checkpoint shape {:?}, model expects {:?}",
                r.shape,
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(&r.data);
    }
    let bn_names = net.bn_names().to_vec();
    for (name, bn) in bn_names.iter().zip(net.bn_states_mut()) {
        for (buf, v) in [
            ("running_mean", &mut bn.running_mean),
            ("running_var", &mut bn.running_var),
        ] {
            let key = format!("{prefix}/bn/{name}/{buf}");
            let r = records
                .remove(&key)
                .ok_or_else(|| mismatch(format!("missing record {key}")))?;
            if r.shape != [v.len()] {
                return Err(mismatch(format!(
                    "{key}: checkpoint shape {:?}, model expects [{}]",
                    r.shape,
                    v.len()
                )));
            }
            v.copy_from_slice(&r.data);
        }
    }
    Ok(())
}

/// Rebuild the state described by the sidecar config and fill it from the records.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Sidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: side.clone(),
        source: e,
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode(&bytes, path)?;
    let mut state = ModelState::new(&sidecar.config.model, 0)?;
    let mut map: std::collections::HashMap<String, Record> = records.into_iter().map(|r| (r.name.clone(), r)).collect();
    assign(&mut state.student, "student", &mut map, path)?;
    assign(&mut state.teacher, "teacher", &mut map, path)?;
    if let Some(extra) = map.keys().min() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("record {extra} does not belong to the configured model"),
        });
    }
    state.iter = sidecar.iter;
    Ok((state, sidecar))
}
