//! On-disk formats.
//!
//! # Dataset container (version 1)
//!
//! All integers little-endian.
//!
//! ```text
//! magic           8 bytes  "FEDSIMDS"
//! version         u32
//! metadata        u64 length + UTF-8 JSON
//! columns         u32 count, then per column:
//!                   u32 name length + name, u32 rank r, r - 1 u64 trailing dims
//! client index    u64 count, then per client:
//!                   u32 id length + id, u64 block offset, u64 num_examples
//! client blocks   per column: u64 element count + count f64 values
//! ```
//!
//! Block offsets are absolute, so a single client can be read after
//! seeking. Every client carries the same column schema.
//!
//! # Parameters
//!
//! JSON mirroring the tree: branches are objects, leaves are
//! `{"shape": [...], "data": [...]}`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use fedsim_core::data::{ClientDataset, ClientId, FederatedData};
use fedsim_core::{ParamTree, Tensor};

use crate::error::{ExpError, Result};

pub const MAGIC: &[u8; 8] = b"FEDSIMDS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
struct ColumnSchema {
    name: String,
    trailing: Vec<usize>,
}

impl ColumnSchema {
    fn row_width(&self) -> usize {
        self.trailing.iter().product()
    }
}

fn schema_of(ds: &ClientDataset) -> Vec<ColumnSchema> {
    ds.columns()
        .map(|(name, t)| ColumnSchema {
            name: name.to_string(),
            trailing: t.shape()[1..].to_vec(),
        })
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serializes `fd` with an optional JSON metadata block.
pub fn encode_federated(fd: &FederatedData, metadata: &Value) -> Result<Vec<u8>> {
    let schema = match fd.iter().next() {
        Some((_, ds)) => schema_of(ds),
        None => Vec::new(),
    };
    for (id, ds) in fd.iter() {
        if schema_of(ds) != schema {
            return Err(ExpError::Format(format!(
                "client `{id}` has a different column schema"
            )));
        }
    }

    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    put_u32(&mut head, VERSION);
    let meta = serde_json::to_vec(metadata)?;
    put_u64(&mut head, meta.len() as u64);
    head.extend_from_slice(&meta);
    put_u32(&mut head, schema.len() as u32);
    for c in &schema {
        put_str(&mut head, &c.name);
        put_u32(&mut head, c.trailing.len() as u32 + 1);
        c.trailing
            .iter()
            .for_each(|&d| put_u64(&mut head, d as u64));
    }
    put_u64(&mut head, fd.num_clients() as u64);

    let index_len: usize = fd.client_ids().map(|id| 4 + id.as_str().len() + 16).sum();
    let mut offset = (head.len() + index_len) as u64;
    let mut index = Vec::with_capacity(index_len);
    let mut blocks = Vec::new();
    for (id, ds) in fd.iter() {
        put_str(&mut index, id.as_str());
        put_u64(&mut index, offset);
        put_u64(&mut index, ds.num_examples() as u64);
        let start = blocks.len();
        for c in &schema {
            let t = ds.column(&c.name).expect("schema checked");
            put_u64(&mut blocks, t.len() as u64);
            t.data()
                .iter()
                .for_each(|v| blocks.extend_from_slice(&v.to_le_bytes()));
        }
        offset += (blocks.len() - start) as u64;
    }
    head.extend_from_slice(&index);
    head.extend_from_slice(&blocks);
    Ok(head)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                ExpError::Format(format!(
                    "truncated file while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| ExpError::Format(format!("{what} overflows usize")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| ExpError::Format(format!("{what} is not UTF-8")))
    }
}

/// Parses a dataset container, returning the data and its metadata.
pub fn decode_federated(buf: &[u8]) -> Result<(FederatedData, Value)> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(ExpError::Format("not a fedsim dataset (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(ExpError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = cur.usize("metadata length")?;
    let metadata: Value = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| ExpError::Format(format!("metadata: {e}")))?;

    let num_columns = cur.u32("column count")? as usize;
    let mut schema = Vec::new();
    for _ in 0..num_columns {
        let name = cur.string("column name")?;
        let rank = cur.u32("column rank")? as usize;
        if rank == 0 {
            return Err(ExpError::Format(format!("column `{name}` has rank 0")));
        }
        let trailing = (1..rank)
            .map(|_| cur.usize("column dims"))
            .collect::<Result<_>>()?;
        schema.push(ColumnSchema { name, trailing });
    }

    let num_clients = cur.usize("client count")?;
    let mut index = Vec::new();
    for _ in 0..num_clients {
        let id = ClientId::new(cur.string("client id")?);
        let offset = cur.usize("client offset")?;
        let n = cur.usize("client size")?;
        index.push((id, offset, n));
    }

    let mut fd = FederatedData::new();
    for (id, offset, n) in index {
        let mut block = Cursor { buf, pos: offset };
        let mut columns = Vec::with_capacity(schema.len());
        for c in &schema {
            let what = format!("column `{}` of client `{id}`", c.name);
            let count = block.usize(&what)?;
            let expected = n.checked_mul(c.row_width());
            if expected != Some(count) {
                return Err(ExpError::Format(format!(
                    "client `{id}`: column `{}` holds {count} values, expected {n} examples x {}",
                    c.name,
                    c.row_width()
                )));
            }
            let bytes = block.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| ExpError::Format(what.clone()))?,
                &what,
            )?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let mut shape = vec![n];
            shape.extend(&c.trailing);
            let t = Tensor::new(shape, data)
                .map_err(|e| ExpError::Format(format!("client `{id}`: {e}")))?;
            columns.push((c.name.clone(), t));
        }
        let ds = ClientDataset::new(columns)
            .map_err(|e| ExpError::Format(format!("client `{id}`: {e}")))?;
        fd.insert(id.clone(), ds)
            .map_err(|_| ExpError::Format(format!("client `{id}` listed twice")))?;
    }
    Ok((fd, metadata))
}

pub fn save_federated(path: &Path, fd: &FederatedData, metadata: &Value) -> Result<()> {
    let bytes = encode_federated(fd, metadata)?;
    let mut f = fs::File::create(path).map_err(|e| ExpError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| ExpError::io(path, e))
}

pub fn load_federated(path: &Path) -> Result<(FederatedData, Value)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| ExpError::io(path, e))?;
    decode_federated(&buf)
}

pub fn params_to_json(p: &ParamTree) -> Value {
    match p {
        ParamTree::Leaf(t) => json!({ "shape": t.shape(), "data": t.data() }),
        ParamTree::Branch(children) => Value::Object(
            children
                .iter()
                .map(|(k, v)| (k.clone(), params_to_json(v)))
                .collect::<Map<_, _>>(),
        ),
    }
}

pub fn params_from_json(v: &Value) -> Result<ParamTree> {
    let obj = v
        .as_object()
        .ok_or_else(|| ExpError::Format("parameter node must be an object".into()))?;
    let is_leaf = obj.len() == 2
        && obj.get("shape").is_some_and(Value::is_array)
        && obj.get("data").is_some_and(Value::is_array);
    if is_leaf {
        let shape: Vec<usize> = serde_json::from_value(obj["shape"].clone())?;
        let data: Vec<f64> = serde_json::from_value(obj["data"].clone())?;
        return Ok(ParamTree::leaf(Tensor::new(shape, data)?));
    }
    let kids = obj
        .iter()
        .map(|(k, v)| Ok((k.clone(), params_from_json(v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamTree::branch(kids)?)
}

pub fn save_params(path: &Path, p: &ParamTree) -> Result<()> {
    let mut s = serde_json::to_string_pretty(&params_to_json(p))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| ExpError::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamTree> {
    let s = fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
    params_from_json(&serde_json::from_str(&s)?)
}
