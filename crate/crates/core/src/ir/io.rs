//! JSON graph files and the binary `DLIW` weight container.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{validate_graph, DType, Graph, Node, Tensor, TensorSpec};

const FORMAT_VERSION: u32 = 1;
const CONTAINER_MAGIC: &[u8; 4] = b"DLIW";
const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    version: u32,
    tensors: Vec<TensorSpec>,
    weights: Vec<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    nodes: Vec<Node>,
}

/// Parses a graph from JSON text. `origin` is only used in error messages.
/// The graph is returned unvalidated.
pub fn parse_model(text: &str, origin: &Path) -> Result<Graph> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    if file.version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            column: 1,
            msg: format!("unsupported graph version {}", file.version),
        });
    }
    let mut g = Graph::new();
    for spec in file.tensors {
        g.add_tensor(spec);
    }
    g.weights = file.weights;
    g.inputs = file.inputs;
    g.outputs = file.outputs;
    g.nodes = file.nodes;
    Ok(g)
}

/// Canonical JSON rendering: fixed field order, two-space indent, trailing newline.
pub fn to_canonical_json(g: &Graph) -> String {
    let file = GraphFile {
        version: FORMAT_VERSION,
        tensors: g.tensors.clone(),
        weights: g.weights.clone(),
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        nodes: g.nodes.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("graph serialization cannot fail");
    s.push('\n');
    s
}

fn sibling_weights_path(path: &Path) -> PathBuf {
    path.with_extension("dliw")
}

/// Loads and validates a graph file. Weights are attached from a sibling
/// `<stem>.dliw` container when one exists.
pub fn load_model(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let sibling = sibling_weights_path(path);
    let weights = sibling.is_file().then_some(sibling);
    load_model_with_weights(path, weights.as_deref())
}

pub fn load_model_with_weights(path: impl AsRef<Path>, weights: Option<&Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut g = parse_model(&text, path)?;
    if let Some(wpath) = weights {
        for (name, t) in load_weights(wpath)? {
            g.attach_weight(name, t);
        }
    }
    let diags = validate_graph(&g);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    Ok(g)
}

/// Writes the canonical JSON and, when weight data is attached, a sibling
/// `<stem>.dliw` container.
pub fn save_model(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_canonical_json(g)).map_err(|e| Error::io(path, e))?;
    if !g.weight_data.is_empty() {
        save_weights(sibling_weights_path(path), g.weight_data_map())?;
    }
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_container(&bytes)
}

pub fn save_weights(path: impl AsRef<Path>, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_container(entries.iter().map(|(k, v)| (k.as_str(), v)))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_container<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Container(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(t.dims().len())
            .map_err(|_| Error::Container(format!("too many dims for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(ndim);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Container(format!("truncated at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CONTAINER_MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
            .to_string();
        let code = cur.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Container(format!("unknown dtype code {code} for {name}")))?;
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Container(format!("size overflow for {name}")))?;
        let raw = cur.take(numel)?;
        entries.push((name, Tensor::from_le_bytes(dtype, dims, raw)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{OpType, TensorData};

    fn single_fc_json() -> &'static str {
        r#"{
  "version": 1,
  "tensors": [
    {"name": "x", "dims": [10, 512], "dtype": "f32"},
    {"name": "w", "dims": [512, 512], "dtype": "f32"},
    {"name": "y", "dims": [], "dtype": "f32"}
  ],
  "weights": ["w"],
  "inputs": ["x"],
  "outputs": ["y"],
  "nodes": [
    {"name": "fc", "op": "FC", "inputs": ["x", "w"], "outputs": ["y"], "attrs": {}}
  ]
}"#
    }

    #[test]
    fn parses_single_fc() {
        let g = parse_model(single_fc_json(), Path::new("fc.json")).unwrap();
        assert_eq!(g.nodes().len(), 1);
        assert_eq!(g.tensors().len(), 3);
        assert_eq!(g.nodes()[0].op, OpType::FC);
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn unknown_op_is_a_parse_error_with_position() {
        let text = single_fc_json().replace("\"FC\"", "\"Frobnicate\"");
        let err = parse_model(&text, Path::new("bad.json")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 12);
                assert!(msg.contains("Frobnicate"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let err = parse_model("{\"version\": 1,", Path::new("x.json")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn dangling_reference_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        let text = single_fc_json().replace("[\"x\", \"w\"]", "[\"x9\", \"w\"]");
        fs::write(&p, text).unwrap();
        let err = load_model(&p).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("x9"), "{msg}");
    }

    #[test]
    fn canonical_json_is_stable() {
        let g = parse_model(single_fc_json(), Path::new("fc.json")).unwrap();
        let a = to_canonical_json(&g);
        let g2 = parse_model(&a, Path::new("fc.json")).unwrap();
        assert_eq!(a, to_canonical_json(&g2));
        assert_eq!(g, g2);
    }

    #[test]
    fn container_layout_is_bit_exact() {
        let t = Tensor::new(vec![2], TensorData::I32(vec![1, -2])).unwrap();
        let bytes = write_container([("ab", &t)]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"DLIW");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(4);
        expected.push(1);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1i32.to_le_bytes());
        expected.extend_from_slice(&(-2i32).to_le_bytes());
        assert_eq!(bytes, expected);
        let back = read_container(&bytes).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn container_rejects_truncation_and_bad_magic() {
        let t = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = write_container([("w", &t)]).unwrap();
        assert!(read_container(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_container(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(read_container(&extra).is_err());
    }

    #[test]
    fn save_and_load_with_sibling_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = parse_model(single_fc_json(), Path::new("fc.json")).unwrap();
        g.attach_weight(
            "w",
            Tensor::from_f32(vec![512, 512], vec![0.5; 512 * 512]).unwrap(),
        );
        let p = dir.path().join("fc.json");
        save_model(&g, &p).unwrap();
        assert!(dir.path().join("fc.dliw").is_file());
        let back = load_model(&p).unwrap();
        assert_eq!(back, g);
    }
}
