//! JSON manifest + little-endian blob container shared by models and
//! calibration/sample files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ApplicationGraph, DType, GraphError, Node, NodeKind, Result, TensorSpec};

const FORMAT: &str = "neuroflow-manifest";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    format: String,
    version: u32,
    blob: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<NodeEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_exp: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u32>,
    kind: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default)]
    attrs: NodeAttrs,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct NodeAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    in_exps: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_exp: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
}

/// Named tensors with payloads, e.g. a calibration or validation sample file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub tensors: BTreeMap<String, TensorSpec>,
    pub data: BTreeMap<String, Vec<u8>>,
    pub metadata: serde_json::Value,
}

impl TensorBundle {
    pub fn insert(&mut self, spec: TensorSpec, payload: Vec<u8>) {
        self.data.insert(spec.name.clone(), payload);
        self.tensors.insert(spec.name.clone(), spec);
    }

    pub fn get(&self, name: &str) -> Result<(&TensorSpec, &[u8])> {
        let spec = self.tensors.get(name).ok_or_else(|| GraphError::UnknownTensor(name.to_string()))?;
        let data = self.data.get(name).ok_or_else(|| GraphError::UnknownTensor(name.to_string()))?;
        Ok((spec, data))
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn pack(
    tensors: &BTreeMap<String, TensorSpec>,
    data: &BTreeMap<String, Vec<u8>>,
) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let entries = tensors
        .values()
        .map(|t| {
            let (offset, length) = match data.get(&t.name) {
                Some(bytes) => {
                    let off = blob.len();
                    blob.extend_from_slice(bytes);
                    (Some(off), Some(bytes.len()))
                }
                None => (None, None),
            };
            TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype,
                scale_exp: t.scale_exp,
                offset,
                length,
            }
        })
        .collect();
    (entries, blob)
}

fn unpack(entries: Vec<TensorEntry>, blob: &[u8]) -> Result<(BTreeMap<String, TensorSpec>, BTreeMap<String, Vec<u8>>)> {
    let mut tensors = BTreeMap::new();
    let mut data = BTreeMap::new();
    for e in entries {
        let spec = TensorSpec::new(e.name.clone(), e.shape, e.dtype, e.scale_exp);
        match (e.offset, e.length) {
            (Some(off), Some(len)) => {
                let end = off.checked_add(len).filter(|&end| end <= blob.len()).ok_or_else(|| {
                    GraphError::Manifest(format!("tensor `{}` spans past the end of the blob", e.name))
                })?;
                if len != spec.byte_len() {
                    return Err(GraphError::Manifest(format!(
                        "tensor `{}` has {len} payload bytes, shape needs {}",
                        e.name,
                        spec.byte_len()
                    )));
                }
                data.insert(e.name.clone(), blob[off..end].to_vec());
            }
            (None, None) => {}
            _ => return Err(GraphError::Manifest(format!("tensor `{}` needs both offset and length", e.name))),
        }
        if tensors.insert(e.name.clone(), spec).is_some() {
            return Err(GraphError::Manifest(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok((tensors, data))
}

fn write_doc(path: &Path, doc: &ManifestDoc, blob: &[u8]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(doc)? + "\n")?;
    fs::write(blob_path(path), blob)?;
    Ok(())
}

fn read_doc(path: &Path) -> Result<(ManifestDoc, Vec<u8>)> {
    let doc: ManifestDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.format != FORMAT {
        return Err(GraphError::Manifest(format!("unexpected format `{}`", doc.format)));
    }
    if doc.version != VERSION {
        return Err(GraphError::Manifest(format!("unsupported version {}", doc.version)));
    }
    let blob_file = path.parent().unwrap_or_else(|| Path::new(".")).join(&doc.blob);
    let blob = fs::read(&blob_file)?;
    Ok((doc, blob))
}

/// Writes `graph` as `path` (JSON) plus a sibling `.bin` blob.
pub fn write_model(graph: &ApplicationGraph, path: &Path, metadata: serde_json::Value) -> Result<()> {
    let (tensors, blob) = pack(&graph.tensors, &graph.constants);
    let nodes = graph
        .nodes
        .iter()
        .map(|n| NodeEntry {
            id: Some(n.id),
            kind: n.kind.name().to_string(),
            inputs: n.inputs.clone(),
            outputs: n.outputs.clone(),
            attrs: NodeAttrs {
                weight: n.weight.clone(),
                bias: n.bias.clone(),
                in_exps: n.in_exps.clone(),
                out_exp: (n.out_exp != 0).then_some(n.out_exp),
                scale: n.scale,
            },
        })
        .collect();
    let doc = ManifestDoc {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob_file_name(path),
        metadata,
        tensors,
        nodes,
        inputs: graph.graph_inputs.clone(),
        outputs: graph.graph_outputs.clone(),
    };
    write_doc(path, &doc, &blob)
}

/// Loads a model manifest. Nodes without an explicit id get their position.
pub fn read_model(path: &Path) -> Result<ApplicationGraph> {
    let (doc, blob) = read_doc(path)?;
    let (tensors, constants) = unpack(doc.tensors, &blob)?;
    let nodes = doc
        .nodes
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let kind = NodeKind::parse(&e.kind)?;
            Ok(Node {
                id: e.id.unwrap_or(i as u32),
                kind,
                inputs: e.inputs,
                outputs: e.outputs,
                weight: e.attrs.weight,
                bias: e.attrs.bias,
                in_exps: e.attrs.in_exps,
                out_exp: e.attrs.out_exp.unwrap_or(0),
                relu_fused: kind == NodeKind::LinearRelu,
                scale: e.attrs.scale,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ApplicationGraph { nodes, tensors, constants, graph_inputs: doc.inputs, graph_outputs: doc.outputs })
}

pub fn write_bundle(bundle: &TensorBundle, path: &Path) -> Result<()> {
    let (tensors, blob) = pack(&bundle.tensors, &bundle.data);
    let doc = ManifestDoc {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob_file_name(path),
        metadata: bundle.metadata.clone(),
        tensors,
        nodes: Vec::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    write_doc(path, &doc, &blob)
}

pub fn read_bundle(path: &Path) -> Result<TensorBundle> {
    let (doc, blob) = read_doc(path)?;
    let metadata = doc.metadata;
    let (tensors, data) = unpack(doc.tensors, &blob)?;
    Ok(TensorBundle { tensors, data, metadata })
}

fn blob_file_name(path: &Path) -> String {
    blob_path(path).file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model.bin".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trips_through_files() {
        let mut g = ApplicationGraph::default();
        g.add_tensor(TensorSpec::f32("x", vec![2]));
        g.add_tensor(TensorSpec::f32("y", vec![3]));
        g.add_constant_f32("w", vec![3, 2], &[1.0, -2.0, 0.5, 0.25, 3.0, -1.0]);
        g.add_constant_f32("b", vec![3], &[0.1, 0.2, 0.3]);
        g.nodes.push(Node::linear(0, "x", "y", "w", Some("b")));
        g.graph_inputs.push("x".into());
        g.graph_outputs.push("y".into());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_model(&g, &path, serde_json::Value::Null).unwrap();
        assert!(dir.path().join("m.bin").exists());
        assert_eq!(read_model(&path).unwrap(), g);
    }

    #[test]
    fn unknown_kind_surfaces_unsupported_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(dir.path().join("m.bin"), []).unwrap();
        fs::write(
            &path,
            r#"{"format":"neuroflow-manifest","version":1,"blob":"m.bin",
                "tensors":[{"name":"x","shape":[4],"dtype":"float32"},{"name":"y","shape":[4],"dtype":"float32"}],
                "nodes":[{"kind":"Conv","inputs":["x"],"outputs":["y"]}],"inputs":["x"],"outputs":["y"]}"#,
        )
        .unwrap();
        assert!(matches!(read_model(&path), Err(GraphError::UnsupportedLayer(k)) if k == "Conv"));
    }

    #[test]
    fn payload_length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(dir.path().join("m.bin"), [0u8; 8]).unwrap();
        fs::write(
            &path,
            r#"{"format":"neuroflow-manifest","version":1,"blob":"m.bin",
                "tensors":[{"name":"w","shape":[3],"dtype":"float32","offset":0,"length":8}]}"#,
        )
        .unwrap();
        assert!(matches!(read_bundle(&path), Err(GraphError::Manifest(_))));
    }
}
