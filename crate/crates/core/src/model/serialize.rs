//! Single-file binary model container: `"MDL1"` magic, a length-prefixed
//! JSON header, then the tree arrays and importance vectors as embedded
//! tensor records. Writing the same fitted model twice produces identical
//! bytes, and load(save(m)) re-saves byte-identically (the JSON float
//! encoding round-trips f64 exactly).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelKind, Node, Tree, TreeEnsemble};
use crate::error::{Error, Result};
use crate::tensorio::{atomic_write, decode_tensor, encode_tensor, Tensor};

const MAGIC: &[u8; 4] = b"MDL1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    n_features: usize,
    base_prediction: f64,
    learning_rate: f64,
    n_trees_used: usize,
    n_trees_total: usize,
    total_nodes: usize,
    has_val_history: bool,
}

pub fn write_model(out: &mut impl Write, model: &TreeEnsemble) -> Result<()> {
    let total_nodes: usize = model.trees.iter().map(|t| t.nodes.len()).sum();
    let header = Header {
        format_version: MODEL_FORMAT_VERSION,
        kind: model.kind,
        n_features: model.n_features,
        base_prediction: model.base_prediction,
        learning_rate: model.learning_rate,
        n_trees_used: model.n_trees_used,
        n_trees_total: model.trees.len(),
        total_nodes,
        has_val_history: !model.val_rmse_history.is_empty(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let io_err = |e: std::io::Error| Error::Format(format!("model write failed: {e}"));
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    out.write_all(&header_bytes).map_err(io_err)?;

    if !model.trees.is_empty() {
        let sizes: Vec<i32> = model.trees.iter().map(|t| t.nodes.len() as i32).collect();
        let mut features = Vec::with_capacity(total_nodes);
        let mut thresholds = Vec::with_capacity(total_nodes);
        let mut lefts = Vec::with_capacity(total_nodes);
        let mut rights = Vec::with_capacity(total_nodes);
        let mut values = Vec::with_capacity(total_nodes);
        for tree in &model.trees {
            for n in &tree.nodes {
                features.push(n.feature as i32);
                thresholds.push(n.threshold);
                lefts.push(n.left);
                rights.push(n.right);
                values.push(n.value);
            }
        }
        let len = model.trees.len();
        write_block(out, Tensor::i32(vec![len], sizes)?)?;
        write_block(out, Tensor::i32(vec![total_nodes], features)?)?;
        write_block(out, Tensor::f64(vec![total_nodes], thresholds)?)?;
        write_block(out, Tensor::i32(vec![total_nodes], lefts)?)?;
        write_block(out, Tensor::i32(vec![total_nodes], rights)?)?;
        write_block(out, Tensor::f64(vec![total_nodes], values)?)?;
    }
    let counts: Vec<i32> = model
        .split_count
        .iter()
        .map(|&c| i32::try_from(c).map_err(|_| Error::Format("split count overflow".into())))
        .collect::<Result<_>>()?;
    write_block(out, Tensor::i32(vec![model.n_features], counts)?)?;
    write_block(
        out,
        Tensor::f64(vec![model.n_features], model.impurity_reduction.clone())?,
    )?;
    if !model.val_rmse_history.is_empty() {
        write_block(
            out,
            Tensor::f64(
                vec![model.val_rmse_history.len()],
                model.val_rmse_history.clone(),
            )?,
        )?;
    }
    Ok(())
}

fn write_block(out: &mut impl Write, t: Tensor) -> Result<()> {
    encode_tensor(&t, out).map_err(|e| Error::Format(format!("model write failed: {e}")))
}

pub fn read_model(input: &mut impl Read) -> Result<TreeEnsemble> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("model read failed: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad model magic {magic:?}, expected \"MDL1\""
        )));
    }
    let mut len_bytes = [0u8; 8];
    input
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("truncated model header".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("truncated model header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {}",
            header.format_version
        )));
    }

    let mut trees = Vec::with_capacity(header.n_trees_total);
    if header.n_trees_total > 0 {
        let sizes = decode_tensor(input)?;
        let features = decode_tensor(input)?;
        let thresholds = decode_tensor(input)?;
        let lefts = decode_tensor(input)?;
        let rights = decode_tensor(input)?;
        let values = decode_tensor(input)?;
        let sizes = sizes.as_i32()?;
        let features = features.as_i32()?;
        let thresholds = thresholds.as_f64()?;
        let lefts = lefts.as_i32()?;
        let rights = rights.as_i32()?;
        let values = values.as_f64()?;
        if features.len() != header.total_nodes {
            return Err(Error::Format("node count mismatch".into()));
        }
        let mut offset = 0usize;
        for &size in sizes {
            let size = size as usize;
            let mut nodes = Vec::with_capacity(size);
            for k in offset..offset + size {
                nodes.push(Node {
                    feature: features[k] as u32,
                    threshold: thresholds[k],
                    left: lefts[k],
                    right: rights[k],
                    value: values[k],
                });
            }
            offset += size;
            trees.push(Tree { nodes });
        }
    }
    let split_count_t = decode_tensor(input)?;
    let impurity_t = decode_tensor(input)?;
    let split_count: Vec<u64> = split_count_t
        .as_i32()?
        .iter()
        .map(|&c| c as u64)
        .collect();
    let impurity_reduction = impurity_t.as_f64()?.to_vec();
    if split_count.len() != header.n_features {
        return Err(Error::Format("importance width mismatch".into()));
    }
    let val_rmse_history = if header.has_val_history {
        decode_tensor(input)?.as_f64()?.to_vec()
    } else {
        Vec::new()
    };
    Ok(TreeEnsemble {
        kind: header.kind,
        base_prediction: header.base_prediction,
        learning_rate: header.learning_rate,
        trees,
        n_trees_used: header.n_trees_used,
        n_features: header.n_features,
        split_count,
        impurity_reduction,
        val_rmse_history,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &TreeEnsemble) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    atomic_write(path.as_ref(), &buf)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TreeEnsemble> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut bytes.as_slice())
}
