//! Checkpoint container: an 8-byte magic, a little-endian u64 header
//! length, a JSON header, then every parameter as little-endian f64 in
//! header order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::label_graph::{Adjacency, WordEmbeddings};
use crate::model::{Arch, GraphInputs};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MLCCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GraphHeader {
    names: Vec<String>,
    /// Row-major K×N.
    embeddings: Vec<f64>,
    dim: usize,
    /// Row-major K×K 0/1 edges.
    edges: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    class_names: Vec<String>,
    epoch: usize,
    #[serde(rename = "ema_val_mAP")]
    ema_val_map: f64,
    params: Vec<ParamEntry>,
    blob_sha256: String,
    graph: Option<GraphHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub ema_val_map: f64,
    pub params: ParamStore,
    pub graph: Option<GraphInputs>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob: Vec<u8> = self
            .params
            .iter()
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let header = Header {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            ema_val_map: self.ema_val_map,
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            graph: self.graph.as_ref().map(|g| GraphHeader {
                names: g.embeddings.names.clone(),
                embeddings: g.embeddings.vectors.data().to_vec(),
                dim: g.embeddings.dim(),
                edges: g.adjacency.edges().iter().map(|&e| e as u8).collect(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Integrity(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let blob = &body[hlen..];
        if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
            return Err(bad("parameter blob checksum mismatch"));
        }
        let mut params = ParamStore::new();
        let mut at = 0;
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let end = at + n * 8;
            if end > blob.len() {
                return Err(bad("parameter blob is shorter than the header describes"));
            }
            let data = blob[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(entry.name, Tensor::new(entry.shape, data)?);
            at = end;
        }
        if at != blob.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        let graph = match header.graph {
            None => None,
            Some(g) => {
                let k = g.names.len();
                Some(GraphInputs {
                    embeddings: WordEmbeddings::new(
                        g.names,
                        Tensor::new(vec![k, g.dim], g.embeddings)?,
                    )?,
                    adjacency: Adjacency::from_edges(k, g.edges.iter().map(|&e| e != 0).collect())?,
                })
            }
        };
        Ok(Checkpoint {
            config: header.config,
            class_names: header.class_names,
            epoch: header.epoch,
            ema_val_map: header.ema_val_map,
            params,
            graph,
        })
    }

    /// Rebuilds the model structure and installs the stored values.
    pub fn restore(&self) -> Result<(Arch, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (arch, mut store) = Arch::new(
            self.config.model.clone(),
            self.config.loss,
            self.class_names.len(),
            self.graph.clone(),
            &mut rng,
        )?;
        let params: Vec<Param> = self.params.params().to_vec();
        store.load_from(&params)?;
        Ok((arch, store))
    }
}
