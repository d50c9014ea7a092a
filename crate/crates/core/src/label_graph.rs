//! Label co-occurrence graph, graph attention over label word embeddings,
//! and the channel gate it produces for backbone features.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{PoolKind, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    /// Conditional probabilities at or above `tau` become edges.
    pub tau: f64,
    /// Share of each row's weight spread over its off-diagonal edges.
    pub p: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig { tau: 0.4, p: 0.2 }
    }
}

/// Directed K×K edge set. `edge(i, j)` means node `i` attends to node `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    k: usize,
    edges: Vec<bool>,
}

impl Adjacency {
    /// Takes the edges as given; no self-loops are added.
    pub fn from_edges(k: usize, edges: Vec<bool>) -> Result<Self> {
        if edges.len() != k * k || k == 0 {
            return Err(dim_err!(
                "adjacency for {k} nodes needs {} entries, got {}",
                k * k,
                edges.len()
            ));
        }
        Ok(Adjacency { k, edges })
    }

    pub fn identity(k: usize) -> Self {
        let mut edges = vec![false; k * k];
        for i in 0..k {
            edges[i * k + i] = true;
        }
        Adjacency { k, edges }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.k + j]
    }

    pub fn edges(&self) -> &[bool] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }
}

/// Conditional label probabilities and the graph derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    k: usize,
    /// `P(L_j | L_i) = M_ij / N_i`, row-major; the diagonal is 1.
    conditional: Vec<f64>,
    /// Thresholded at `tau`, self-loops inserted.
    adjacency: Adjacency,
    /// Off-diagonal edges share `p` per row, the diagonal keeps `1 - p`.
    /// A row with no off-diagonal edge keeps 1 on the diagonal.
    reweighted: Vec<f64>,
}

impl CorrelationMatrix {
    /// Counts from per-sample label sets. Repeated labels within a sample
    /// count once and sample order does not matter.
    pub fn build(
        annotations: &[Vec<usize>],
        class_names: &[String],
        cfg: CorrelationConfig,
    ) -> Result<Self> {
        let k = class_names.len();
        if k == 0 {
            return Err(Error::Data("correlation needs at least one class".into()));
        }
        if !(0.0..=1.0).contains(&cfg.tau) || !(0.0..=1.0).contains(&cfg.p) {
            return Err(Error::Config(format!(
                "correlation tau and p must lie in [0, 1], got {} and {}",
                cfg.tau, cfg.p
            )));
        }
        let mut occur = vec![0usize; k];
        let mut co = vec![0usize; k * k];
        for (row, labels) in annotations.iter().enumerate() {
            let set: BTreeSet<usize> = labels.iter().copied().collect();
            if let Some(&bad) = set.iter().find(|&&c| c >= k) {
                return Err(Error::Data(format!(
                    "sample {} has label index {bad} but only {k} classes exist",
                    row + 1
                )));
            }
            for &i in &set {
                occur[i] += 1;
                for &j in &set {
                    if i != j {
                        co[i * k + j] += 1;
                    }
                }
            }
        }
        if let Some(i) = occur.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!(
                "class {:?} never occurs, so its conditional probabilities are undefined",
                class_names[i]
            )));
        }
        let mut conditional = vec![0.0; k * k];
        let mut edges = vec![false; k * k];
        for i in 0..k {
            for j in 0..k {
                let at = i * k + j;
                if i == j {
                    conditional[at] = 1.0;
                    edges[at] = true;
                } else {
                    conditional[at] = co[at] as f64 / occur[i] as f64;
                    edges[at] = conditional[at] >= cfg.tau;
                }
            }
        }
        let mut reweighted = vec![0.0; k * k];
        for i in 0..k {
            let neighbours = (0..k).filter(|&j| j != i && edges[i * k + j]).count();
            if neighbours == 0 {
                reweighted[i * k + i] = 1.0;
                continue;
            }
            for j in 0..k {
                if i == j {
                    reweighted[i * k + j] = 1.0 - cfg.p;
                } else if edges[i * k + j] {
                    reweighted[i * k + j] = cfg.p / neighbours as f64;
                }
            }
        }
        Ok(CorrelationMatrix {
            k,
            conditional,
            adjacency: Adjacency { k, edges },
            reweighted,
        })
    }

    /// Label sets from a row-major B×K 0/1 matrix.
    pub fn from_label_matrix(
        labels: &Tensor,
        class_names: &[String],
        cfg: CorrelationConfig,
    ) -> Result<Self> {
        let [_, k] = labels.shape() else {
            return Err(dim_err!(
                "label matrix must be 2-D, got {:?}",
                labels.shape()
            ));
        };
        let sets: Vec<Vec<usize>> = labels
            .data()
            .chunks(*k)
            .map(|row| (0..*k).filter(|&j| row[j] == 1.0).collect())
            .collect();
        Self::build(&sets, class_names, cfg)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn conditional(&self, i: usize, j: usize) -> f64 {
        self.conditional[i * self.k + j]
    }

    pub fn reweighted(&self, i: usize, j: usize) -> f64 {
        self.reweighted[i * self.k + j]
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }
}

/// Label word vectors, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddings {
    pub names: Vec<String>,
    /// K×N.
    pub vectors: Tensor,
}

impl WordEmbeddings {
    pub fn new(names: Vec<String>, vectors: Tensor) -> Result<Self> {
        let [k, _] = vectors.shape() else {
            return Err(dim_err!(
                "embeddings must be K×N, got {:?}",
                vectors.shape()
            ));
        };
        if *k != names.len() {
            return Err(dim_err!("{} names for {k} embedding rows", names.len()));
        }
        if *k < 2 {
            return Err(Error::Data("embeddings need at least two classes".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Data("embeddings contain non-finite values".into()));
        }
        Ok(WordEmbeddings { names, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Parses the whitespace-separated `name v1 .. vN` text layout.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let mut parts = line.split_whitespace();
            let Some(name) = parts.next() else { continue };
            let values = parts
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::Data(format!("embeddings line {line_no}: bad number {t:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(Error::Data(format!(
                    "embeddings line {line_no}: no values for {name:?}"
                )));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Data(format!(
                        "embeddings line {line_no}: {} values, expected {d}",
                        values.len()
                    )))
                }
                Some(_) => {}
            }
            names.push(name.to_string());
            data.extend(values);
        }
        let dim = dim.ok_or_else(|| Error::Data("embeddings file is empty".into()))?;
        let k = names.len();
        Self::new(names, Tensor::new(vec![k, dim], data)?)
    }

    /// Loads from disk. An absent file is reported as missing embeddings:
    /// the label-graph branch cannot run without named labels.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingEmbeddings(format!(
                    "{} not found; the label-graph head needs a word vector per class name, \
                     which datasets with unnamed labels cannot provide",
                    path.display()
                ))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let dim = self.dim();
        let mut out = String::new();
        for (name, row) in self.names.iter().zip(self.vectors.data().chunks(dim)) {
            out.push_str(name);
            for v in row {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Rows reordered to follow `class_names`.
    pub fn aligned_to(&self, class_names: &[String]) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(class_names.len() * dim);
        for name in class_names {
            let i = self.names.iter().position(|n| n == name).ok_or_else(|| {
                Error::MissingEmbeddings(format!("no word vector for class {name:?}"))
            })?;
            data.extend_from_slice(&self.vectors.data()[i * dim..(i + 1) * dim]);
        }
        Self::new(
            class_names.to_vec(),
            Tensor::new(vec![class_names.len(), dim], data)?,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    #[default]
    Sigmoid,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    /// Per-head width of every layer except the last.
    pub hidden: usize,
    pub alpha: f64,
    pub gate: GateActivation,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 2,
            heads: 4,
            hidden: 32,
            alpha: 0.2,
            gate: GateActivation::Sigmoid,
        }
    }
}

#[derive(Clone, Debug)]
struct GatLayer {
    /// `[heads, in, out]`
    w: ParamId,
    /// `[heads * out]` each; reshaped on the tape.
    a_src: ParamId,
    a_dst: ParamId,
    bias: ParamId,
    out: usize,
    last: bool,
}

/// Graph attention stack mapping K label embeddings of width N to an S×K
/// output. Hidden layers concatenate heads and apply ELU; the last layer
/// averages its heads.
#[derive(Clone, Debug)]
pub struct Gat {
    cfg: GatConfig,
    layers: Vec<GatLayer>,
    s: usize,
}

impl Gat {
    pub fn new<R: Rng + ?Sized>(
        cfg: GatConfig,
        input_dim: usize,
        s: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.heads == 0 || cfg.hidden == 0 || s == 0 || input_dim == 0 {
            return Err(Error::Config(
                "gat layers, heads, widths must be positive".into(),
            ));
        }
        let h = cfg.heads;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut fan_in = input_dim;
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let out = if last { s } else { cfg.hidden };
            let std = (2.0 / (fan_in + out) as f64).sqrt();
            let a_std = (2.0 / (out + 1) as f64).sqrt();
            let name = |p: &str| format!("{prefix}.{l}.{p}");
            layers.push(GatLayer {
                w: store.add(
                    name("weight"),
                    Tensor::randn(vec![h, fan_in, out], std, rng),
                ),
                a_src: store.add(name("a_src"), Tensor::randn(vec![h * out], a_std, rng)),
                a_dst: store.add(name("a_dst"), Tensor::randn(vec![h * out], a_std, rng)),
                bias: store.add(
                    name("bias"),
                    Tensor::zeros(vec![if last { out } else { h * out }]),
                ),
                out,
                last,
            });
            fan_in = h * out;
        }
        Ok(Gat { cfg, layers, s })
    }

    pub fn config(&self) -> &GatConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.s
    }

    /// `g`: K×N embeddings. Returns `h` as S×K.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, g: Var, adj: &Adjacency) -> Result<Var> {
        Ok(self.forward_with_attention(tape, bound, g, adj)?.0)
    }

    /// Also returns each layer's `[heads, K, K]` attention.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        g: Var,
        adj: &Adjacency,
    ) -> Result<(Var, Vec<Var>)> {
        let &[k, _] = tape.shape(g) else {
            return Err(dim_err!("gat input must be K×N, got {:?}", tape.shape(g)));
        };
        if adj.k() != k {
            return Err(dim_err!(
                "adjacency has {} nodes, embeddings have {k}",
                adj.k()
            ));
        }
        let heads = self.cfg.heads;
        let mask: Vec<bool> = (0..heads)
            .flat_map(|_| adj.edges().iter().copied())
            .collect();
        let mut x = g;
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.out;
            let wh = tape.matmul(x, bound.var(layer.w))?; // [H, K, out]
            let a_src = tape.reshape(bound.var(layer.a_src), &[heads, out, 1])?;
            let a_dst = tape.reshape(bound.var(layer.a_dst), &[heads, out, 1])?;
            let src = tape.matmul(wh, a_src)?; // [H, K, 1]
            let dst = tape.matmul(wh, a_dst)?;
            let dst = tape.reshape(dst, &[heads, 1, k])?;
            let e = tape.add(src, dst)?; // e[h, i, j] = src_i + dst_j
            let e = tape.leaky_relu(e, self.cfg.alpha)?;
            let a = tape.masked_softmax(e, 2, &mask)?;
            attn.push(a);
            let y = tape.matmul(a, wh)?; // [H, K, out]
            x = if layer.last {
                let s = tape.sum_axis(y, 0)?;
                let m = tape.scale(s, 1.0 / heads as f64)?;
                tape.add(m, bound.var(layer.bias))?
            } else {
                let y = tape.permute(y, &[1, 0, 2])?;
                let y = tape.reshape(y, &[k, heads * out])?;
                let y = tape.add(y, bound.var(layer.bias))?;
                tape.elu(y, 1.0)?
            };
        }
        Ok((tape.transpose(x)?, attn))
    }

    /// Channel weights evaluated once, outside any training tape.
    pub fn channel_weights_value(
        &self,
        store: &ParamStore,
        embeddings: &Tensor,
        adj: &Adjacency,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind_constant(&mut tape);
        let g = tape.constant(embeddings.clone());
        let h = self.forward(&mut tape, &bound, g, adj)?;
        let w = channel_weights(&mut tape, h, self.cfg.gate)?;
        Ok(tape.value(w).clone())
    }
}

/// `w_c = gate(max_k h[c, k])` for `h` of shape S×K.
pub fn channel_weights(tape: &mut Tape, h: Var, gate: GateActivation) -> Result<Var> {
    if tape.shape(h).len() != 2 {
        return Err(dim_err!(
            "channel weights need S×K input, got {:?}",
            tape.shape(h)
        ));
    }
    let m = tape.max_axis(h, 1)?;
    match gate {
        GateActivation::Sigmoid => tape.sigmoid(m),
        GateActivation::Identity => Ok(m),
    }
}

/// `GAP(w ⊙ f) + GMP(w ⊙ f)`. `f` is `[.., S, h, w]`, `w` is `[S]`; the
/// result drops the two spatial axes.
pub fn reweight_and_pool(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let gated = gate_features(tape, f, w)?;
    let avg = tape.pool(gated, PoolKind::Avg)?;
    let max = tape.pool(gated, PoolKind::Max)?;
    tape.add(avg, max)
}

/// `w ⊙ f` with `w` broadcast over everything but the channel axis.
pub fn gate_features(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ws = tape.shape(w).to_vec();
    if fs.len() < 3 || ws.len() != 1 || ws[0] != fs[fs.len() - 3] {
        return Err(dim_err!(
            "channel weights {ws:?} do not match features {fs:?}"
        ));
    }
    let w3 = tape.reshape(w, &[ws[0], 1, 1])?;
    tape.mul(f, w3)
}

/// Channel weights persisted for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenWeights {
    pub s: usize,
    pub weights: Vec<f64>,
    pub checksum: String,
}

impl FrozenWeights {
    pub fn new(weights: Vec<f64>) -> Self {
        FrozenWeights {
            s: weights.len(),
            checksum: weights_checksum(&weights),
            weights,
        }
    }

    pub fn verify(&self) -> Result<()> {
        if self.weights.len() != self.s {
            return Err(Error::Integrity(format!(
                "frozen weights list {} values but s = {}",
                self.weights.len(),
                self.s
            )));
        }
        let actual = weights_checksum(&self.weights);
        if actual != self.checksum {
            return Err(Error::Integrity(format!(
                "frozen weights checksum {} does not match contents ({actual})",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.weights.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let frozen: FrozenWeights = serde_json::from_str(&text)?;
        frozen.verify()?;
        Ok(frozen)
    }
}

/// Hex SHA-256 over the little-endian bytes of `values`.
pub fn weights_checksum(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
