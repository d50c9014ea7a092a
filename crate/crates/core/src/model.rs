//! Backbone plus one of four heads, and the loss that trains it.
//!
//! | head          | embedding                        |
//! |---------------|----------------------------------|
//! | `plain`       | `GAP(f) + GMP(f)`                |
//! | `gat`         | `GAP(w⊙f) + GMP(w⊙f)`            |
//! | `decoder`     | decoder group vectors of `f`     |
//! | `decoder+gat` | decoder group vectors of `w⊙f`   |
//!
//! With the AAM loss every classifier dot product is normalized, so the
//! head emits cosines; with ASL it emits raw logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, PoolKind, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{ClassifierBank, Decoder, DecoderConfig};
use crate::error::{dim_err, Error, Result};
use crate::label_graph::{
    channel_weights, gate_features, reweight_and_pool, Adjacency, CorrelationConfig, FrozenWeights,
    Gat, GatConfig, WordEmbeddings,
};
use crate::losses::{aam_loss, asl_loss, AamConfig, AslConfig};
use crate::params::{Bound, Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "gat")]
    Gat,
    #[default]
    #[serde(rename = "decoder")]
    Decoder,
    #[serde(rename = "decoder+gat")]
    DecoderGat,
}

impl HeadKind {
    pub fn uses_graph(self) -> bool {
        matches!(self, HeadKind::Gat | HeadKind::DecoderGat)
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, HeadKind::Decoder | HeadKind::DecoderGat)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Aam,
    Asl,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub gat: GatConfig,
    pub correlation: CorrelationConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub aam: AamConfig,
    pub asl: AslConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Aam => self.aam.validate(),
            LossKind::Asl => self.asl.validate(),
        }
    }

    /// Head scores to confidences in (0, 1).
    pub fn confidence(&self, score: f64) -> f64 {
        match self.kind {
            LossKind::Aam => self.aam.confidence(score),
            LossKind::Asl => sigmoid(score),
        }
    }

    pub fn loss(&self, tape: &mut Tape, scores: Var, targets: &Tensor) -> Result<Var> {
        match self.kind {
            LossKind::Aam => aam_loss(tape, scores, targets, &self.aam),
            LossKind::Asl => asl_loss(tape, scores, targets, &self.asl),
        }
    }
}

/// Label-graph inputs: word embeddings aligned to the class order and the
/// binarized correlation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInputs {
    pub embeddings: WordEmbeddings,
    pub adjacency: Adjacency,
}

#[derive(Clone, Debug)]
enum Head {
    Pooled(ClassifierBank),
    Decoder(Decoder),
}

/// Model structure; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Arch {
    pub cfg: ModelConfig,
    pub loss: LossConfig,
    pub k: usize,
    backbone: Backbone,
    gat: Option<Gat>,
    head: Head,
    graph: Option<GraphInputs>,
}

/// Where the channel gate comes from.
#[derive(Clone, Copy, Debug)]
pub enum GateSource<'a> {
    /// Run the graph branch on the tape.
    Live,
    /// Use precomputed weights; no graph operations are recorded.
    Frozen(&'a FrozenWeights),
}

impl Arch {
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        loss: LossConfig,
        k: usize,
        graph: Option<GraphInputs>,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        loss.validate()?;
        if k == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::new(cfg.backbone.clone(), &mut store, "backbone", rng)?;
        let s = cfg.backbone.out_channels();
        let normalize = loss.kind == LossKind::Aam;
        let gat = if cfg.head.uses_graph() {
            let g = graph.as_ref().ok_or_else(|| {
                Error::MissingEmbeddings(
                    "the gat heads need label word embeddings; datasets with unnamed labels \
                     cannot provide them, use the plain or decoder head instead"
                        .into(),
                )
            })?;
            if g.embeddings.vectors.shape()[0] != k || g.adjacency.k() != k {
                return Err(dim_err!(
                    "graph inputs cover {} classes, model has {k}",
                    g.adjacency.k()
                ));
            }
            Some(Gat::new(
                cfg.gat,
                g.embeddings.dim(),
                s,
                &mut store,
                "gat",
                rng,
            )?)
        } else {
            None
        };
        let head = if cfg.head.uses_decoder() {
            Head::Decoder(Decoder::new(
                cfg.decoder,
                s,
                k,
                normalize,
                &mut store,
                "decoder",
                rng,
            )?)
        } else {
            Head::Pooled(ClassifierBank::new(
                k,
                s,
                normalize,
                &mut store,
                "classifier",
                rng,
            ))
        };
        let graph = if cfg.head.uses_graph() { graph } else { None };
        Ok((
            Arch {
                cfg,
                loss,
                k,
                backbone,
                gat,
                head,
                graph,
            },
            store,
        ))
    }

    pub fn graph(&self) -> Option<&GraphInputs> {
        self.graph.as_ref()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        match &self.head {
            Head::Decoder(d) => Some(d),
            Head::Pooled(_) => None,
        }
    }

    /// Head scores `[B, K]` for `x` of shape `[B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, gate: GateSource) -> Result<Var> {
        let f = self.backbone.extract(tape, bound, x)?;
        if tape.shape(f).len() != 4 {
            return Err(dim_err!("model input must be batched [B, C, H, W]"));
        }
        let w = match (&self.gat, gate) {
            (None, _) => None,
            (Some(_), GateSource::Frozen(frozen)) => {
                if frozen.s != self.cfg.backbone.out_channels() {
                    return Err(dim_err!(
                        "frozen weights have {} channels, backbone has {}",
                        frozen.s,
                        self.cfg.backbone.out_channels()
                    ));
                }
                Some(tape.constant(frozen.tensor()))
            }
            (Some(gat), GateSource::Live) => {
                let graph = self
                    .graph
                    .as_ref()
                    .expect("graph inputs exist when gat does");
                let g = tape.constant(graph.embeddings.vectors.clone());
                let h = gat.forward(tape, bound, g, &graph.adjacency)?;
                Some(channel_weights(tape, h, gat.config().gate)?)
            }
        };
        match &self.head {
            Head::Pooled(bank) => {
                let v = match w {
                    Some(w) => reweight_and_pool(tape, f, w)?,
                    None => {
                        let avg = tape.pool(f, PoolKind::Avg)?;
                        let max = tape.pool(f, PoolKind::Max)?;
                        tape.add(avg, max)?
                    }
                };
                let &[b, s] = tape.shape(v) else {
                    unreachable!()
                };
                let v = tape.reshape(v, &[b, 1, s])?;
                bank.scores(tape, bound, v)
            }
            Head::Decoder(dec) => {
                let f = match w {
                    Some(w) => gate_features(tape, f, w)?,
                    None => f,
                };
                dec.forward(tape, bound, f)
            }
        }
    }

    /// Mean batch loss and parameter gradients.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<(f64, Grads)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let scores = self.forward(&mut tape, &bound, xv, GateSource::Live)?;
        let loss = self.loss.loss(&mut tape, scores, y)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        Ok((value, bound.grads(&tape)))
    }

    /// Head scores for a whole feature tensor, evaluated in chunks without
    /// recording gradients.
    pub fn scores(&self, store: &ParamStore, x: &Tensor, gate: GateSource) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(dim_err!("features must be [B, C, H, W], got {shape:?}"));
        }
        let per = shape[1..].iter().product::<usize>();
        let b = shape[0];
        let chunk = 256;
        let mut out = Vec::with_capacity(b * self.k);
        // The live gate does not depend on the input, so it is evaluated once.
        let frozen_live;
        let gate = match (gate, &self.gat) {
            (GateSource::Live, Some(gat)) => {
                let graph = self
                    .graph
                    .as_ref()
                    .expect("graph inputs exist when gat does");
                let w =
                    gat.channel_weights_value(store, &graph.embeddings.vectors, &graph.adjacency)?;
                frozen_live = FrozenWeights::new(w.into_data());
                GateSource::Frozen(&frozen_live)
            }
            (g, _) => g,
        };
        for start in (0..b).step_by(chunk) {
            let end = (start + chunk).min(b);
            let mut sub_shape = shape.to_vec();
            sub_shape[0] = end - start;
            let sub = Tensor::new(sub_shape, x.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = store.bind_constant(&mut tape);
            let xv = tape.constant(sub);
            let s = self.forward(&mut tape, &bound, xv, gate)?;
            out.extend_from_slice(tape.value(s).data());
        }
        Tensor::new(vec![b, self.k], out)
    }

    /// Confidences in (0, 1), shape `[B, K]`.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, gate: GateSource) -> Result<Tensor> {
        let s = self.scores(store, x, gate)?;
        Ok(s.map(|v| self.loss.confidence(v)))
    }

    /// Evaluates the graph branch once and packages the channel weights.
    pub fn freeze(&self, store: &ParamStore) -> Result<FrozenWeights> {
        let (Some(gat), Some(graph)) = (&self.gat, &self.graph) else {
            return Err(Error::Config(format!(
                "head {:?} has no graph branch to freeze",
                self.cfg.head
            )));
        };
        let w = gat.channel_weights_value(store, &graph.embeddings.vectors, &graph.adjacency)?;
        Ok(FrozenWeights::new(w.into_data()))
    }
}
