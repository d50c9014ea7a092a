//! Query-based decoder head. Learnable group queries cross-attend to the
//! flattened spatial features; each class reads the output vector of its
//! group through its own projection vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for normalized dot products.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Group count; `None` means `min(100, K)`.
    pub groups: Option<usize>,
    /// Embedding width `M`.
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            groups: None,
            dim: 32,
            heads: 4,
            ffn: 64,
        }
    }
}

/// Contiguous assignment of K classes to L groups of `ceil(K/L)` classes.
/// The last group may be short; with a custom L some trailing groups can
/// end up empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    pub k: usize,
    pub l: usize,
    group_of: Vec<usize>,
}

impl GroupPartition {
    pub fn new(k: usize, l: usize) -> Result<Self> {
        if l == 0 || l > k {
            return Err(Error::Config(format!(
                "group count {l} must lie in 1..={k}"
            )));
        }
        let size = k.div_ceil(l);
        Ok(GroupPartition {
            k,
            l,
            group_of: (0..k).map(|j| j / size).collect(),
        })
    }

    pub fn default_for(k: usize) -> Result<Self> {
        Self::new(k, k.min(100))
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.group_of[class]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.l];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn assignment(&self) -> &[usize] {
        &self.group_of
    }
}

/// One projection vector per class, optionally consumed through L2
/// normalization (cosine outputs) or as a raw affine map with bias.
#[derive(Clone, Debug)]
pub struct ClassifierBank {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub normalize: bool,
}

impl ClassifierBank {
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        dim: usize,
        normalize: bool,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::randn(vec![k, dim], std, rng),
        );
        let bias =
            (!normalize).then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(vec![k])));
        ClassifierBank {
            weight,
            bias,
            normalize,
        }
    }

    /// `feats` is `[B, K, M]` (one vector per class) or `[B, 1, M]` (shared);
    /// returns `[B, K]`.
    pub fn scores(&self, tape: &mut Tape, bound: &Bound, feats: Var) -> Result<Var> {
        let w = bound.var(self.weight);
        let fs = tape.shape(feats).to_vec();
        let ws = tape.shape(w).to_vec();
        if fs.len() != 3 || fs[2] != ws[1] || (fs[1] != 1 && fs[1] != ws[0]) {
            return Err(dim_err!(
                "class features {fs:?} do not fit classifier {ws:?}"
            ));
        }
        let (feats, w) = if self.normalize {
            (
                tape.l2_normalize(feats, 2, NORM_EPS)?,
                tape.l2_normalize(w, 1, NORM_EPS)?,
            )
        } else {
            (feats, w)
        };
        let prod = tape.mul(feats, w)?;
        let dots = tape.sum_axis(prod, 2)?;
        match self.bias {
            Some(b) => tape.add(dots, bound.var(b)),
            None => Ok(dots),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    partition: GroupPartition,
    queries: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    pub bank: ClassifierBank,
}

impl Decoder {
    /// `s` is the feature channel count, `k` the class count.
    pub fn new<R: Rng + ?Sized>(
        cfg: DecoderConfig,
        s: usize,
        k: usize,
        normalize: bool,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.ffn == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "decoder dim {} must be a positive multiple of heads {}",
                cfg.dim, cfg.heads
            )));
        }
        let partition = match cfg.groups {
            Some(l) => GroupPartition::new(k, l)?,
            None => GroupPartition::default_for(k)?,
        };
        let m = cfg.dim;
        let mut mat = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            store.add(
                format!("{prefix}.{name}"),
                Tensor::randn(vec![rows, cols], std, rng),
            )
        };
        let queries = mat("queries", partition.l, m, rng);
        let w_q = mat("w_q", m, m, rng);
        let w_k = mat("w_k", s, m, rng);
        let w_v = mat("w_v", s, m, rng);
        let w_o = mat("w_o", m, m, rng);
        let w_1 = mat("ffn.w_1", m, cfg.ffn, rng);
        let w_2 = mat("ffn.w_2", cfg.ffn, m, rng);
        let b_o = store.add(format!("{prefix}.b_o"), Tensor::zeros(vec![m]));
        let b_1 = store.add(format!("{prefix}.ffn.b_1"), Tensor::zeros(vec![cfg.ffn]));
        let b_2 = store.add(format!("{prefix}.ffn.b_2"), Tensor::zeros(vec![m]));
        let bank =
            ClassifierBank::new(k, m, normalize, store, &format!("{prefix}.classifier"), rng);
        Ok(Decoder {
            cfg,
            partition,
            queries,
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
            w_1,
            b_1,
            w_2,
            b_2,
            bank,
        })
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    /// `f` is `[B, S, h, w]`; returns the group vectors as `[B, L, M]`
    /// (one M-vector per group and sample).
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        Ok(self.decode_with_attention(tape, bound, f)?.0)
    }

    /// Also returns the `[B, heads, L, h*w]` attention weights.
    pub fn decode_with_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f: Var,
    ) -> Result<(Var, Var)> {
        let &[b, s, h, w] = tape.shape(f) else {
            return Err(dim_err!(
                "decoder input must be [B, S, h, w], got {:?}",
                tape.shape(f)
            ));
        };
        let (m, nh, l) = (self.cfg.dim, self.cfg.heads, self.partition.l);
        let dh = m / nh;
        let p = h * w;
        let mem = tape.reshape(f, &[b, s, p])?;
        let mem = tape.permute(mem, &[0, 2, 1])?; // [B, P, S]
        let keys = tape.matmul(mem, bound.var(self.w_k))?; // [B, P, M]
        let values = tape.matmul(mem, bound.var(self.w_v))?;
        let keys = split_heads(tape, keys, &[b, p], nh, dh)?; // [B, H, P, dh]
        let values = split_heads(tape, values, &[b, p], nh, dh)?;
        let q_in = bound.var(self.queries);
        let q = tape.matmul(q_in, bound.var(self.w_q))?; // [L, M]
        let q = split_heads(tape, q, &[l], nh, dh)?; // [H, L, dh]
        let kt = tape.permute(keys, &[0, 1, 3, 2])?; // [B, H, dh, P]
        let scores = tape.matmul(q, kt)?; // [B, H, L, P]
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, values)?; // [B, H, L, dh]
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, m])?;
        let ctx = tape.matmul(ctx, bound.var(self.w_o))?;
        let ctx = tape.add(ctx, bound.var(self.b_o))?;
        let x1 = tape.add(q_in, ctx)?; // [B, L, M]
        let hid = tape.matmul(x1, bound.var(self.w_1))?;
        let hid = tape.add(hid, bound.var(self.b_1))?;
        let hid = tape.relu(hid)?;
        let out = tape.matmul(hid, bound.var(self.w_2))?;
        let out = tape.add(out, bound.var(self.b_2))?;
        Ok((tape.add(x1, out)?, attn))
    }

    /// `[B, L, M]` group vectors to `[B, K]` scores; class `j` reads the
    /// vector of its group.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, v: Var) -> Result<Var> {
        let per_class = tape.index_select(v, 1, self.partition.assignment())?;
        self.bank.scores(tape, bound, per_class)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let v = self.decode(tape, bound, f)?;
        self.project(tape, bound, v)
    }
}

/// `[.., n, H*dh]` to `[.., H, n, dh]`, where `lead` lists the leading
/// extents including `n`.
fn split_heads(tape: &mut Tape, x: Var, lead: &[usize], heads: usize, dh: usize) -> Result<Var> {
    let mut shape = lead.to_vec();
    shape.extend([heads, dh]);
    let x = tape.reshape(x, &shape)?;
    let r = shape.len();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    tape.permute(x, &perm)
}
