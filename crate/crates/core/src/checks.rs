//! Built-in gradient suites, one per library module, over a range of seeds.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{PoolKind, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, Stage};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::label_graph::{channel_weights, Adjacency, Gat, GatConfig, GateActivation};
use crate::losses::{aam_loss, asl_loss, AamConfig, AslConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    TensorCore,
    Losses,
    LabelGraph,
    Decoder,
    Backbone,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::TensorCore,
        Module::Losses,
        Module::LabelGraph,
        Module::Decoder,
        Module::Backbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::TensorCore => "tensor-core",
            Module::Losses => "losses",
            Module::LabelGraph => "label-graph",
            Module::Decoder => "decoder",
            Module::Backbone => "backbone",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Module::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown module {s:?}; expected one of {names:?} or \"all\""
                ))
            })
    }
}

/// Worst case of one check over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub module: &'static str,
    pub check: &'static str,
    pub tol: f64,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type Check = fn(&mut ChaCha8Rng, GradcheckOptions) -> Result<GradcheckReport>;

fn checks(module: Module) -> Vec<(&'static str, f64, Check)> {
    match module {
        Module::TensorCore => vec![
            ("matmul+softmax", 1e-5, tc_matmul_softmax),
            ("conv2d+pool", 1e-5, tc_conv_pool),
            ("elementwise", 1e-5, tc_elementwise),
            ("reshape+select", 1e-5, tc_structural),
        ],
        Module::Losses => vec![("aam_loss", 1e-5, loss_aam), ("asl_loss", 1e-5, loss_asl)],
        Module::LabelGraph => vec![
            ("gat_forward", 1e-5, gat_forward),
            ("channel_weights", 1e-5, gat_weights),
        ],
        Module::Decoder => vec![
            ("decode", 1e-5, decode),
            ("decode+project", 1e-4, decode_project),
        ],
        Module::Backbone => vec![("extract", 1e-5, extract)],
    }
}

/// Runs every check of `module` for seeds `first_seed..first_seed + seeds`.
pub fn run_module(module: Module, first_seed: u64, seeds: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (check, tol, f) in checks(module) {
        let mut res = SuiteResult {
            module: module.name(),
            check,
            tol,
            seeds,
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            failures: Vec::new(),
        };
        for seed in first_seed..first_seed + seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rep = f(&mut rng, GradcheckOptions::with_tol(tol))?;
            res.max_rel_err = res.max_rel_err.max(rep.max_rel_err);
            res.checked += rep.checked;
            res.skipped += rep.skipped;
            if !rep.passed() {
                res.failures.push(match rep.failure {
                    Some(f) => format!("seed {seed}: {f}"),
                    None => format!("seed {seed}: rel err {:.3e}", rep.max_rel_err),
                });
            }
        }
        out.push(res);
    }
    Ok(out)
}

/// Random linear read-out, so every output coordinate reaches the scalar.
fn readout(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = Tensor::randn(tape.shape(out).to_vec(), 1.0, rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn with_readout(
    inputs: &[Tensor],
    rng: &mut ChaCha8Rng,
    opts: GradcheckOptions,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    let seed: u64 = rng.random();
    gradcheck(
        |t, v| {
            let out = f(t, v)?;
            readout(t, out, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        inputs,
        opts,
    )
}

fn labels(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    let y = (0..b * k)
        .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
        .collect();
    Tensor::new(vec![b, k], y).expect("shape matches data")
}

fn params_then(store: &ParamStore, last: Tensor) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
    v.push(last);
    v
}

fn split(vars: &[Var]) -> (Bound, Var) {
    let (last, params) = vars.split_last().expect("at least one input");
    (Bound::from_vars(params.to_vec()), *last)
}

fn tc_matmul_softmax(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let a = Tensor::randn(vec![2, 3, 4], 1.0, rng);
    let b = Tensor::randn(vec![2, 4, 3], 1.0, rng);
    let mask: Vec<bool> = (0..18)
        .map(|i| i % 3 == (i / 3) % 3 || rng.random_bool(0.6))
        .collect();
    with_readout(&[a, b], rng, opts, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let s = t.softmax(m, 1)?;
        let ms = t.masked_softmax(m, 2, &mask)?;
        let n = t.l2_normalize(m, 2, 1e-12)?;
        let x = t.add(s, ms)?;
        t.add(x, n)
    })
}

fn tc_conv_pool(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let x = Tensor::randn(vec![1, 2, 4, 4], 1.0, rng);
    let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, rng);
    with_readout(&[x, w], rng, opts, |t, v| {
        let c = t.conv2d(v[0], v[1], 2, 1)?;
        let avg = t.pool(c, PoolKind::Avg)?;
        let max = t.pool(c, PoolKind::Max)?;
        t.add(avg, max)
    })
}

fn tc_elementwise(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let x = Tensor::randn(vec![3, 4], 1.0, rng);
    let y = Tensor::uniform(vec![4], 0.5, 2.0, rng);
    with_readout(&[x, y], rng, opts, |t, v| {
        let a = t.sigmoid(v[0])?;
        let b = t.log_sigmoid(v[0])?;
        let c = t.elu(v[0], 1.0)?;
        let d = t.leaky_relu(v[0], 0.2)?;
        let e = t.powf(v[1], 1.5)?;
        let f = t.log(v[1])?;
        let g = t.div(v[0], e)?;
        let h = t.mul(a, f)?;
        let s = t.add(b, c)?;
        let s = t.add(s, d)?;
        let s = t.add(s, g)?;
        t.add(s, h)
    })
}

fn tc_structural(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let x = Tensor::randn(vec![2, 3, 4], 1.0, rng);
    with_readout(&[x], rng, opts, |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let r = t.reshape(p, &[4, 6])?;
        let sel = t.index_select(r, 0, &[3, 0, 0, 2])?;
        let cat = t.concat(&[sel, r], 0)?;
        let sa = t.sum_axis(cat, 1)?;
        let ma = t.max_axis(v[0], 1)?;
        let ma = t.reshape(ma, &[8])?;
        t.concat(&[sa, ma], 0)
    })
}

fn loss_aam(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = AamConfig {
        s: rng.random_range(5.0..25.0),
        m: rng.random_range(-0.2..0.2),
        gamma_pos: rng.random_range(0.0..2.0),
        gamma_neg: rng.random_range(0.0..4.0),
        ..Default::default()
    };
    let cos = Tensor::uniform(vec![3, 4], -0.95, 0.95, rng);
    let y = labels(rng, 3, 4);
    gradcheck(|t, v| aam_loss(t, v[0], &y, &cfg), &[cos], opts)
}

fn loss_asl(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = AslConfig {
        gamma_pos: rng.random_range(0.0..2.0),
        gamma_neg: rng.random_range(0.0..5.0),
        clip: 0.05,
    };
    let logits = Tensor::randn(vec![3, 4], 2.0, rng);
    let y = labels(rng, 3, 4);
    gradcheck(|t, v| asl_loss(t, v[0], &y, &cfg), &[logits], opts)
}

fn small_gat(rng: &mut ChaCha8Rng) -> Result<(Gat, ParamStore, Adjacency, Tensor)> {
    let k = 4;
    let edges = (0..k * k)
        .map(|i| i % (k + 1) == 0 || rng.random_bool(0.4))
        .collect();
    let adj = Adjacency::from_edges(k, edges)?;
    let cfg = GatConfig {
        heads: 2,
        hidden: 3,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let gat = Gat::new(cfg, 5, 4, &mut store, "gat", rng)?;
    let emb = Tensor::randn(vec![k, 5], 1.0, rng);
    Ok((gat, store, adj, emb))
}

fn gat_forward(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (gat, store, adj, emb) = small_gat(rng)?;
    with_readout(&params_then(&store, emb), rng, opts, |t, v| {
        let (bound, g) = split(v);
        gat.forward(t, &bound, g, &adj)
    })
}

fn gat_weights(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (gat, store, adj, emb) = small_gat(rng)?;
    with_readout(&params_then(&store, emb), rng, opts, |t, v| {
        let (bound, g) = split(v);
        let h = gat.forward(t, &bound, g, &adj)?;
        channel_weights(t, h, GateActivation::Sigmoid)
    })
}

fn small_decoder(rng: &mut ChaCha8Rng) -> Result<(Decoder, ParamStore, Tensor)> {
    let cfg = DecoderConfig {
        groups: Some(2),
        dim: 4,
        heads: 2,
        ffn: 6,
    };
    let mut store = ParamStore::new();
    let normalize = rng.random_bool(0.5);
    let dec = Decoder::new(cfg, 3, 5, normalize, &mut store, "dec", rng)?;
    let f = Tensor::randn(vec![2, 3, 2, 2], 1.0, rng);
    Ok((dec, store, f))
}

fn decode(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (dec, store, f) = small_decoder(rng)?;
    with_readout(&params_then(&store, f), rng, opts, |t, v| {
        let (bound, f) = split(v);
        dec.decode(t, &bound, f)
    })
}

fn decode_project(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (dec, store, f) = small_decoder(rng)?;
    with_readout(&params_then(&store, f), rng, opts, |t, v| {
        let (bound, f) = split(v);
        dec.forward(t, &bound, f)
    })
}

fn extract(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = BackboneConfig {
        in_channels: 2,
        stages: vec![
            Stage {
                channels: 3,
                stride: 2,
            },
            Stage {
                channels: 2,
                stride: 1,
            },
        ],
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(cfg, &mut store, "bb", rng)?;
    // nonzero biases so the ReLU is exercised away from the origin
    for p in store.values_mut() {
        if p.rank() == 1 {
            *p = Tensor::uniform(p.shape().to_vec(), -0.1, 0.1, rng);
        }
    }
    let x = Tensor::randn(vec![1, 2, 4, 4], 1.0, rng);
    with_readout(&params_then(&store, x), rng, opts, |t, v| {
        let (bound, x) = split(v);
        bb.extract(t, &bound, x)
    })
}
