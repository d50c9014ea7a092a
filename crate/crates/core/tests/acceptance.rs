//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the summary is always
//! printed, including under `cargo test` output capture.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mlc_core::backbone::{Backbone, BackboneConfig, Stage};
use mlc_core::config::RunConfig;
use mlc_core::data::{generate_synthetic, DatasetDir, SynthSpec};
use mlc_core::decoder::{Decoder, DecoderConfig};
use mlc_core::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use mlc_core::label_graph::{Adjacency, FrozenWeights, Gat, GatConfig};
use mlc_core::losses::{aam_loss, aam_part_curves, asl_loss, AamConfig, AslConfig};
use mlc_core::metrics::{
    average_precision, calibrate_thresholds, default_grid, evaluate, mean_average_precision,
};
use mlc_core::model::{Arch, GateSource, HeadKind};
use mlc_core::optim::{Ema, OneCycle, OneCycleConfig, Sam, SamConfig, Sgd, SgdConfig};
use mlc_core::run::{build_model, train_run};
use mlc_core::{Bound, Grads, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn scalar_loss(
    cos: f64,
    y: f64,
    f: impl Fn(&mut Tape, Var, &Tensor) -> Result<Var>,
) -> Result<f64> {
    let mut t = Tape::new();
    let c = t.constant(Tensor::new(vec![1, 1], vec![cos])?);
    let l = f(&mut t, c, &Tensor::new(vec![1, 1], vec![y])?)?;
    Ok(t.value(l).item())
}

fn c1_loss_identities() -> Result<Verdict> {
    let aam = AamConfig {
        s: 1.0,
        m: 0.0,
        k: 0.5,
        gamma_pos: 0.0,
        gamma_neg: 0.0,
        ..Default::default()
    };
    let asl = AslConfig {
        gamma_pos: 0.0,
        gamma_neg: 0.0,
        clip: 0.0,
    };
    let mut r = rng(1);
    let (mut e_aam, mut e_asl) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let y = f64::from(r.random_bool(0.5) as u8);
        let cos: f64 = r.random_range(-0.999..0.999);
        let got = scalar_loss(cos, y, |t, c, y| aam_loss(t, c, y, &aam))?;
        e_aam = e_aam.max((got - 0.5 * bce(sigmoid(cos), y)).abs());
        let logit: f64 = r.random_range(-8.0..8.0);
        let got = scalar_loss(logit, y, |t, c, y| asl_loss(t, c, y, &asl))?;
        e_asl = e_asl.max((got - bce(sigmoid(logit), y)).abs());
    }
    Ok(verdict(
        e_aam <= 1e-12 && e_asl <= 1e-12,
        format!("max |AAM - BCE/2| {e_aam:.1e}, max |ASL - BCE| {e_asl:.1e}"),
    ))
}

/// Worst report over seeds for one module.
struct GradSummary {
    name: &'static str,
    tol: f64,
    worst: f64,
    failures: Vec<String>,
    skipped: usize,
}

fn grad_suite(
    name: &'static str,
    tol: f64,
    mut run: impl FnMut(u64, GradcheckOptions) -> Result<GradcheckReport>,
) -> Result<GradSummary> {
    let mut s = GradSummary {
        name,
        tol,
        worst: 0.0,
        failures: Vec::new(),
        skipped: 0,
    };
    for seed in 0..100 {
        let rep = run(seed, GradcheckOptions::with_tol(tol))?;
        s.worst = s.worst.max(rep.max_rel_err);
        s.skipped += rep.skipped;
        if !rep.passed() {
            s.failures.push(format!(
                "seed {seed}: {:.2e} {:?}",
                rep.max_rel_err, rep.failure
            ));
        }
    }
    Ok(s)
}

/// Random projection to a scalar, so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, r: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::randn(shape, 1.0, r));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn random_labels(r: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    let y = (0..b * k)
        .map(|_| f64::from(r.random_bool(0.4) as u8))
        .collect();
    Tensor::new(vec![b, k], y).expect("shape")
}

fn module_inputs(store: &ParamStore, extra: Tensor) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
    v.push(extra);
    v
}

fn split_vars(vars: &[Var]) -> (Bound, Var) {
    (
        Bound::from_vars(vars[..vars.len() - 1].to_vec()),
        *vars.last().expect("input"),
    )
}

fn c2_gradients() -> Result<Verdict> {
    let mut suites = Vec::new();

    suites.push(grad_suite("aam_loss", 1e-5, |seed, opts| {
        let mut r = rng(seed);
        let cfg = AamConfig {
            s: [17.0, 23.0, 25.0][seed as usize % 3],
            m: r.random_range(-0.2..0.2),
            gamma_pos: r.random_range(0.0..2.0),
            gamma_neg: r.random_range(0.0..4.0),
            ..Default::default()
        };
        let cos = Tensor::uniform(vec![3, 4], -0.95, 0.95, &mut r);
        let y = random_labels(&mut r, 3, 4);
        gradcheck(|t, v| aam_loss(t, v[0], &y, &cfg), &[cos], opts)
    })?);

    suites.push(grad_suite("asl_loss", 1e-5, |seed, opts| {
        let mut r = rng(seed);
        let cfg = AslConfig {
            gamma_pos: r.random_range(0.0..2.0),
            gamma_neg: r.random_range(0.0..5.0),
            clip: 0.05,
        };
        let logits = Tensor::randn(vec![3, 4], 2.0, &mut r);
        let y = random_labels(&mut r, 3, 4);
        gradcheck(|t, v| asl_loss(t, v[0], &y, &cfg), &[logits], opts)
    })?);

    suites.push(grad_suite("gat_forward", 1e-5, |seed, opts| {
        let mut r = rng(seed);
        let k = 4;
        let edges = (0..k * k)
            .map(|i| i % (k + 1) == 0 || r.random_bool(0.4))
            .collect();
        let adj = Adjacency::from_edges(k, edges)?;
        let cfg = GatConfig {
            heads: 2,
            hidden: 3,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let gat = Gat::new(cfg, 5, 4, &mut store, "gat", &mut r)?;
        let inputs = module_inputs(&store, Tensor::randn(vec![k, 5], 1.0, &mut r));
        let proj_seed = r.random();
        gradcheck(
            |t, v| {
                let (bound, g) = split_vars(v);
                let h = gat.forward(t, &bound, g, &adj)?;
                project(t, h, &mut rng(proj_seed))
            },
            &inputs,
            opts,
        )
    })?);

    let small_decoder = |r: &mut ChaCha8Rng, normalize: bool| -> Result<(Decoder, ParamStore)> {
        let cfg = DecoderConfig {
            groups: Some(2),
            dim: 4,
            heads: 2,
            ffn: 6,
        };
        let mut store = ParamStore::new();
        let dec = Decoder::new(cfg, 3, 5, normalize, &mut store, "dec", r)?;
        Ok((dec, store))
    };

    suites.push(grad_suite("decode", 1e-5, |seed, opts| {
        let mut r = rng(seed);
        let (dec, store) = small_decoder(&mut r, true)?;
        let inputs = module_inputs(&store, Tensor::randn(vec![2, 3, 2, 2], 1.0, &mut r));
        let proj_seed = r.random();
        gradcheck(
            |t, v| {
                let (bound, f) = split_vars(v);
                let q = dec.decode(t, &bound, f)?;
                project(t, q, &mut rng(proj_seed))
            },
            &inputs,
            opts,
        )
    })?);

    suites.push(grad_suite("extract", 1e-5, |seed, opts| {
        let mut r = rng(seed);
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
        let bb = Backbone::new(cfg, &mut store, "bb", &mut r)?;
        for p in store.values_mut() {
            if p.rank() == 1 {
                *p = Tensor::uniform(p.shape().to_vec(), -0.1, 0.1, &mut r);
            }
        }
        let inputs = module_inputs(&store, Tensor::randn(vec![1, 2, 4, 4], 1.0, &mut r));
        let proj_seed = r.random();
        gradcheck(
            |t, v| {
                let (bound, x) = split_vars(v);
                let f = bb.extract(t, &bound, x)?;
                project(t, f, &mut rng(proj_seed))
            },
            &inputs,
            opts,
        )
    })?);

    // the whole head into the loss: decode, project, cosine bank, AAM
    suites.push(grad_suite("decoder head + aam", 1e-4, |seed, opts| {
        let mut r = rng(seed);
        let (dec, store) = small_decoder(&mut r, true)?;
        let inputs = module_inputs(&store, Tensor::randn(vec![2, 3, 2, 2], 1.0, &mut r));
        let y = random_labels(&mut r, 2, 5);
        let cfg = AamConfig::default();
        gradcheck(
            |t, v| {
                let (bound, f) = split_vars(v);
                let cos = dec.forward(t, &bound, f)?;
                aam_loss(t, cos, &y, &cfg)
            },
            &inputs,
            opts,
        )
    })?);

    let pass = suites.iter().all(|s| s.failures.is_empty());
    let mut detail: Vec<String> = suites
        .iter()
        .map(|s| {
            format!(
                "{} {:.1e}<{:.0e}{}",
                s.name,
                s.worst,
                s.tol,
                if s.skipped > 0 {
                    format!(" ({} kink probes skipped)", s.skipped)
                } else {
                    String::new()
                }
            )
        })
        .collect();
    for s in &suites {
        for f in s.failures.iter().take(3) {
            detail.push(format!("FAIL {} {f}", s.name));
        }
    }
    Ok(verdict(pass, detail.join("; ")))
}

/// Precision at each positive's rank by direct counting: `j` precedes `i`
/// when it scores higher, or equal with a lower index.
fn ap_oracle(s: &[f64], y: &[f64]) -> Option<f64> {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| y[i] == 1.0).collect();
    if pos.is_empty() {
        return None;
    }
    let before = |j: usize, i: usize| s[j] > s[i] || (s[j] == s[i] && j <= i);
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let rank = (0..s.len()).filter(|&j| before(j, i)).count();
            let hits = pos.iter().filter(|&&j| before(j, i)).count();
            hits as f64 / rank as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn c3_metric_oracle() -> Result<Verdict> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let safe = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let harm = |p: f64, q: f64| {
        if p + q > 0.0 {
            2.0 * p * q / (p + q)
        } else {
            0.0
        }
    };
    for _ in 0..500 {
        let b = r.random_range(1..=20);
        let k = r.random_range(1..=5);
        // coarse scores so ties are common
        let s: Vec<f64> = (0..b * k)
            .map(|_| r.random_range(0..10) as f64 / 10.0)
            .collect();
        let y: Vec<f64> = (0..b * k)
            .map(|_| f64::from(r.random_bool(0.35) as u8))
            .collect();
        let thr: Vec<f64> = (0..k)
            .map(|_| r.random_range(1..10) as f64 / 10.0)
            .collect();
        let st = Tensor::new(vec![b, k], s.clone())?;
        let yt = Tensor::new(vec![b, k], y.clone())?;
        let rep = evaluate(&st, &yt, &thr)?;

        let (mut aps, mut tp, mut fp, mut fn_) = (Vec::new(), 0, 0, 0);
        let (mut cp, mut cr) = (0.0, 0.0);
        for j in 0..k {
            let sj: Vec<f64> = (0..b).map(|i| s[i * k + j]).collect();
            let yj: Vec<f64> = (0..b).map(|i| y[i * k + j]).collect();
            let ap = ap_oracle(&sj, &yj);
            match (ap, average_precision(&sj, &yj)) {
                (Some(a), Some(g)) => worst = worst.max((a - g).abs()),
                (None, None) => {}
                other => return Ok(verdict(false, format!("AP presence differs: {other:?}"))),
            }
            aps.extend(ap);
            let pred = |i: usize| sj[i] >= thr[j];
            let t = (0..b).filter(|&i| pred(i) && yj[i] == 1.0).count();
            let f = (0..b).filter(|&i| pred(i) && yj[i] == 0.0).count();
            let n = (0..b).filter(|&i| !pred(i) && yj[i] == 1.0).count();
            tp += t;
            fp += f;
            fn_ += n;
            cp += safe(t, t + f);
            cr += safe(t, t + n);
            worst = worst
                .max((rep.precision[j] - safe(t, t + f)).abs())
                .max((rep.recall[j] - safe(t, t + n)).abs())
                .max((rep.f1[j] - safe(2 * t, 2 * t + f + n)).abs());
        }
        let map = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        let (op, or) = (safe(tp, tp + fp), safe(tp, tp + fn_));
        let (cp, cr) = (cp / k as f64, cr / k as f64);
        for (got, want) in [
            (rep.map, map),
            (rep.op, op),
            (rep.or, or),
            (rep.of1, harm(op, or)),
            (rep.cp, cp),
            (rep.cr, cr),
            (rep.cf1, harm(cp, cr)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let mut perfect = true;
    for _ in 0..100 {
        let b = r.random_range(2..=20);
        let y: Vec<f64> = (0..b)
            .map(|i| f64::from(i == 0 || r.random_bool(0.5)))
            .collect();
        let s: Vec<f64> = y.iter().map(|&v| v + r.random_range(0.0..0.5)).collect();
        perfect &= average_precision(&s, &y) == Some(1.0);
    }
    Ok(verdict(
        worst <= 1e-12 && perfect,
        format!(
            "500 instances, max deviation {worst:.1e}; perfect-ranking AP exactly 1: {perfect}"
        ),
    ))
}

fn c4_optimizers() -> Result<Verdict> {
    let mut notes = Vec::new();

    // SAM with zero radius against plain SGD, bit for bit
    let mut r = rng(4);
    let mut store = ParamStore::new();
    store.add("w", Tensor::randn(vec![3, 3], 1.0, &mut r));
    store.add("b", Tensor::randn(vec![3], 1.0, &mut r));
    let target: Vec<Tensor> = store
        .iter()
        .map(|p| Tensor::randn(p.value.shape().to_vec(), 1.0, &mut r))
        .collect();
    let loss_grad = |s: &ParamStore| -> Result<(f64, Grads)> {
        let mut loss = 0.0;
        let mut g = Vec::new();
        for (p, t) in s.iter().zip(&target) {
            let d: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(t.data())
                .map(|(w, t)| w - t)
                .collect();
            loss += d.iter().map(|v| 0.5 * v * v * v * v).sum::<f64>();
            g.push(Tensor::new(
                p.value.shape().to_vec(),
                d.iter().map(|v| 2.0 * v * v * v).collect(),
            )?);
        }
        Ok((loss, Grads(g)))
    };
    let sgd_cfg = SgdConfig::default();
    let (mut a, mut b) = (store.clone(), store.clone());
    let mut sam = Sam::new(
        SamConfig {
            rho: 0.0,
            sgd: sgd_cfg,
        },
        &a,
    )?;
    let mut sgd = Sgd::new(sgd_cfg, &b);
    for _ in 0..100 {
        sam.step(&mut a, 0.05, loss_grad)?;
        let (_, g) = loss_grad(&b)?;
        sgd.step(&mut b, &g, 0.05)?;
    }
    let bits = |s: &ParamStore| -> Vec<u64> {
        s.iter()
            .flat_map(|p| {
                p.value
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let sam_eq = bits(&a) == bits(&b);
    notes.push(format!(
        "SAM(rho=0) == SGD bitwise over 100 steps: {sam_eq}"
    ));

    // f(w) = w^2 from w = 1
    let mut q = ParamStore::new();
    q.add("w", Tensor::vector(vec![1.0]));
    let cfg = SamConfig {
        rho: 0.05,
        sgd: SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        },
    };
    let mut sam = Sam::new(cfg, &q)?;
    sam.step(&mut q, 0.1, |s| {
        let w = s.params()[0].value.data()[0];
        Ok((w * w, Grads(vec![Tensor::vector(vec![2.0 * w])])))
    })?;
    let w = q.params()[0].value.data()[0];
    let hand = w == 0.79;
    notes.push(format!("SAM quadratic 1 -> {w}"));

    let oc = OneCycleConfig::default();
    let sched = OneCycle::new(oc, 1000)?;
    let bounds = sched.lr(0) == oc.max_lr / 25.0
        && sched.lr(sched.warmup_steps()) == oc.max_lr
        && sched.lr(1000) == oc.max_lr / 1e4;
    notes.push(format!(
        "OneCycle {} / {} / {}",
        sched.lr(0),
        sched.lr(sched.warmup_steps()),
        sched.lr(1000)
    ));

    let mut s = ParamStore::new();
    s.add("w", Tensor::vector(vec![0.3]));
    let decay = 0.9997;
    let mut ema = Ema::new(decay, &s)?;
    let mut shadow = 0.3;
    let mut ema_err = 0.0f64;
    for _ in 0..2000 {
        let w: f64 = r.random_range(-1.0..1.0);
        s.values_mut().for_each(|v| *v = Tensor::vector(vec![w]));
        ema.update(&s);
        shadow = decay * shadow + (1.0 - decay) * w;
        ema_err = ema_err.max((ema.shadow()[0].data()[0] - shadow).abs());
    }
    notes.push(format!("EMA vs recurrence {ema_err:.1e}"));
    Ok(verdict(
        sam_eq && hand && bounds && ema_err <= 1e-12,
        notes.join("; "),
    ))
}

struct HeadRun {
    untrained: f64,
    best: f64,
    epochs: usize,
}

fn run_head(data: &DatasetDir, head: HeadKind, seed: u64) -> Result<HeadRun> {
    let mut cfg = RunConfig::reference();
    cfg.model.head = head;
    cfg.seed = seed;
    let (arch, store) = build_model(&cfg, data)?;
    let untrained = mean_average_precision(
        &arch.scores(&store, &data.val.features, GateSource::Live)?,
        &data.val.labels,
    )?;
    let dir = tempfile::tempdir().map_err(|e| mlc_core::Error::Data(e.to_string()))?;
    let art = train_run(&cfg, data, dir.path())?;
    Ok(HeadRun {
        untrained,
        best: art.outcome.best_ema_map,
        epochs: art.outcome.log.len(),
    })
}

fn c5_end_to_end(dec: &HeadRun, plain: &HeadRun) -> Verdict {
    let pass = dec.best >= 0.95
        && (dec.best - plain.best).abs() <= 0.05
        && dec.best >= dec.untrained + 0.4
        && plain.best >= plain.untrained + 0.4
        && dec.epochs <= 50
        && plain.epochs <= 50;
    verdict(
        pass,
        format!(
            "decoder {:.4} (untrained {:.4}, {} epochs); plain {:.4} (untrained {:.4}, {} epochs)",
            dec.best, dec.untrained, dec.epochs, plain.best, plain.untrained, plain.epochs
        ),
    )
}

/// Multiset difference of (op, output shape) records.
fn op_diff(a: &Tape, b: &Tape) -> (Vec<String>, Vec<String>) {
    let count = |t: &Tape| {
        let mut m: BTreeMap<String, i64> = BTreeMap::new();
        for op in t.op_log() {
            *m.entry(format!("{}{:?}", op.name, op.output_shape))
                .or_default() += 1;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let mut extra = Vec::new();
    let mut missing = Vec::new();
    for key in ca.keys().chain(cb.keys()) {
        let d = ca.get(key).copied().unwrap_or(0) - cb.get(key).copied().unwrap_or(0);
        if d > 0 && !extra.contains(key) {
            extra.push(format!("{key} x{d}"));
        } else if d < 0 && !missing.contains(key) {
            missing.push(format!("{key} x{}", -d));
        }
    }
    extra.dedup();
    missing.dedup();
    (extra, missing)
}

fn c6_frozen_branch(data: &DatasetDir) -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;
    let dir = tempfile::tempdir().map_err(|e| mlc_core::Error::Data(e.to_string()))?;
    for head in [HeadKind::DecoderGat, HeadKind::Gat] {
        let mut cfg = RunConfig::reference();
        cfg.model.head = head;
        let (arch, store) = build_model(&cfg, data)?;
        let path = dir.path().join("frozen.json");
        arch.freeze(&store)?.save(&path)?;
        let frozen = FrozenWeights::load(&path)?;

        let mut max_diff = 0.0f64;
        let mut r = rng(6);
        for _ in 0..10 {
            let x = Tensor::randn(vec![4, 3, 8, 8], 1.0, &mut r);
            let live = forward_tape(&arch, &store, &x, GateSource::Live)?;
            let froz = forward_tape(&arch, &store, &x, GateSource::Frozen(&frozen))?;
            for (u, v) in live.1.data().iter().zip(froz.1.data()) {
                max_diff = max_diff.max((u - v).abs());
            }
        }

        // same input through the frozen model and through the graph-free
        // version of the same head
        let mut base_cfg = cfg.clone();
        base_cfg.model.head = if head == HeadKind::Gat {
            HeadKind::Plain
        } else {
            HeadKind::Decoder
        };
        let (base, base_store) = build_model(&base_cfg, data)?;
        let x = Tensor::randn(vec![4, 3, 8, 8], 1.0, &mut r);
        let (ft, _) = forward_tape(&arch, &store, &x, GateSource::Frozen(&frozen))?;
        let (bt, _) = forward_tape(&base, &base_store, &x, GateSource::Live)?;
        let (lt, _) = forward_tape(&arch, &store, &x, GateSource::Live)?;
        let (extra, missing) = op_diff(&ft, &bt);
        // the gated head may differ from its base only by the gating itself:
        // reshape w to [S, 1, 1] and one broadcast multiply over [B, S, h, w]
        let mut extra_sorted = extra.clone();
        extra_sorted.sort();
        let audit =
            extra_sorted == ["mul[4, 32, 4, 4] x1", "reshape[32, 1, 1] x1"] && missing.is_empty();
        pass &= max_diff == 0.0 && audit;
        notes.push(format!(
            "{head:?}: max |live - frozen| {max_diff:e}; frozen {} ops = graph-free {} + [{}]; live {} ops",
            ft.op_log().len(),
            bt.op_log().len(),
            extra.join(", "),
            lt.op_log().len(),
        ));
    }
    Ok(verdict(pass, notes.join("; ")))
}

fn forward_tape(
    arch: &Arch,
    store: &ParamStore,
    x: &Tensor,
    gate: GateSource,
) -> Result<(Tape, Tensor)> {
    let mut tape = Tape::new();
    let bound = store.bind_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let out = arch.forward(&mut tape, &bound, xv, gate)?;
    let v = tape.value(out).clone();
    Ok((tape, v))
}

fn c7_calibration(data: &DatasetDir) -> Result<Verdict> {
    // a briefly trained model's training-split confidences
    let mut cfg = RunConfig::reference();
    cfg.model.head = HeadKind::Plain;
    cfg.train.epochs = 2;
    let dir = tempfile::tempdir().map_err(|e| mlc_core::Error::Data(e.to_string()))?;
    let art = train_run(&cfg, data, dir.path())?;
    let (arch, _) = build_model(&cfg, data)?;
    let start = Instant::now();
    let conf = arch.predict(&art.outcome.best, &data.train.features, GateSource::Live)?;
    let k = data.train.num_classes();
    let cal = calibrate_thresholds(&conf, &data.train.labels, &default_grid())?;
    let base = evaluate(&conf, &data.train.labels, &vec![0.5; k])?;
    let tuned = evaluate(&conf, &data.train.labels, &cal.thresholds)?;
    let weak = (0..k).all(|j| tuned.f1[j] >= base.f1[j]);

    let mut r = rng(7);
    let (b, kk) = (200, 5);
    let y: Vec<f64> = (0..b * kk)
        .map(|i| f64::from(i % kk == (i / kk) % kk || r.random_bool(0.3)))
        .collect();
    let labels = Tensor::new(vec![b, kk], y)?;
    let scores = labels.map(|v| v * 0.4 + 0.05);
    let cal2 = calibrate_thresholds(&scores, &labels, &default_grid())?;
    let before = evaluate(&scores, &labels, &vec![0.5; kk])?.cf1;
    let after = evaluate(&scores, &labels, &cal2.thresholds)?.cf1;
    let elapsed = start.elapsed();
    Ok(verdict(
        weak && after - before >= 0.2 && elapsed < Duration::from_secs(5),
        format!(
            "train-split CF1 {:.4} -> {:.4}, every class weakly better: {weak}; shifted fixture CF1 {before:.3} -> {after:.3}; {:.2} s",
            base.cf1,
            tuned.cf1,
            elapsed.as_secs_f64()
        ),
    ))
}

fn c8_ablation(dec: &[HeadRun], plain: &[HeadRun]) -> Verdict {
    let mean = |v: &[HeadRun]| v.iter().map(|r| r.best).sum::<f64>() / v.len() as f64;
    let (d, p) = (mean(dec), mean(plain));
    let per_seed: Vec<String> = dec
        .iter()
        .zip(plain)
        .map(|(a, b)| format!("{:.4}/{:.4}", a.best, b.best))
        .collect();
    verdict(
        d >= p,
        format!(
            "mean val mAP decoder {d:.4} vs plain {p:.4} over {} seeds (per seed {})",
            dec.len(),
            per_seed.join(" ")
        ),
    )
}

fn c9_curves() -> Result<Verdict> {
    let at = |cfg: AamConfig, cos: f64| -> Result<(f64, f64)> {
        let p = aam_part_curves(&cfg, &[cos])?[0];
        Ok((p.pos_part, p.neg_part))
    };
    let base = AamConfig::default();
    let neg0 = at(base, 0.0)?.1;
    let neg_m = at(AamConfig { m: 0.3, ..base }, 0.0)?.1;
    let pos: Vec<f64> = [5.0, 17.0, 23.0]
        .iter()
        .map(|&s| at(AamConfig { s, ..base }, 0.5).map(|v| v.0))
        .collect::<Result<_>>()?;
    let steeper = pos.windows(2).all(|w| w[1] < w[0]);
    Ok(verdict(
        neg_m > neg0 && steeper,
        format!(
            "negative part at cos 0: m=0 {neg0:.4}, m=0.3 {neg_m:.4}; positive part at cos 0.5 for s=5,17,23: {:.3e} {:.3e} {:.3e}",
            pos[0], pos[1], pos[2]
        ),
    ))
}

fn report(
    n: usize,
    title: &str,
    budget: Option<Duration>,
    f: impl FnOnce() -> Result<Verdict>,
) -> bool {
    let start = Instant::now();
    let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = v.pass && in_time;
    let budget_note = budget.map_or(String::new(), |b| format!(" / {} s", b.as_secs()));
    println!(
        "criterion {n} [{}] {title}: {} ({:.2} s{budget_note})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= report(1, "loss identities", Some(secs(1)), c1_loss_identities);
    ok &= report(2, "gradient suite", Some(secs(60)), c2_gradients);
    ok &= report(3, "metric oracle", Some(secs(10)), c3_metric_oracle);
    ok &= report(4, "optimizer contracts", Some(secs(5)), c4_optimizers);

    let data = generate_synthetic(&SynthSpec::reference()).expect("reference data");
    let start = Instant::now();
    let runs: Result<Vec<(HeadRun, HeadRun)>> = (0..5)
        .map(|seed| {
            Ok((
                run_head(&data, HeadKind::Decoder, seed)?,
                run_head(&data, HeadKind::Plain, seed)?,
            ))
        })
        .collect();
    let training = start.elapsed();
    let runs = runs.map(|r| r.into_iter().unzip::<_, _, Vec<HeadRun>, Vec<HeadRun>>());
    // seed 0 is the end-to-end run; the budget applies to its share of the
    // training time
    ok &= report(5, "end-to-end learning", None, || {
        let (dec, plain) = runs.as_ref().map_err(clone_err)?;
        let mut v = c5_end_to_end(&dec[0], &plain[0]);
        let share = training.as_secs_f64() / 5.0;
        v.pass &= share < 600.0;
        v.detail
            .push_str(&format!("; about {share:.0} s of training / 600 s"));
        Ok(v)
    });
    ok &= report(6, "frozen graph branch", None, || c6_frozen_branch(&data));
    ok &= report(7, "calibration", None, || c7_calibration(&data));
    ok &= report(8, "ablation shape", None, || {
        let (dec, plain) = runs.as_ref().map_err(clone_err)?;
        Ok(c8_ablation(dec, plain))
    });
    ok &= report(9, "loss curve shape", Some(secs(1)), c9_curves);

    if !ok {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

fn clone_err(e: &mlc_core::Error) -> mlc_core::Error {
    mlc_core::Error::Data(format!("training failed: {e}"))
}
