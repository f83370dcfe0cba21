//! Randomized finite-difference suite over every differentiable tape
//! operation and the composite blocks built from them.
//!
//! Each case draws fresh shapes and values per trial, reduces the output to a
//! scalar through a fixed random weighting, and compares reverse-mode
//! gradients of every input against central differences.

use std::collections::BTreeMap;

use medmoe::backbone::{Model, ModelConfig, Net, TransformerConfig, VisionConfig};
use medmoe::moe::{expand_from_dense, gate, moe_forward, ExpandOptions, Router, RouterConfig, RouterMode};
use medmoe::numkernel::{
    finite_difference_check, finite_difference_check_sampled, randn, Binding, KernelError, NodeId, ParamSet,
    SplitMix64, Tape, Tensor,
};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error seen for one case across all its trials.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

/// `sum(w * y)` with `w` drawn from a seed fixed for the whole trial, so the
/// reduction is identical across the perturbed evaluations.
fn weighted_sum(tape: &mut Tape<'_>, y: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(y).shape().to_vec();
    let w = randn(&mut SplitMix64::new(seed), &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w);
    tape.sum(p)
}

fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in entries {
        p.insert(name, t).unwrap();
    }
    p
}

fn dim(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

type Build = fn(&mut SplitMix64) -> (ParamSet, Box<dyn Fn(&mut Tape<'_>, &Binding) -> Result<NodeId, KernelError>>);

fn unary(
    rng: &mut SplitMix64,
    op: fn(&mut Tape<'_>, NodeId) -> NodeId,
) -> (ParamSet, Box<dyn Fn(&mut Tape<'_>, &Binding) -> Result<NodeId, KernelError>>) {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let seed = rng.next_u64();
    let p = params(vec![("x", randn(rng, &[m, n], 1.0))]);
    (
        p,
        Box::new(move |t, b| {
            let y = op(t, b.get("x")?);
            Ok(weighted_sum(t, y, seed))
        }),
    )
}

fn binary(
    rng: &mut SplitMix64,
    shapes: fn(&mut SplitMix64) -> ([usize; 2], [usize; 2]),
    op: fn(&mut Tape<'_>, NodeId, NodeId) -> NodeId,
) -> (ParamSet, Box<dyn Fn(&mut Tape<'_>, &Binding) -> Result<NodeId, KernelError>>) {
    let (sa, sb) = shapes(rng);
    let seed = rng.next_u64();
    let p = params(vec![("a", randn(rng, &sa, 1.0)), ("b", randn(rng, &sb, 1.0))]);
    (
        p,
        Box::new(move |t, b| {
            let y = op(t, b.get("a")?, b.get("b")?);
            Ok(weighted_sum(t, y, seed))
        }),
    )
}

fn same(rng: &mut SplitMix64) -> ([usize; 2], [usize; 2]) {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    ([m, n], [m, n])
}

fn primitive_cases() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |r| {
            binary(
                r,
                |r| {
                    let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                    ([m, k], [k, n])
                },
                |t, a, b| t.matmul(a, b),
            )
        }),
        ("matmul_nt", |r| {
            binary(
                r,
                |r| {
                    let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                    ([m, k], [n, k])
                },
                |t, a, b| t.matmul_nt(a, b),
            )
        }),
        ("add", |r| binary(r, same, |t, a, b| t.add(a, b))),
        ("mul", |r| binary(r, same, |t, a, b| t.mul(a, b))),
        ("add_row", |r| {
            binary(
                r,
                |r| {
                    let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
                    ([m, n], [1, n])
                },
                |t, a, b| t.add_row(a, b),
            )
        }),
        ("mul_col", |r| {
            binary(
                r,
                |r| {
                    let (m, n) = (dim(r, 1, 4), dim(r, 1, 5));
                    ([m, n], [m, 1])
                },
                |t, a, b| t.mul_col(a, b),
            )
        }),
        ("concat_rows", |r| {
            binary(
                r,
                |r| {
                    let n = dim(r, 1, 4);
                    ([dim(r, 1, 3), n], [dim(r, 1, 3), n])
                },
                |t, a, b| t.concat_rows(&[a, b]),
            )
        }),
        ("concat_cols", |r| {
            binary(
                r,
                |r| {
                    let m = dim(r, 1, 4);
                    ([m, dim(r, 1, 3)], [m, dim(r, 1, 3)])
                },
                |t, a, b| t.concat_cols(&[a, b]),
            )
        }),
        ("scale", |r| unary(r, |t, x| t.scale(x, -1.7))),
        ("gelu", |r| unary(r, |t, x| t.gelu(x))),
        ("relu", |r| unary(r, |t, x| t.relu(x))),
        ("softmax", |r| unary(r, |t, x| t.softmax(x, false))),
        ("causal_softmax", |r| unary(r, |t, x| t.softmax(x, true))),
        ("mean_rows", |r| unary(r, |t, x| t.mean_rows(x))),
        ("sum", |r| unary(r, |t, x| t.sum(x))),
        ("mean", |r| unary(r, |t, x| t.mean(x))),
        ("slice_cols", |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
            let start = r.below(n - 1);
            let end = start + 1 + r.below(n - start - 1);
            let seed = r.next_u64();
            let p = params(vec![("x", randn(r, &[m, n], 1.0))]);
            (
                p,
                Box::new(move |t, b| {
                    let y = t.slice_cols(b.get("x")?, start, end);
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("layer_norm", |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
            let seed = r.next_u64();
            let p = params(vec![
                ("x", randn(r, &[m, n], 1.0)),
                ("gamma", randn(r, &[1, n], 1.0)),
                ("beta", randn(r, &[1, n], 1.0)),
            ]);
            (
                p,
                Box::new(move |t, b| {
                    let y = t.layer_norm(b.get("x")?, b.get("gamma")?, b.get("beta")?);
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("gather", |r| {
            let (v, n) = (dim(r, 2, 6), dim(r, 1, 4));
            let rows: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.below(v)).collect();
            let seed = r.next_u64();
            let p = params(vec![("table", randn(r, &[v, n], 1.0))]);
            (
                p,
                Box::new(move |t, b| {
                    let y = t.gather(b.get("table")?, &rows);
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("index_add", |r| {
            let (m, n) = (dim(r, 2, 5), dim(r, 1, 4));
            let mut rows: Vec<usize> = (0..m).collect();
            r.shuffle(&mut rows);
            rows.truncate(dim(r, 1, m));
            let seed = r.next_u64();
            let p = params(vec![("base", randn(r, &[m, n], 1.0)), ("src", randn(r, &[rows.len(), n], 1.0))]);
            (
                p,
                Box::new(move |t, b| {
                    let y = t.index_add(b.get("base")?, b.get("src")?, &rows);
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("cross_entropy", |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
            let mut targets = Vec::new();
            for i in 0..m {
                if r.below(3) > 0 {
                    targets.push((i, r.below(n)));
                }
            }
            let targets = if targets.is_empty() { vec![(0, 0)] } else { targets };
            let p = params(vec![("logits", randn(r, &[m, n], 2.0))]);
            (p, Box::new(move |t, b| Ok(t.cross_entropy(b.get("logits")?, &targets))))
        }),
        ("topk_softmax", |r| {
            let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
            let k = dim(r, 1, n);
            let seed = r.next_u64();
            let p = params(vec![("logits", randn(r, &[m, n], 2.0))]);
            (
                p,
                Box::new(move |t, b| {
                    let y = t.topk_softmax(b.get("logits")?, k);
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
    ]
}

/// A small dense model whose weights are perturbed away from their
/// initialization so every coordinate has a non-trivial gradient.
fn block_model(rng: &mut SplitMix64) -> Model {
    let heads = 1 + rng.below(2);
    let cfg = ModelConfig {
        transformer: TransformerConfig {
            d_model: 4 * heads,
            n_layers: 1,
            n_heads: heads,
            ffn_hidden: dim(rng, 3, 8),
            vocab_size: 8,
            max_seq_len: 8,
            moe_layer_indices: vec![],
        },
        vision: VisionConfig {
            image_size: 4,
            patch_size: 2,
            d_vision: dim(rng, 2, 5),
        },
    };
    let mut m = Model::init(cfg, rng.next_u64()).unwrap();
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for n in names {
        let t = m.params.get_mut(&n).unwrap();
        let noise = randn(rng, t.shape(), 0.3);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
    m
}

/// The parameters of `model` under `prefix`, plus the block input as `x`.
fn block_params(model: &Model, prefix: &str, x: Tensor) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, param) in model.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        p.insert(name, param.tensor.clone()).unwrap();
    }
    p.insert("x", x).unwrap();
    p
}

type Composite = fn(&mut SplitMix64) -> (ParamSet, Box<dyn Fn(&mut Tape<'_>, &Binding) -> Result<NodeId, KernelError>>);

fn composite_cases() -> Vec<(&'static str, Composite)> {
    vec![
        ("projector", |r| {
            let m = block_model(r);
            let tokens = dim(r, 1, 5);
            let x = randn(r, &[tokens, m.config.vision.d_vision], 1.0);
            let seed = r.next_u64();
            (
                block_params(&m, "projector.", x),
                Box::new(move |t, b| {
                    let lora = BTreeMap::new();
                    let mut net = Net::new(t, b, &lora);
                    let x = net.param("x")?;
                    let h = net.linear(x, "projector.fc1")?;
                    let h = net.tape.gelu(h);
                    let y = net.linear(h, "projector.fc2")?;
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("attention", |r| {
            let m = block_model(r);
            let (d, heads) = (m.d_model(), m.config.transformer.n_heads);
            let rows = dim(r, 1, 6);
            let x = randn(r, &[rows, d], 1.0);
            let seed = r.next_u64();
            (
                block_params(&m, "llm.layers.0.attn.", x),
                Box::new(move |t, b| {
                    let lora = BTreeMap::new();
                    let mut net = Net::new(t, b, &lora);
                    let x = net.param("x")?;
                    let y = net.causal_attention(x, "llm.layers.0.attn", heads)?;
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("ffn", |r| {
            let m = block_model(r);
            let rows = dim(r, 1, 6);
            let x = randn(r, &[rows, m.d_model()], 1.0);
            let seed = r.next_u64();
            (
                block_params(&m, "llm.layers.0.ffn.", x),
                Box::new(move |t, b| {
                    let lora = BTreeMap::new();
                    let mut net = Net::new(t, b, &lora);
                    let x = net.param("x")?;
                    let y = net.ffn(x, "llm.layers.0.ffn")?;
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
        ("moe_layer_fixed_gates", |r| {
            let dense = block_model(r);
            let d = dense.d_model();
            let e = dim(r, 2, 4);
            let k = dim(r, 1, e);
            let router = Router::new(RouterConfig::new(1, d, e), r.next_u64()).unwrap();
            let opts = ExpandOptions {
                num_experts: e,
                top_k: k,
                layers: vec![0],
                meta_expert: r.below(2) == 0,
                router_mode: RouterMode::Frozen,
                aux_loss_coef: 0.0,
            };
            let mut moe = expand_from_dense(&dense, &router, &opts).unwrap();
            // Break the copy symmetry between experts.
            let names: Vec<String> = moe.params.names().filter(|n| n.contains(".moe.")).map(str::to_string).collect();
            for n in names {
                let t = moe.params.get_mut(&n).unwrap();
                let noise = randn(r, t.shape(), 0.3);
                for (v, z) in t.data_mut().iter_mut().zip(noise.data()) {
                    *v += z;
                }
            }
            let tokens = dim(r, 1, 6);
            let x = randn(r, &[tokens, d], 1.0);
            let decision = gate(&randn(r, &[tokens, e], 2.0), k).unwrap();
            let spec = moe.moe.clone().unwrap();
            let seed = r.next_u64();
            (
                block_params(&moe, "llm.layers.0.moe.", x),
                Box::new(move |t, b| {
                    let lora = BTreeMap::new();
                    let mut net = Net::new(t, b, &lora);
                    let x = net.param("x")?;
                    let y = moe_forward(&mut net, &spec, 0, x, &decision, None)?;
                    Ok(weighted_sum(t, y, seed))
                }),
            )
        }),
    ]
}

fn run_case(
    name: &'static str,
    build: Composite,
    trials: usize,
    seed: u64,
    sample: Option<usize>,
) -> CaseResult {
    let root = SplitMix64::new(seed).fork_str(name);
    let mut res = CaseResult {
        name,
        checked: 0,
        max_rel_error: 0.0,
    };
    for trial in 0..trials {
        let mut rng = root.fork(trial as u64);
        let (p, f) = build(&mut rng);
        let rep = match sample {
            None => finite_difference_check(|t, b| f(t, b), &p, EPS),
            Some(n) => finite_difference_check_sampled(|t, b| f(t, b), &p, EPS, n, trial as u64),
        }
        .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
        if std::env::var("GRADSUITE_DEBUG").is_ok() && rep.max_rel_error > 1e-5 {
            eprintln!("{name} trial {trial}: {:?}", rep.worst);
        }
        res.checked += rep.checked;
        res.max_rel_error = res.max_rel_error.max(rep.max_rel_error);
    }
    res
}

/// Every primitive with exhaustive coordinates, then every composite block
/// with a sample of coordinates per parameter.
pub fn run_suite(trials: usize, seed: u64) -> Vec<CaseResult> {
    let mut out: Vec<CaseResult> = primitive_cases()
        .into_iter()
        .map(|(name, build)| run_case(name, build, trials, seed, None))
        .collect();
    out.extend(
        composite_cases()
            .into_iter()
            .map(|(name, build)| run_case(name, build, trials, seed, Some(12))),
    );
    out
}
