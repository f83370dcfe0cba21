use serde::{Deserialize, Serialize};

use crate::numkernel::{
    optimizer_step, randn, Binding, KernelError, LrSchedule, NodeId, OptimState, ParamSet, SplitMix64, Tape, Tensor,
};

use super::MoeError;

/// MLP modality classifier shape. Depth 1 is a single linear map; depth 2
/// adds a GeLU hidden layer of width `hidden`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub depth: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub n_out: usize,
}

impl RouterConfig {
    pub fn new(depth: usize, d_in: usize, n_out: usize) -> Self {
        Self {
            depth,
            d_in,
            hidden: d_in,
            n_out,
        }
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if !(1..=2).contains(&self.depth) || self.d_in == 0 || self.n_out == 0 || self.hidden == 0 {
            return Err(MoeError::Config(format!("invalid router shape {self:?}")));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every router parameter.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut v = Vec::new();
        if self.depth == 1 {
            v.push(("router.fc1.weight".to_string(), self.d_in, self.n_out));
            v.push(("router.fc1.bias".to_string(), 1, self.n_out));
        } else {
            v.push(("router.fc1.weight".to_string(), self.d_in, self.hidden));
            v.push(("router.fc1.bias".to_string(), 1, self.hidden));
            v.push(("router.fc2.weight".to_string(), self.hidden, self.n_out));
            v.push(("router.fc2.bias".to_string(), 1, self.n_out));
        }
        v
    }
}

/// The modality router and its weights (`router.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub config: RouterConfig,
    pub params: ParamSet,
    pub frozen: bool,
}

impl Router {
    pub fn new(config: RouterConfig, seed: u64) -> Result<Self, MoeError> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed).fork_str("router");
        let mut params = ParamSet::new();
        for (name, r, c) in config.layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&[r, c])
            } else {
                randn(&mut rng, &[r, c], 1.0 / (r as f64).sqrt())
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    /// All-zero weights; every token gets uniform logits.
    pub fn zeroed(config: RouterConfig) -> Result<Self, MoeError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, r, c) in config.layout() {
            params.insert(name, Tensor::zeros(&[r, c]))?;
        }
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for n in names {
            self.params.set_frozen(&n, true).expect("own name");
        }
    }

    /// Copies the weights out of a model parameter set.
    pub fn from_params(config: RouterConfig, params: &ParamSet) -> Result<Self, MoeError> {
        let mut own = ParamSet::new();
        for (name, _, _) in config.layout() {
            own.insert(name.clone(), params.tensor(&name)?.clone())?;
        }
        Ok(Self {
            config,
            params: own,
            frozen: true,
        })
    }
}

/// Router MLP on the tape: `x (tokens x d_in) -> tokens x n_out`.
pub fn router_forward(
    tape: &mut Tape<'_>,
    bind: &Binding,
    config: &RouterConfig,
    x: NodeId,
) -> Result<NodeId, KernelError> {
    let affine = |tape: &mut Tape<'_>, x: NodeId, p: &str| -> Result<NodeId, KernelError> {
        let w = bind.get(&format!("router.{p}.weight"))?;
        let b = bind.get(&format!("router.{p}.bias"))?;
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    };
    let h = affine(tape, x, "fc1")?;
    if config.depth == 1 {
        return Ok(h);
    }
    let h = tape.gelu(h);
    affine(tape, h, "fc2")
}

/// Per-token and mean-pooled router outputs for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterLogits {
    pub per_token: Tensor,
    pub sequence: Vec<f64>,
    pub prediction: usize,
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn router_logits(embeddings: &Tensor, router: &Router) -> Result<RouterLogits, MoeError> {
    if embeddings.cols() != router.config.d_in {
        return Err(MoeError::Dimension(format!(
            "embedding width {} vs router input {}",
            embeddings.cols(),
            router.config.d_in
        )));
    }
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &router.params);
    let x = tape.leaf_ref(embeddings, false);
    let out = router_forward(&mut tape, &bind, &router.config, x)?;
    let pooled = tape.mean_rows(out);
    tape.check_finite()?;
    let sequence = tape.value(pooled).data().to_vec();
    Ok(RouterLogits {
        per_token: tape.value(out).clone(),
        prediction: argmax(&sequence),
        sequence,
    })
}

/// One labeled router training input: layer-0 token embeddings and a class.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterExample {
    pub embeddings: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Full-batch cross-entropy on mean-pooled logits; returns the router frozen.
pub fn train_router(
    mut router: Router,
    examples: &[RouterExample],
    cfg: &RouterTrainConfig,
) -> Result<(Router, RouterTrainReport), MoeError> {
    if examples.is_empty() {
        return Err(MoeError::EmptySubset);
    }
    if let Some(bad) = examples.iter().find(|e| e.label >= router.config.n_out) {
        return Err(MoeError::BadLabel(bad.label));
    }
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: 0,
        total_steps: cfg.steps as u64,
        min_lr: 0.0,
    };
    let mut state = OptimState::new(schedule, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let grads = {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &router.params);
            let mut terms = Vec::with_capacity(examples.len());
            for ex in examples {
                let x = tape.leaf_ref(&ex.embeddings, false);
                let out = router_forward(&mut tape, &bind, &router.config, x)?;
                let pooled = tape.mean_rows(out);
                terms.push(tape.cross_entropy(pooled, &[(0, ex.label)]));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t);
            }
            let loss = tape.scale(total, 1.0 / terms.len() as f64);
            losses.push(tape.value(loss).item());
            let g = tape.backward(loss)?;
            bind.collect(&g, &router.params)
        };
        optimizer_step(&mut router.params, &grads, &mut state)?;
    }
    let correct = examples
        .iter()
        .map(|ex| router_logits(&ex.embeddings, &router).map(|r| (r.prediction == ex.label) as usize))
        .sum::<Result<usize, _>>()?;
    router.freeze();
    Ok((
        router,
        RouterTrainReport {
            losses,
            train_accuracy: correct as f64 / examples.len() as f64,
        },
    ))
}
