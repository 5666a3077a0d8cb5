//! Training loop: deterministic batches, warmup/decay AdamW, gradient
//! clipping, periodic validation and best-checkpoint retention.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use speechlm_core::optim::{clip_grad_norm, AdamW, AdamWConfig, Moments, Schedule};
use speechlm_core::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, OPTIM_PREFIX};
use crate::config::StageConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub stage: StageConfig,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub seed: u64,
}

impl TrainSpec {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.stage.warmup,
            total_steps: self.stage.steps,
            peak_lr: self.stage.peak_lr,
        }
    }
}

/// What a model exposes to the loop.
pub trait Objective {
    fn train_size(&self) -> usize;

    /// Loss of the training items `batch`; `rng` is private to this step.
    fn batch_loss(&self, g: &mut Graph<'_, f32>, batch: &[usize], rng: &mut ChaCha8Rng) -> speechlm_core::Result<Var>;

    fn validation_loss(&self, store: &ParamStore<f32>) -> speechlm_core::Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogPoint {
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub opt: AdamW<f32>,
    pub best_loss: f64,
    pub best_step: u64,
    pub best: Vec<(ParamId, Tensor<f32>)>,
    pub history: Vec<LogPoint>,
    /// Running sum and count of training losses since the last log point.
    pub pending: (f64, u64),
}

impl TrainState {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            step: 0,
            opt: AdamW::new(AdamWConfig {
                weight_decay,
                ..Default::default()
            }),
            best_loss: f64::INFINITY,
            best_step: 0,
            best: Vec::new(),
            history: Vec::new(),
            pending: (0.0, 0),
        }
    }

    pub fn final_valid_loss(&self) -> Option<f64> {
        self.history.last().map(|p| p.valid_loss)
    }

    /// Model weights plus optimizer state in one checkpoint.
    pub fn to_checkpoint(&self, store: &ParamStore<f32>, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::from_store(store, serde_json::Value::Null);
        for (id, m) in &self.opt.state {
            let name = &store.get(*id).name;
            ck.push(format!("{OPTIM_PREFIX}m.{name}"), &m.m, false);
            ck.push(format!("{OPTIM_PREFIX}v.{name}"), &m.v, false);
        }
        for (id, t) in &self.best {
            ck.push(format!("{OPTIM_PREFIX}best.{}", store.get(*id).name), t, false);
        }
        ck.metadata = json!({
            "step": self.step,
            "optimizer_step": self.opt.step,
            "best_loss": if self.best_loss.is_finite() { json!(self.best_loss) } else { json!(null) },
            "best_step": self.best_step,
            "history": self.history,
            "pending": [self.pending.0, self.pending.1],
            "extra": extra,
        });
        ck
    }

    /// Restore weights into `store` and rebuild the state.
    pub fn from_checkpoint(ck: &Checkpoint, store: &mut ParamStore<f32>, weight_decay: f64) -> Result<Self> {
        ck.load_into(store, "")?;
        let meta = &ck.metadata;
        let num = |k: &str| meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Config(format!("checkpoint metadata lacks {k}")));
        let mut st = Self::new(weight_decay);
        st.step = num("step")?;
        st.opt.step = num("optimizer_step")?;
        st.best_step = num("best_step")?;
        st.best_loss = meta.get("best_loss").and_then(|v| v.as_f64()).unwrap_or(f64::INFINITY);
        st.history = serde_json::from_value(meta.get("history").cloned().unwrap_or_default())?;
        if let Some(p) = meta.get("pending").and_then(|v| v.as_array()) {
            st.pending = (p[0].as_f64().unwrap_or(0.0), p[1].as_u64().unwrap_or(0));
        }
        let find = |name: &str| -> Result<ParamId> {
            store.id(name).ok_or_else(|| Error::UnknownTensors(vec![name.to_string()]))
        };
        let m_prefix = format!("{OPTIM_PREFIX}m.");
        let best_prefix = format!("{OPTIM_PREFIX}best.");
        for e in &ck.entries {
            if let Some(name) = e.name.strip_prefix(&m_prefix) {
                let id = find(name)?;
                let v = ck
                    .get(&format!("{OPTIM_PREFIX}v.{name}"))
                    .ok_or_else(|| Error::Config(format!("second moment of {name} missing")))?;
                st.opt.state.insert(
                    id,
                    Moments {
                        m: e.data.to_tensor(),
                        v: v.data.to_tensor(),
                    },
                );
            } else if let Some(name) = e.name.strip_prefix(&best_prefix) {
                st.best.push((find(name)?, e.data.to_tensor()));
            }
        }
        Ok(st)
    }
}

/// Batch of distinct training indices for `step`, a pure function of
/// `(seed, step)`, plus the step's private generator.
pub fn batch_for_step(seed: u64, step: u64, n: usize, batch: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let k = batch.min(n);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    (idx, rng)
}

fn snapshot(store: &ParamStore<f32>) -> Vec<(ParamId, Tensor<f32>)> {
    store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, p)| (id, p.tensor.clone()))
        .collect()
}

/// Run until `spec.stage.steps` (or `stop_at`, whichever is first),
/// continuing from `state`. On completion the best-validation weights are
/// restored into `store`.
pub fn train(
    store: &mut ParamStore<f32>,
    obj: &dyn Objective,
    spec: &TrainSpec,
    mut state: TrainState,
    stop_at: Option<u64>,
    log: &mut dyn FnMut(&LogPoint),
) -> Result<TrainState> {
    let sched = spec.schedule();
    let total = spec.stage.steps;
    let end = stop_at.map_or(total, |s| s.min(total));
    if obj.train_size() == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    while state.step < end {
        let step = state.step + 1;
        let (batch, mut rng) = batch_for_step(spec.seed, step, obj.train_size(), spec.batch_size);
        let loss = {
            let mut g = Graph::new(store);
            let loss = obj.batch_loss(&mut g, &batch, &mut rng)?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            drop(g);
            store.zero_grad();
            store.accumulate(&grads)?;
            value
        };
        if !loss.is_finite() {
            return Err(speechlm_core::Error::NonFinite(format!("training loss {loss} at step {step}")).into());
        }
        clip_grad_norm(store, spec.clip_norm)?;
        let lr = sched.lr_at(step);
        state.opt.step(store, lr)?;
        state.step = step;
        state.pending.0 += loss;
        state.pending.1 += 1;
        if step % spec.eval_every.max(1) == 0 || step == total {
            let valid = obj.validation_loss(store)?;
            let point = LogPoint {
                step,
                train_loss: state.pending.0 / state.pending.1 as f64,
                valid_loss: valid,
                lr,
            };
            state.pending = (0.0, 0);
            log(&point);
            state.history.push(point);
            if valid < state.best_loss {
                state.best_loss = valid;
                state.best_step = step;
                state.best = snapshot(store);
            }
        }
    }
    if state.step == total {
        for (id, t) in &state.best {
            store.set_tensor(*id, t.clone())?;
        }
    }
    Ok(state)
}
