//! Two-stage optimisation: the codec first, then the autoregressive model
//! against a frozen codec.

mod ar_stage;
mod codec_stage;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use codec_stage::{evaluate_codec, train_codec, CodecData, CodecEval};
pub use ar_stage::{evaluate_ar, train_ar, ArData, ArEval, ArSample};
pub use optim::{adamw_step, adamw_step_masked, clip_grad_norm, lr_at, AdamState, AdamW, TrainConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint, strip_prefix};
use crate::error::{format_err, Error, Result};
use crate::numerics::{Gradients, ParamStore, Tensor};

/// `step,term,value` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<(usize, String, f64)>,
}

impl Trace {
    pub fn push(&mut self, step: usize, term: &str, value: f64) {
        self.rows.push((step, term.to_string(), value));
    }

    pub fn series(&self, term: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == term).map(|r| (r.0, r.2)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,term,value\n");
        for (step, term, v) in &self.rows {
            writeln!(s, "{step},{term},{v:e}").expect("string write");
        }
        s
    }

    /// Appends rows to a CSV file, writing the header for a new file.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let csv = self.to_csv();
        let body = if fresh { &csv[..] } else { &csv["step,term,value\n".len()..] };
        f.write_all(body.as_bytes())?;
        Ok(())
    }
}

/// Optimiser moments plus the next step to run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub adam: AdamState<f32>,
    pub next_step: usize,
}

impl OptimState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        OptimState { adam: AdamState::zeros(store), next_step: 0 }
    }

    pub fn save(&self, store: &ParamStore<f32>, path: &Path) -> Result<()> {
        let mut t = Vec::new();
        for (p, (m, v)) in store.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            t.push((format!("adam.m.{}", p.name), m.clone()));
            t.push((format!("adam.v.{}", p.name), v.clone()));
        }
        t.push(("adam.step".into(), Tensor::new(vec![2], split_u64(self.adam.step))?));
        t.push(("adam.next".into(), Tensor::new(vec![2], split_u64(self.next_step as u64))?));
        save_checkpoint(path, &t)
    }

    pub fn load(store: &ParamStore<f32>, path: &Path) -> Result<Self> {
        let all = load_checkpoint(path)?;
        let m = strip_prefix(&all, "adam.m.");
        let v = strip_prefix(&all, "adam.v.");
        let scalars = strip_prefix(&all, "adam.");
        let get = |map: &std::collections::BTreeMap<String, Tensor<f32>>, name: &str| {
            map.get(name).cloned().ok_or_else(|| Error::State(format!("optimizer state lacks `{name}`")))
        };
        let mut adam = AdamState::zeros(store);
        for (i, p) in store.iter().enumerate() {
            adam.m[i] = get(&m, &p.name)?;
            adam.v[i] = get(&v, &p.name)?;
            if adam.m[i].shape() != p.value.shape() || adam.v[i].shape() != p.value.shape() {
                return Err(format_err!("optimizer state for `{}` has the wrong shape", p.name));
            }
        }
        adam.step = join_u64(&get(&scalars, "step")?)?;
        let next_step = join_u64(&get(&scalars, "next")?)? as usize;
        Ok(OptimState { adam, next_step })
    }
}

fn split_u64(x: u64) -> Vec<f32> {
    // raw bit patterns, so the counter survives exactly
    vec![f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)]
}

fn join_u64(t: &Tensor<f32>) -> Result<u64> {
    match t.data() {
        [lo, hi] => Ok(lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)),
        _ => Err(format_err!("bad counter tensor")),
    }
}

/// What a hook sees after every optimiser step.
pub struct StepInfo<'a> {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub terms: &'a [(&'static str, f64)],
    pub store: &'a ParamStore<f32>,
}

/// Called after each step; returning `true` stops training early.
pub type Hook<'h> = dyn FnMut(&StepInfo<'_>) -> Result<bool> + 'h;

/// Batch indices for `step`, a pure function of the seed so runs resume
/// exactly.
fn batch_for(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    if batch <= n {
        let mut v = sample(&mut rng, n, batch).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Shared optimisation loop. `sample` runs example `i` at `step` and returns
/// its gradients with named scalar terms.
fn run_loop(
    store: &mut ParamStore<f32>,
    state: &mut OptimState,
    cfg: &TrainConfig,
    n: usize,
    trace: &mut Trace,
    active: Option<&[bool]>,
    mut sample_fn: impl FnMut(&ParamStore<f32>, usize, usize) -> Result<(Gradients<f32>, Vec<(&'static str, f64)>)>,
    mut hook: Option<&mut Hook<'_>>,
) -> Result<()> {
    cfg.validate()?;
    if n == 0 {
        return Err(crate::error::contract_err!("training set is empty"));
    }
    let opt = AdamW::default();
    while state.next_step < cfg.iterations {
        let step = state.next_step;
        let lr = lr_at(step, cfg)?;
        store.zero_grad();
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        let batch = batch_for(cfg.seed, step, n, cfg.batch_size);
        for &i in &batch {
            let (g, terms) = sample_fn(store, i, step)?;
            g.accumulate_into(store);
            if sums.is_empty() {
                sums = terms.iter().map(|&(k, _)| (k, 0.0)).collect();
            }
            for (s, (_, v)) in sums.iter_mut().zip(&terms) {
                s.1 += v;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        store.scale_grads(inv as f32);
        for s in &mut sums {
            s.1 *= inv;
        }
        if let Some(a) = active {
            for (p, &on) in store.iter_mut().zip(a) {
                if !on {
                    p.grad.data_mut().fill(0.0);
                }
            }
        }
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_grad_norm(store, c),
            None => store.grad_norm() as f64,
        };
        adamw_step_masked(store, &mut state.adam, &opt, lr, cfg.weight_decay, active)?;
        for &(k, v) in &sums {
            trace.push(step, k, v);
        }
        trace.push(step, "grad_norm", grad_norm);
        state.next_step += 1;
        if let Some(h) = hook.as_deref_mut() {
            if h(&StepInfo { step, lr, grad_norm, terms: &sums, store })? {
                break;
            }
        }
    }
    Ok(())
}
