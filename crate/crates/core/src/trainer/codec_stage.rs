use super::{run_loop, Hook, OptimState, Trace, TrainConfig};
use crate::codec::{CodecModel, Frozen};
use crate::dataset::{window_split, MotionClip};
use crate::error::{contract_err, Result};
use crate::metrics::lve;
use crate::motion::{FlameBasis, MotionWindow, VertexMask, VertexModel};
use crate::numerics::{Tape, Tensor};

/// Windowed motion for stage 1.
pub struct CodecData {
    pub windows: Vec<(MotionWindow, MotionWindow)>,
    pub vertices: VertexModel<f32>,
    pub mask: VertexMask,
}

impl CodecData {
    pub fn from_clips(clips: &[MotionClip], k: usize, basis: &FlameBasis, beta: &[f32], mask: &VertexMask) -> Result<Self> {
        if clips.is_empty() {
            return Err(contract_err!("no clips to train on"));
        }
        mask.validate(basis.vertex_count())?;
        let mut windows = Vec::new();
        for clip in clips {
            for s in window_split(clip, k, None, 0)? {
                windows.push((s.prev, s.cur));
            }
        }
        Ok(CodecData { windows, vertices: basis.vertex_model(beta)?, mask: mask.clone() })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Minimises the stage-1 objective from `state.next_step` up to
/// `cfg.iterations`.
pub fn train_codec(
    model: &mut CodecModel,
    data: &CodecData,
    cfg: &TrainConfig,
    state: &mut OptimState,
    hook: Option<&mut Hook<'_>>,
) -> Result<Trace> {
    let mut trace = Trace::default();
    let codec = model.codec.clone();
    let lips = data.mask.lips.clone();
    run_loop(
        &mut model.store,
        state,
        cfg,
        data.len(),
        &mut trace,
        None,
        |store, i, _| {
            let (prev, cur) = &data.windows[i];
            let mut tape = Tape::new(store);
            let out = codec.forward_train(&mut tape, prev.frames(), cur.frames(), &data.vertices, &lips, &mut Frozen::off())?;
            let b = out.loss.values(&tape);
            let g = tape.backward(out.loss.total)?;
            Ok((g, vec![("recon", b.recon), ("vel", b.vel), ("smooth", b.smooth), ("cb", b.cb), ("total", b.total)]))
        },
        hook,
    )?;
    Ok(trace)
}

/// Full-pass reconstruction quality with ground-truth context.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CodecEval {
    /// Mean absolute parameter error.
    pub mae: f64,
    pub recon: f64,
    pub lve: f64,
}

pub fn evaluate_codec(model: &CodecModel, data: &CodecData) -> Result<CodecEval> {
    let mut acc = CodecEval::default();
    for (prev, cur) in &data.windows {
        let mut tape = Tape::new(&model.store);
        let out = model.codec.forward_train(&mut tape, prev.frames(), cur.frames(), &data.vertices, &data.mask.lips, &mut Frozen::off())?;
        let m_hat: &Tensor<f32> = tape.value(out.m_hat);
        acc.mae += m_hat.zip_map(cur.frames(), |a, b| (a - b).abs())?.data().iter().map(|&x| x as f64).sum::<f64>() / m_hat.len() as f64;
        acc.recon += out.loss.values(&tape).recon;
        let v_hat = data.vertices.vertices(m_hat)?;
        let v = data.vertices.vertices(cur.frames())?;
        acc.lve += lve(&v_hat, &v, &data.mask.lips)?;
    }
    let n = data.len() as f64;
    Ok(CodecEval { mae: acc.mae / n, recon: acc.recon / n, lve: acc.lve / n })
}
