//! Orchestration: streaming inference over a video, the training loop, and
//! checkpoint persistence.
//!
//! Inference walks a frame sequence with persistent state (memory buffer,
//! previous features, decoder carry, previous flow). Every algorithm stage
//! appends one line to an event log, `t=<frame> step=<name>`, in the exact
//! order it executed, which makes the step order a testable artifact.
//!
//! Training streams clips the same way, adding a per-frame supervised loss
//! and a plain gradient step on the parameters with a linearly decaying
//! learning rate. The memory buffer is refined through the frozen network
//! exactly as at test time; the parameter pass treats the refined buffer as
//! a constant.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::{ConfigError, KvMap};
use crate::flow::{backward_warp, FlowError, FlowField};
#[cfg(test)]
use crate::flow::FlowDirection;
use crate::memory::{
    memory_gradient_update_with_events, MemoryError, MemoryState, UpdateInputs, UpdateStats,
};
use crate::metrics::{silog_on_tape, MetricsError};
use crate::model::{
    encode, full_forward, ArchConfig, ForwardSwitches, ModelError, ModelParams,
};
use crate::synthdata::{ClipSource, SynthError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

use indexmap::IndexMap;

/// Magnitude above which a flow component is treated as an invalidity
/// sentinel and zeroed before entering the network.
const FLOW_SANITY_LIMIT: f64 = 1e9;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MAMO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("no frames given")]
    NoFrames,
    #[error("{frames} frames need {} flows, got {flows}", frames - 1)]
    FlowCount { frames: usize, flows: usize },
    #[error("frame {t} shaped {got:?}, expected {expected:?}")]
    FrameShape {
        t: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("sequence of {have} frames cannot host a clip of length {len} at stride {r}")]
    ClipTooLong { have: usize, len: usize, r: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("epoch {epoch}, clip {clip}, frame {frame}: {source}")]
    TrainStep {
        epoch: usize,
        clip: usize,
        frame: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Ordered record of algorithm stages, one line per event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    lines: Vec<String>,
}

impl EventLog {
    pub fn push(&mut self, t: usize, step: &str) {
        self.lines.push(format!("t={t} step={step}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Only the step names of frame `t`, in order.
    pub fn steps_of(&self, t: usize) -> Vec<&str> {
        let prefix = format!("t={t} step=");
        self.lines
            .iter()
            .filter_map(|l| l.strip_prefix(&prefix))
            .collect()
    }
}

impl fmt::Display for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// How a stream run deviates from the full method.
#[derive(Debug, Clone, Copy)]
pub struct StreamOptions {
    pub switches: ForwardSwitches,
    /// Keep the buffer sliding but skip the gradient refinement.
    pub sliding_window: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            switches: ForwardSwitches::default(),
            sliding_window: false,
        }
    }
}

#[derive(Debug)]
pub struct StreamOutput<T: Scalar> {
    /// One depth map [1, 1, h, w] per input frame.
    pub depths: Vec<Tensor<T>>,
    pub events: EventLog,
    /// Gradient-update stats per frame that ran one, keyed by frame index.
    pub updates: Vec<(usize, UpdateStats)>,
}

/// Mutable per-sequence state threaded through a stream.
struct StreamState<T: Scalar> {
    memory: Option<MemoryState<T>>,
    /// Previous frame's raw encoder features, [1, c, h', w'].
    q_prev: Option<Tensor<T>>,
    /// Previous frame's decoder carry.
    carry: Option<Vec<Tensor<T>>>,
    /// Previous frame's flow as fed to the network (zero at the start).
    o_prev: Tensor<T>,
    prev_image: Option<Tensor<T>>,
}

impl<T: Scalar> StreamState<T> {
    fn fresh(h: usize, w: usize) -> Self {
        StreamState {
            memory: None,
            q_prev: None,
            carry: None,
            o_prev: Tensor::zeros(&[2, h, w]),
            prev_image: None,
        }
    }
}

/// Encoder features of one frame under frozen parameters, [1, c, h', w'].
fn encode_frame<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>, PipelineError> {
    let mut tape: Tape<T> = Tape::new();
    let mounted = params.mount(&mut tape, false);
    let s = image.shape();
    let batched = Tensor::new(vec![1, s[0], s[1], s[2]], image.data().to_vec())?;
    let img = tape.constant(batched);
    let q = encode(&mut tape, &mounted, params.arch(), img)?;
    Ok(tape.value(q).clone())
}

/// One inference forward pass; parameters and memory enter as constants.
struct DepthPass<T: Scalar> {
    depth: Tensor<T>,
    features: Tensor<T>,
    carry: Vec<Tensor<T>>,
}

fn depth_pass<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    memory: Option<&MemoryState<T>>,
    flow: Option<&Tensor<T>>,
    carry: Option<&[Tensor<T>]>,
    switches: ForwardSwitches,
) -> Result<DepthPass<T>, PipelineError> {
    let mut tape: Tape<T> = Tape::new();
    let mounted = params.mount(&mut tape, false);
    let mem_ids = memory.map(|m| m.mount(&mut tape, false));
    let out = full_forward(
        &mut tape,
        &mounted,
        params.arch(),
        image,
        mem_ids,
        flow,
        carry,
        switches,
    )?;
    Ok(DepthPass {
        depth: tape.value(out.depth).clone(),
        features: tape.value(out.features).clone(),
        carry: out.new_carry.iter().map(|&id| tape.value(id).clone()).collect(),
    })
}

/// Streams a video through the model. `flows[i]` is the backward flow of
/// frame i+1 (it maps frame i+1 onto frame i), so a sequence of n frames
/// takes n-1 flows. Parameters are never modified; the memory buffer is.
pub fn infer_stream<T: Scalar>(
    params: &ModelParams<T>,
    frames: &[Tensor<T>],
    flows: &[FlowField<T>],
    opts: StreamOptions,
) -> Result<StreamOutput<T>, PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::NoFrames);
    }
    if flows.len() != frames.len() - 1 {
        return Err(PipelineError::FlowCount {
            frames: frames.len(),
            flows: flows.len(),
        });
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(PipelineError::FrameShape {
            t: 0,
            got: shape.clone(),
            expected: vec![3, 0, 0],
        });
    }
    for (t, f) in frames.iter().enumerate() {
        if f.shape() != shape.as_slice() {
            return Err(PipelineError::FrameShape {
                t,
                got: f.shape().to_vec(),
                expected: shape.clone(),
            });
        }
    }
    let (h, w) = (shape[1], shape[2]);
    let arch = params.arch();
    let use_memory = opts.switches.use_memory;
    let limit = T::from_f64(FLOW_SANITY_LIMIT);

    let mut state = StreamState::<T>::fresh(h, w);
    let mut events = EventLog::default();
    let mut updates = Vec::new();
    let mut depths = Vec::with_capacity(frames.len());

    for (t, image) in frames.iter().enumerate() {
        let mut flow_t: Option<Tensor<T>> = None;
        if use_memory {
            if t == 0 {
                let q0 = encode_frame(params, image)?;
                events.push(0, "encode");
                state.memory = Some(MemoryState::init(arch, &q0, h, w)?);
                events.push(0, "init_memory");
            } else {
                let mem = state
                    .memory
                    .take()
                    .expect("memory initialized at frame 0");
                let q_prev = state.q_prev.as_ref().expect("features kept per frame");
                let mem = mem.slide(arch, q_prev, &state.o_prev)?;
                events.push(t, "intermediate_update");
                let field = &flows[t - 1];
                let o_t = field.sanitized_tensor(limit);
                if opts.sliding_window {
                    state.memory = Some(mem);
                } else {
                    let prev_image =
                        state.prev_image.as_ref().expect("previous frame kept");
                    let (warped, valid) = backward_warp(prev_image, field)?;
                    events.push(t, "warp");
                    let inputs = UpdateInputs {
                        image,
                        warped_image: &warped,
                        valid: &valid,
                        flow: Some(&o_t),
                        carry: state.carry.as_deref(),
                    };
                    let (mem, stats) = memory_gradient_update_with_events(
                        params,
                        &mem,
                        &inputs,
                        opts.switches,
                        &mut |step| events.push(t, step),
                    )?;
                    updates.push((t, stats));
                    state.memory = Some(mem);
                }
                flow_t = Some(o_t);
            }
        } else if t > 0 {
            flow_t = Some(flows[t - 1].sanitized_tensor(limit));
        }

        let pass = depth_pass(
            params,
            image,
            state.memory.as_ref(),
            flow_t.as_ref(),
            state.carry.as_deref(),
            opts.switches,
        )?;
        events.push(t, "depth");
        depths.push(pass.depth);
        state.q_prev = Some(pass.features);
        state.carry = Some(pass.carry);
        state.o_prev = flow_t.unwrap_or_else(|| Tensor::zeros(&[2, h, w]));
        state.prev_image = Some(image.clone());
    }
    Ok(StreamOutput {
        depths,
        events,
        updates,
    })
}

/// Clip frame indices {0, r, 2r, ..., len*r} into a longer sequence.
pub fn subsample_indices(
    total_frames: usize,
    len: usize,
    r: usize,
) -> Result<Vec<usize>, PipelineError> {
    if r == 0 || len * r + 1 > total_frames {
        return Err(PipelineError::ClipTooLong {
            have: total_frames,
            len,
            r: r.max(1),
        });
    }
    Ok((0..=len).map(|i| i * r).collect())
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clip length T; a clip spans T+1 frames.
    pub seq_len: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Largest frame stride drawn for subsampling.
    pub subsample_max: usize,
    pub seed: u64,
    /// Leading epochs trained as a bare monocular network; `None` means
    /// one fifth of the total.
    pub warmup_epochs: Option<usize>,
    /// Clips per parameter step. 1 steps after every frame; larger values
    /// accumulate gradients over the whole batch and step once.
    pub batch_size: usize,
    pub options: StreamOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            seq_len: 8,
            lr_start: 4e-5,
            lr_end: 4e-6,
            subsample_max: 4,
            seed: 0,
            warmup_epochs: None,
            batch_size: 1,
            options: StreamOptions::default(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "seq_len",
    "lr_start",
    "lr_end",
    "subsample_max",
    "seed",
    "warmup_epochs",
    "batch_size",
    "no_memory",
    "no_carry",
    "no_flow_decoder",
    "sliding_window",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seq_len < 2 {
            return Err(PipelineError::BadCheckpoint(format!(
                "seq_len must be at least 2, got {}",
                self.seq_len
            )));
        }
        if self.subsample_max < 1 || self.batch_size < 1 {
            return Err(PipelineError::BadCheckpoint(
                "subsample_max and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return Err(PipelineError::BadCheckpoint("non-finite learning rate".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<(), ConfigError> {
        let mut allowed: Vec<&str> = crate::model::ARCH_KEYS.to_vec();
        allowed.extend_from_slice(TRAIN_KEYS);
        kv.reject_unknown(&allowed)?;
        if let Some(v) = kv.get_parsed("epochs", "integer")? {
            self.epochs = v;
        }
        if let Some(v) = kv.get_parsed("seq_len", "integer")? {
            self.seq_len = v;
        }
        if let Some(v) = kv.get_parsed("lr_start", "float")? {
            self.lr_start = v;
        }
        if let Some(v) = kv.get_parsed("lr_end", "float")? {
            self.lr_end = v;
        }
        if let Some(v) = kv.get_parsed("subsample_max", "integer")? {
            self.subsample_max = v;
        }
        if let Some(v) = kv.get_parsed("seed", "integer")? {
            self.seed = v;
        }
        if let Some(v) = kv.get_parsed("warmup_epochs", "integer")? {
            self.warmup_epochs = Some(v);
        }
        if let Some(v) = kv.get_parsed("batch_size", "integer")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get_parsed::<bool>("no_memory", "true or false")? {
            self.options.switches.use_memory = !v;
        }
        if let Some(v) = kv.get_parsed::<bool>("no_carry", "true or false")? {
            self.options.switches.use_carry = !v;
        }
        if let Some(v) = kv.get_parsed::<bool>("no_flow_decoder", "true or false")? {
            self.options.switches.use_flow = !v;
        }
        if let Some(v) = kv.get_parsed::<bool>("sliding_window", "true or false")? {
            self.options.sliding_window = v;
        }
        Ok(())
    }

    pub fn resolved_warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 5)
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    /// Mean supervised loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Subsampling stride drawn per (epoch, clip), in visit order.
    pub strides: Vec<usize>,
}

pub struct TrainResult<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub trace: TrainTrace,
}

/// Trains on the given clip sources. Every epoch visits every source once
/// in order, drawing a fresh subsampling stride per clip. Within a clip the
/// stream state advances exactly as in inference; each frame additionally
/// contributes a supervised scale-invariant log loss against ground truth
/// and (at batch size 1) one immediate gradient step.
pub fn train<T: Scalar>(
    sources: &[&dyn ClipSource],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult<T>, PipelineError> {
    cfg.validate()?;
    arch.validate()?;
    let mut params: ModelParams<T> = ModelParams::init(arch.clone(), cfg.seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x7261696e);
    let warmup = cfg.resolved_warmup();
    let frames_per_clip = cfg.seq_len + 1;
    let steps_per_epoch = if cfg.batch_size == 1 {
        sources.len() * frames_per_clip
    } else {
        sources.len().div_ceil(cfg.batch_size)
    };
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut global_step = 0usize;
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let memory_this_epoch = epoch >= warmup && cfg.options.switches.use_memory;
        let mut opts = cfg.options;
        opts.switches.use_memory = memory_this_epoch;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in (0..sources.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
            let mut acc: IndexMap<String, Tensor<T>> = IndexMap::new();
            let mut acc_frames = 0usize;
            for &clip_idx in batch {
                let source = sources[clip_idx];
                let r_cap = cfg
                    .subsample_max
                    .min(source.max_stride())
                    .min((source.num_frames().saturating_sub(1)) / cfg.seq_len)
                    .max(1);
                let r = rng.gen_range(1..=r_cap);
                trace.strides.push(r);
                let indices = subsample_indices(source.num_frames(), cfg.seq_len, r)?;
                let step_ctx = |e: PipelineError, frame: usize| PipelineError::TrainStep {
                    epoch,
                    clip: clip_idx,
                    frame,
                    source: Box::new(e),
                };
                let outcome = run_training_clip(
                    &mut params,
                    source,
                    &indices,
                    r,
                    opts,
                    cfg,
                    &mut acc,
                    &mut acc_frames,
                    &mut global_step,
                    total_steps,
                );
                match outcome {
                    Ok((ls, lc)) => {
                        loss_sum += ls;
                        loss_count += lc;
                    }
                    Err((frame, e)) => return Err(step_ctx(e, frame)),
                }
            }
            if cfg.batch_size > 1 && acc_frames > 0 {
                let lr = schedule(cfg, global_step, total_steps) / acc_frames as f64;
                apply_accumulated(&mut params, &acc, lr)?;
                global_step += 1;
            }
        }
        trace
            .epoch_loss
            .push(if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 });
    }

    let checkpoint = Checkpoint {
        params,
        epoch: cfg.epochs as u32,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        rng_stream: rng.get_stream(),
    };
    Ok(TrainResult { checkpoint, trace })
}

fn schedule(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let frac = if total <= 1 {
        0.0
    } else {
        (step.min(total - 1)) as f64 / (total - 1) as f64
    };
    cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
}

#[allow(clippy::too_many_arguments)]
fn run_training_clip<T: Scalar>(
    params: &mut ModelParams<T>,
    source: &dyn ClipSource,
    indices: &[usize],
    r: usize,
    opts: StreamOptions,
    cfg: &TrainConfig,
    acc: &mut IndexMap<String, Tensor<T>>,
    acc_frames: &mut usize,
    global_step: &mut usize,
    total_steps: usize,
) -> Result<(f64, usize), (usize, PipelineError)> {
    let first = source.image(indices[0]).map_err(|e| (indices[0], e.into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let arch = params.arch().clone();
    let limit = T::from_f64(FLOW_SANITY_LIMIT);
    let mut state = StreamState::<T>::fresh(h, w);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for (ci, &fi) in indices.iter().enumerate() {
        let wrap = |e: PipelineError| (fi, e);
        let image: Tensor<T> = source.image(fi).map_err(|e| wrap(e.into()))?.cast();
        let gt: Tensor<T> = source.depth(fi).map_err(|e| wrap(e.into()))?.cast();
        let mut flow_t: Option<Tensor<T>> = None;
        let mut field: Option<FlowField<T>> = None;
        if ci > 0 {
            let f = source
                .flow_to_prev(fi, r)
                .map_err(|e| wrap(e.into()))?
                .cast::<T>();
            flow_t = Some(f.sanitized_tensor(limit));
            field = Some(f);
        }

        if opts.switches.use_memory {
            if ci == 0 {
                let q0 = encode_frame(params, &image).map_err(wrap)?;
                state.memory =
                    Some(MemoryState::init(&arch, &q0, h, w).map_err(|e| wrap(e.into()))?);
            } else {
                let mem = state.memory.take().expect("initialized at clip start");
                let q_prev = state.q_prev.as_ref().expect("kept per frame");
                let mem = mem
                    .slide(&arch, q_prev, &state.o_prev)
                    .map_err(|e| wrap(e.into()))?;
                if opts.sliding_window {
                    state.memory = Some(mem);
                } else {
                    let prev_image = state.prev_image.as_ref().expect("kept per frame");
                    let (warped, valid) = backward_warp(prev_image, field.as_ref().unwrap())
                        .map_err(|e| wrap(e.into()))?;
                    let inputs = UpdateInputs {
                        image: &image,
                        warped_image: &warped,
                        valid: &valid,
                        flow: flow_t.as_ref(),
                        carry: state.carry.as_deref(),
                    };
                    let (mem, _) = memory_gradient_update_with_events(
                        params,
                        &mem,
                        &inputs,
                        opts.switches,
                        &mut |_| {},
                    )
                    .map_err(|e| wrap(e.into()))?;
                    state.memory = Some(mem);
                }
            }
        }

        // supervised pass: parameters trainable, refined memory constant
        let mut tape: Tape<T> = Tape::new();
        let mounted = params.mount(&mut tape, true);
        let mem_ids = state.memory.as_ref().map(|m| m.mount(&mut tape, false));
        let out = full_forward(
            &mut tape,
            &mounted,
            &arch,
            &image,
            mem_ids,
            flow_t.as_ref(),
            state.carry.as_deref(),
            opts.switches,
        )
        .map_err(|e| wrap(e.into()))?;
        let gt_mask: Vec<bool> = gt.data().iter().map(|&g| g.to_f64() > 0.0).collect();
        let gt_node = tape.constant(
            Tensor::new(vec![1, 1, h, w], gt.into_data()).map_err(|e| wrap(e.into()))?,
        );
        let loss = silog_on_tape(&mut tape, out.depth, gt_node, Some(&gt_mask), arch.depth_eps)
            .map_err(|e| wrap(e.into()))?;
        let loss_value = tape.value(loss).data()[0].to_f64();
        let grads = tape.backward(loss).map_err(|e| wrap(e.into()))?;

        if cfg.batch_size == 1 {
            let lr = T::from_f64(schedule(cfg, *global_step, total_steps));
            params
                .sgd_step(&mounted, &grads, lr)
                .map_err(|e| wrap(e.into()))?;
            *global_step += 1;
        } else {
            for (name, id) in mounted.iter() {
                if let Some(g) = grads.get(id) {
                    match acc.get_mut(name) {
                        Some(t) => {
                            *t = t.saxpy_neg(T::from_f64(-1.0), g).map_err(|e| wrap(e.into()))?
                        }
                        None => {
                            acc.insert(name.to_string(), g.clone());
                        }
                    }
                }
            }
            *acc_frames += 1;
        }

        loss_sum += loss_value;
        loss_count += 1;
        state.q_prev = Some(tape.value(out.features).clone());
        state.carry = Some(out.new_carry.iter().map(|&id| tape.value(id).clone()).collect());
        state.o_prev = flow_t.unwrap_or_else(|| Tensor::zeros(&[2, h, w]));
        state.prev_image = Some(image);
    }
    Ok((loss_sum, loss_count))
}

fn apply_accumulated<T: Scalar>(
    params: &mut ModelParams<T>,
    acc: &IndexMap<String, Tensor<T>>,
    lr: f64,
) -> Result<(), PipelineError> {
    let lr = T::from_f64(lr);
    for (name, g) in acc {
        let cur = params
            .get(name)
            .ok_or_else(|| PipelineError::BadCheckpoint(format!("unknown parameter {name}")))?;
        let next = cur.saxpy_neg(lr, g)?;
        params.set(name, next)?;
    }
    Ok(())
}

/// A complete training artifact: parameters plus enough bookkeeping to
/// resume deterministically.
#[derive(Debug)]
pub struct Checkpoint<T: Scalar> {
    pub params: ModelParams<T>,
    pub epoch: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fresh checkpoint around initialized parameters.
    pub fn initial(params: ModelParams<T>, seed: u64) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(seed);
        Checkpoint {
            params,
            epoch: 0,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(T::DTYPE.tag());
        let config = self.params.arch().to_kv().to_text();
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        buf.extend_from_slice(&self.rng_stream.to_le_bytes());
        buf.extend_from_slice(&(self.params.num_tensors() as u32).to_le_bytes());
        self.params.write_blobs(&mut buf);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], PipelineError> {
            if *pos + n > bytes.len() {
                return Err(PipelineError::BadCheckpoint(format!(
                    "truncated: needed {} bytes, file has {}",
                    *pos + n,
                    bytes.len()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(PipelineError::BadCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::BadCheckpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let tag = take(&mut pos, 1)?[0];
        if tag != T::DTYPE.tag() {
            return Err(PipelineError::BadCheckpoint(format!(
                "dtype tag {tag}, expected {}",
                T::DTYPE.tag()
            )));
        }
        let config_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let config_text = std::str::from_utf8(take(&mut pos, config_len)?)
            .map_err(|e| PipelineError::BadCheckpoint(format!("config block: {e}")))?
            .to_string();
        let kv = KvMap::parse(&config_text)?;
        let mut arch = ArchConfig::default();
        arch.apply_kv(&kv)?;
        let epoch = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let rng_seed: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
        let rng_stream = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let blob_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let params = ModelParams::<T>::read_blobs(arch, bytes, &mut pos)?;
        if params.num_tensors() != blob_count {
            return Err(PipelineError::BadCheckpoint(format!(
                "blob count {blob_count} does not match architecture ({} tensors)",
                params.num_tensors()
            )));
        }
        if pos != bytes.len() {
            return Err(PipelineError::BadCheckpoint(format!(
                "{} trailing bytes after the last blob",
                bytes.len() - pos
            )));
        }
        Ok(Checkpoint {
            params,
            epoch,
            rng_seed,
            rng_word_pos,
            rng_stream,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<(), PipelineError> {
    std::fs::write(path, ck.to_bytes()).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        err: e,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        err: e,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{ObjShape, ObjectSpec, Scene, SceneSpec};

    fn small_arch() -> ArchConfig {
        ArchConfig {
            token_channels: 8,
            stride_product: 4,
            heads: 2,
            decoder_scales: 2,
            memory_length: 2,
            ..ArchConfig::default()
        }
    }

    fn tiny_scene(seed: u64, frames: usize) -> Scene {
        Scene::build(
            SceneSpec {
                width: 16,
                height: 16,
                frames,
                background_depth: 10.0,
                texture_cell: 4,
                jitter: 0,
                flicker: 0.0,
                shimmer: 0.0,
                objects: vec![ObjectSpec {
                    shape: ObjShape::Rect { w: 6, h: 5 },
                    depth: 2.0,
                    velocity: (1.0, 0.0),
                    start: (3.0, 6.0),
                    albedo: [0.7, 0.3, 0.5],
                    noise_amp: 0.05,
                }],
            },
            seed,
        )
        .unwrap()
    }

    fn scene_stream(scene: &Scene) -> (Vec<Tensor<f64>>, Vec<FlowField<f64>>) {
        let frames: Vec<Tensor<f64>> = (0..scene.frames())
            .map(|t| scene.image(t).unwrap().cast())
            .collect();
        let flows: Vec<FlowField<f64>> = (1..scene.frames())
            .map(|t| scene.flow(t, t - 1).unwrap().cast())
            .collect();
        (frames, flows)
    }

    #[test]
    fn event_order_matches_the_algorithm() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 50).unwrap();
        let scene = tiny_scene(1, 3);
        let (frames, flows) = scene_stream(&scene);
        let out = infer_stream(&params, &frames, &flows, StreamOptions::default()).unwrap();
        assert_eq!(out.events.steps_of(0), vec!["encode", "init_memory", "depth"]);
        for t in 1..3 {
            assert_eq!(
                out.events.steps_of(t),
                vec![
                    "intermediate_update",
                    "warp",
                    "forward_current",
                    "forward_warped",
                    "backprop",
                    "memory_update",
                    "depth"
                ],
                "frame {t}"
            );
        }
        assert_eq!(out.depths.len(), 3);
        assert_eq!(out.updates.len(), 2);
    }

    #[test]
    fn single_frame_is_monocular_with_replicated_memory() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 51).unwrap();
        let scene = tiny_scene(2, 1);
        let frames = vec![scene.image(0).unwrap().cast::<f64>()];
        let out = infer_stream(&params, &frames, &[], StreamOptions::default()).unwrap();
        assert_eq!(out.depths.len(), 1);
        assert_eq!(out.events.steps_of(0), vec!["encode", "init_memory", "depth"]);
        assert!(out.updates.is_empty());
    }

    #[test]
    fn identical_frames_with_zero_flow_keep_the_memory_loss_at_zero() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 52).unwrap();
        let img = tiny_scene(3, 1).image(0).unwrap().cast::<f64>();
        let frames = vec![img.clone(), img];
        let flows = vec![FlowField::zeros(16, 16, FlowDirection::Backward)];
        let out = infer_stream(&params, &frames, &flows, StreamOptions::default()).unwrap();
        assert_eq!(out.updates.len(), 1);
        assert_eq!(out.updates[0].1.loss, 0.0);
        assert_eq!(out.updates[0].1.grad_max_vis, 0.0);
    }

    #[test]
    fn streaming_is_bitwise_deterministic_and_parameter_preserving() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 53).unwrap();
        let before = params.checksum();
        let scene = tiny_scene(4, 4);
        let (frames, flows) = scene_stream(&scene);
        let a = infer_stream(&params, &frames, &flows, StreamOptions::default()).unwrap();
        let b = infer_stream(&params, &frames, &flows, StreamOptions::default()).unwrap();
        for (x, y) in a.depths.iter().zip(&b.depths) {
            assert_eq!(x, y);
        }
        assert_eq!(a.events, b.events);
        assert_eq!(params.checksum(), before);
    }

    #[test]
    fn memory_off_equals_a_hand_rolled_monocular_chain() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch.clone(), 54).unwrap();
        let scene = tiny_scene(5, 3);
        let (frames, flows) = scene_stream(&scene);
        let mut opts = StreamOptions::default();
        opts.switches.use_memory = false;
        let out = infer_stream(&params, &frames, &flows, opts).unwrap();
        for t in 0..3 {
            assert_eq!(out.events.steps_of(t), vec!["depth"]);
        }

        // the same chain written out by hand, no memory anywhere
        let limit = 1e9;
        let mut carry: Option<Vec<Tensor<f64>>> = None;
        for (t, frame) in frames.iter().enumerate() {
            let flow_t = if t == 0 {
                None
            } else {
                Some(flows[t - 1].sanitized_tensor(limit))
            };
            let pass = depth_pass(
                &params,
                frame,
                None,
                flow_t.as_ref(),
                carry.as_deref(),
                opts.switches,
            )
            .unwrap();
            assert_eq!(pass.depth, out.depths[t], "frame {t}");
            carry = Some(pass.carry);
        }
    }

    #[test]
    fn sliding_window_skips_the_gradient_refinement() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 55).unwrap();
        let scene = tiny_scene(6, 3);
        let (frames, flows) = scene_stream(&scene);
        let opts = StreamOptions {
            sliding_window: true,
            ..StreamOptions::default()
        };
        let out = infer_stream(&params, &frames, &flows, opts).unwrap();
        for t in 1..3 {
            assert_eq!(out.events.steps_of(t), vec!["intermediate_update", "depth"]);
        }
        assert!(out.updates.is_empty());
    }

    #[test]
    fn flow_count_mismatch_is_an_error() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 56).unwrap();
        let img = tiny_scene(7, 1).image(0).unwrap().cast::<f64>();
        let err = infer_stream(&params, &[img], &[FlowField::zeros(16, 16, FlowDirection::Backward)], StreamOptions::default())
            .unwrap_err();
        assert!(matches!(err, PipelineError::FlowCount { frames: 1, flows: 1 }));
    }

    #[test]
    fn subsample_patterns_match_the_contract() {
        assert_eq!(subsample_indices(9, 8, 1).unwrap(), (0..=8).collect::<Vec<_>>());
        assert_eq!(
            subsample_indices(33, 8, 4).unwrap(),
            vec![0, 4, 8, 12, 16, 20, 24, 28, 32]
        );
        assert!(matches!(
            subsample_indices(8, 8, 1),
            Err(PipelineError::ClipTooLong { have: 8, len: 8, r: 1 })
        ));
    }

    #[test]
    fn zero_epoch_training_returns_the_untouched_initialization() {
        let arch = small_arch();
        let scene = tiny_scene(8, 4);
        let sources: Vec<&dyn ClipSource> = vec![&scene];
        let cfg = TrainConfig {
            epochs: 0,
            seq_len: 3,
            ..TrainConfig::default()
        };
        let result = train::<f64>(&sources, &arch, &cfg).unwrap();
        let fresh: ModelParams<f64> = ModelParams::init(arch, cfg.seed).unwrap();
        assert_eq!(result.checkpoint.params.checksum(), fresh.checksum());
        assert!(result.trace.epoch_loss.is_empty());
        assert_eq!(result.checkpoint.epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let arch = small_arch();
        let scene_a = tiny_scene(9, 4);
        let scene_b = tiny_scene(10, 4);
        let sources: Vec<&dyn ClipSource> = vec![&scene_a, &scene_b];
        let cfg = TrainConfig {
            epochs: 4,
            seq_len: 2,
            subsample_max: 1,
            warmup_epochs: Some(4),
            lr_start: 3e-4,
            lr_end: 3e-5,
            seed: 5,
            ..TrainConfig::default()
        };
        let one = train::<f64>(&sources, &arch, &cfg).unwrap();
        let two = train::<f64>(&sources, &arch, &cfg).unwrap();
        assert_eq!(
            one.checkpoint.params.checksum(),
            two.checkpoint.params.checksum()
        );
        assert_eq!(one.trace.epoch_loss, two.trace.epoch_loss);
        let first = one.trace.epoch_loss.first().copied().unwrap();
        let last = one.trace.epoch_loss.last().copied().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
        assert!(one.trace.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn memory_epochs_run_after_warmup() {
        let arch = small_arch();
        let scene = tiny_scene(11, 4);
        let sources: Vec<&dyn ClipSource> = vec![&scene];
        let cfg = TrainConfig {
            epochs: 2,
            seq_len: 2,
            subsample_max: 1,
            warmup_epochs: Some(1),
            seed: 6,
            ..TrainConfig::default()
        };
        let result = train::<f64>(&sources, &arch, &cfg).unwrap();
        assert_eq!(result.trace.epoch_loss.len(), 2);
        assert!(result.trace.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn batch_accumulation_trains_too() {
        let arch = small_arch();
        let scene_a = tiny_scene(12, 3);
        let scene_b = tiny_scene(13, 3);
        let sources: Vec<&dyn ClipSource> = vec![&scene_a, &scene_b];
        let cfg = TrainConfig {
            epochs: 1,
            seq_len: 2,
            subsample_max: 1,
            warmup_epochs: Some(1),
            batch_size: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        let result = train::<f64>(&sources, &arch, &cfg).unwrap();
        let fresh: ModelParams<f64> = ModelParams::init(result.checkpoint.params.arch().clone(), 7).unwrap();
        assert_ne!(result.checkpoint.params.checksum(), fresh.checksum());
    }

    #[test]
    fn checkpoint_round_trips_byte_identically() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 60).unwrap();
        let ck = Checkpoint::initial(params, 3);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &ck).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.params.checksum(), ck.params.checksum());
        assert_eq!(loaded.epoch, 0);
        assert_eq!(loaded.rng_seed, ck.rng_seed);
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 61).unwrap();
        let ck = Checkpoint::initial(params, 0);
        let bytes = ck.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad_magic),
            Err(PipelineError::BadCheckpoint(m)) if m.contains("magic")
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bad_version),
            Err(PipelineError::BadCheckpoint(m)) if m.contains("version 9")
        ));

        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(PipelineError::BadCheckpoint(m)) if m.contains("dtype")
        ));

        let truncated = &bytes[..bytes.len() - 7];
        let err = Checkpoint::<f64>::from_bytes(truncated).unwrap_err();
        assert!(err.to_string().contains("truncat") || err.to_string().contains("length"),
            "got: {err}");

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&trailing),
            Err(PipelineError::BadCheckpoint(m)) if m.contains("trailing")
        ));
    }

    #[test]
    fn checkpoint_with_edited_config_names_the_mismatched_shapes() {
        let arch = small_arch();
        let params: ModelParams<f64> = ModelParams::init(arch, 62).unwrap();
        let ck = Checkpoint::initial(params, 0);
        let bytes = ck.to_bytes();
        // rewrite token_channels = 8 to 16 inside the config text block
        let text = b"token_channels = 8";
        let pos = bytes
            .windows(text.len())
            .position(|w| w == text)
            .expect("config block embeds the key");
        let mut edited = bytes.clone();
        edited[pos + text.len() - 1] = b'1';
        edited.insert(pos + text.len(), b'6');
        // fix up the config length prefix (offset 9: magic 4 + version 4 + tag 1)
        let old_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        edited[9..13].copy_from_slice(&(old_len + 1).to_le_bytes());
        let err = Checkpoint::<f64>::from_bytes(&edited).unwrap_err();
        let msg = err.to_string();
        // declared channels 16 derive a [8,3,3,3] first conv; the stored
        // blob still holds the [4,3,3,3] trained under channels 8
        assert!(
            msg.contains("[8, 3, 3, 3]") && msg.contains("[4, 3, 3, 3]"),
            "error should name the declared and the stored shape: {msg}"
        );
    }

    #[test]
    fn train_config_parses_and_rejects_unknown_keys() {
        let mut cfg = TrainConfig::default();
        let kv = KvMap::parse(
            "epochs = 3\nseq_len = 4\nlr_start = 1e-4\nno_memory = true\nsliding_window = false\n",
        )
        .unwrap();
        cfg.apply_kv(&kv).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seq_len, 4);
        assert!(!cfg.options.switches.use_memory);
        assert!(!cfg.options.sliding_window);

        let bad = KvMap::parse("not_a_key = 1\n").unwrap();
        assert!(cfg.apply_kv(&bad).is_err());
    }
}
