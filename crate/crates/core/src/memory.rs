//! Persistent memory: a fixed-length buffer of token pairs and the
//! test-time update that adapts it from frame to frame.
//!
//! Each slot pairs a visual token (a copy of encoder features, [c, h', w'])
//! with a displacement token (the backward flow of the frame it came from,
//! [2, h, w]). Advancing a frame first slides the buffer: the oldest pair
//! drops, the previous frame's features and flow append. Then the buffer is
//! refined by gradient descent through the frozen network: depth is
//! predicted for the current frame and for the previous frame warped onto
//! it, their scale-invariant log difference over warp-valid pixels is
//! backpropagated into the tokens only, and the tokens take one descent
//! step. Network parameters never change here.

use crate::metrics::{silog_on_tape, MetricsError};
use crate::model::{
    full_forward, ArchConfig, ForwardSwitches, ModelError, ModelParams,
};
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("token {i}: expected visual {vis:?} and displacement {disp:?}, got {got:?}")]
    TokenShape {
        i: usize,
        vis: Vec<usize>,
        disp: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("memory holds {got} tokens, architecture wants {want}")]
    WrongLength { got: usize, want: usize },
}

/// One buffer slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryToken<T: Scalar> {
    /// Encoder features of the originating frame, [c, h', w'].
    pub vis: Tensor<T>,
    /// Backward flow of the originating frame, [2, h, w].
    pub disp: Tensor<T>,
}

/// The full token buffer, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T: Scalar> {
    tokens: Vec<MemoryToken<T>>,
}

impl<T: Scalar> MemoryState<T> {
    /// Buffer for the first frame: every slot repeats that frame's features,
    /// with zero displacement.
    pub fn init(
        arch: &ArchConfig,
        features: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<Self, MemoryError> {
        let (hp, wp) = arch.token_grid(h, w)?;
        let vis = squeeze_features(arch, features, hp, wp)?;
        let disp = Tensor::zeros(&[2, h, w]);
        let token = MemoryToken { vis, disp };
        Ok(MemoryState {
            tokens: vec![token; arch.memory_length],
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[MemoryToken<T>] {
        &self.tokens
    }

    /// Slides the buffer: drops the oldest pair, appends the given features
    /// and flow as the newest. Length is invariant.
    pub fn slide(
        &self,
        arch: &ArchConfig,
        features: &Tensor<T>,
        flow: &Tensor<T>,
    ) -> Result<Self, MemoryError> {
        let old = &self.tokens[0];
        let vis = squeeze_features(arch, features, old.vis.shape()[1], old.vis.shape()[2])?;
        if flow.shape() != old.disp.shape() {
            return Err(MemoryError::TokenShape {
                i: self.tokens.len() - 1,
                vis: old.vis.shape().to_vec(),
                disp: old.disp.shape().to_vec(),
                got: flow.shape().to_vec(),
            });
        }
        let mut tokens = self.tokens[1..].to_vec();
        tokens.push(MemoryToken {
            vis,
            disp: flow.clone(),
        });
        Ok(MemoryState { tokens })
    }

    /// All visual tokens stacked to [l, c, h', w'], buffer order.
    pub fn stack_vis(&self) -> Tensor<T> {
        stack(&self.tokens, |t| &t.vis)
    }

    /// All displacement tokens stacked to [l, 2, h, w], buffer order.
    pub fn stack_disp(&self) -> Tensor<T> {
        stack(&self.tokens, |t| &t.disp)
    }

    /// Rebuilds a buffer from stacked tensors, the inverse of the stack
    /// accessors.
    pub fn from_stacks(vis: &Tensor<T>, disp: &Tensor<T>) -> Result<Self, MemoryError> {
        let vs = vis.shape();
        let ds = disp.shape();
        if vs.len() != 4 || ds.len() != 4 || vs[0] != ds[0] || ds[1] != 2 {
            return Err(MemoryError::TokenShape {
                i: 0,
                vis: vs.to_vec(),
                disp: ds.to_vec(),
                got: vs.to_vec(),
            });
        }
        let l = vs[0];
        let vis_chunk = vs[1..].iter().product::<usize>();
        let disp_chunk = ds[1..].iter().product::<usize>();
        let mut tokens = Vec::with_capacity(l);
        for i in 0..l {
            let v = Tensor::new(
                vs[1..].to_vec(),
                vis.data()[i * vis_chunk..(i + 1) * vis_chunk].to_vec(),
            )?;
            let d = Tensor::new(
                ds[1..].to_vec(),
                disp.data()[i * disp_chunk..(i + 1) * disp_chunk].to_vec(),
            )?;
            tokens.push(MemoryToken { vis: v, disp: d });
        }
        Ok(MemoryState { tokens })
    }

    /// Mounts the stacked buffer on a tape; trainable for the gradient
    /// update, constant for plain inference.
    pub fn mount(&self, tape: &mut Tape<T>, trainable: bool) -> (NodeId, NodeId) {
        let vis = self.stack_vis();
        let disp = self.stack_disp();
        if trainable {
            (tape.leaf(vis), tape.leaf(disp))
        } else {
            (tape.constant(vis), tape.constant(disp))
        }
    }

    pub fn check(&self, arch: &ArchConfig) -> Result<(), MemoryError> {
        if self.tokens.len() != arch.memory_length {
            return Err(MemoryError::WrongLength {
                got: self.tokens.len(),
                want: arch.memory_length,
            });
        }
        Ok(())
    }
}

fn squeeze_features<T: Scalar>(
    arch: &ArchConfig,
    features: &Tensor<T>,
    hp: usize,
    wp: usize,
) -> Result<Tensor<T>, MemoryError> {
    let want = [1, arch.token_channels, hp, wp];
    let alt = [arch.token_channels, hp, wp];
    let s = features.shape();
    if s == want {
        Ok(Tensor::new(alt.to_vec(), features.data().to_vec())?)
    } else if s == alt {
        Ok(features.clone())
    } else {
        Err(MemoryError::TokenShape {
            i: 0,
            vis: alt.to_vec(),
            disp: vec![],
            got: s.to_vec(),
        })
    }
}

fn stack<T: Scalar>(
    tokens: &[MemoryToken<T>],
    pick: impl Fn(&MemoryToken<T>) -> &Tensor<T>,
) -> Tensor<T> {
    let first = pick(&tokens[0]).shape().to_vec();
    let mut shape = vec![tokens.len()];
    shape.extend_from_slice(&first);
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in tokens {
        assert_eq!(pick(t).shape(), first.as_slice(), "uniform token shapes");
        data.extend_from_slice(pick(t).data());
    }
    Tensor::new(shape, data).expect("stacked lengths agree")
}

/// What the gradient update did.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    /// Loss between the two depth predictions before the step.
    pub loss: f64,
    /// Largest gradient magnitude that reached the visual tokens.
    pub grad_max_vis: f64,
    /// Largest gradient magnitude that reached the displacement tokens.
    pub grad_max_disp: f64,
    /// False when the update was skipped (no valid pixels).
    pub applied: bool,
}

/// Inputs of one gradient update that concern the current frame pair.
pub struct UpdateInputs<'a, T: Scalar> {
    /// Current frame I_t, [3, h, w].
    pub image: &'a Tensor<T>,
    /// Previous frame warped onto the current one, [3, h, w].
    pub warped_image: &'a Tensor<T>,
    /// Per-pixel validity of the warp, length h * w.
    pub valid: &'a [bool],
    /// Backward flow at the current frame, [2, h, w].
    pub flow: Option<&'a Tensor<T>>,
    /// Previous frame's decoder carry.
    pub carry: Option<&'a [Tensor<T>]>,
}

/// One descent step on the memory tokens through the frozen network.
///
/// Both the real and the warped frame are pushed through the network with
/// the same memory leaves, flow and carry; the scale-invariant log
/// difference of the two depth maps over the valid pixels is the objective.
/// Gradients flow through both predictions into the tokens, never into the
/// parameters. With no valid pixels the update is skipped and the buffer
/// returned unchanged.
pub fn memory_gradient_update<T: Scalar>(
    params: &ModelParams<T>,
    memory: &MemoryState<T>,
    inputs: &UpdateInputs<'_, T>,
    switches: ForwardSwitches,
) -> Result<(MemoryState<T>, UpdateStats), MemoryError> {
    memory_gradient_update_with_events(params, memory, inputs, switches, &mut |_| {})
}

/// Same as [`memory_gradient_update`], reporting each internal stage to the
/// sink as it executes so callers can keep an ordered event log.
pub fn memory_gradient_update_with_events<T: Scalar>(
    params: &ModelParams<T>,
    memory: &MemoryState<T>,
    inputs: &UpdateInputs<'_, T>,
    switches: ForwardSwitches,
    on_step: &mut dyn FnMut(&'static str),
) -> Result<(MemoryState<T>, UpdateStats), MemoryError> {
    let arch = params.arch();
    memory.check(arch)?;
    if !inputs.valid.iter().any(|&v| v) {
        log::warn!("memory update skipped: warp left no valid pixels");
        on_step("memory_update_skipped");
        return Ok((
            memory.clone(),
            UpdateStats {
                loss: 0.0,
                grad_max_vis: 0.0,
                grad_max_disp: 0.0,
                applied: false,
            },
        ));
    }
    let mut tape: Tape<T> = Tape::new();
    let mounted = params.mount(&mut tape, false);
    let (vis_id, disp_id) = memory.mount(&mut tape, true);
    let mem = Some((vis_id, disp_id));
    let cur = full_forward(
        &mut tape,
        &mounted,
        arch,
        inputs.image,
        mem,
        inputs.flow,
        inputs.carry,
        switches,
    )?;
    on_step("forward_current");
    let warped = full_forward(
        &mut tape,
        &mounted,
        arch,
        inputs.warped_image,
        mem,
        inputs.flow,
        inputs.carry,
        switches,
    )?;
    on_step("forward_warped");
    let loss = silog_on_tape(
        &mut tape,
        cur.depth,
        warped.depth,
        Some(inputs.valid),
        arch.depth_eps,
    )?;
    let loss_value = tape.value(loss).data()[0].to_f64();
    let grads = tape.backward(loss)?;
    on_step("backprop");
    let lr = T::from_f64(arch.memory_lr);
    let zero_vis;
    let grad_vis = match grads.get(vis_id) {
        Some(g) => g,
        None => {
            zero_vis = Tensor::zeros(tape.shape(vis_id));
            &zero_vis
        }
    };
    let zero_disp;
    let grad_disp = match grads.get(disp_id) {
        Some(g) => g,
        None => {
            zero_disp = Tensor::zeros(tape.shape(disp_id));
            &zero_disp
        }
    };
    let new_vis = tape.value(vis_id).saxpy_neg(lr, grad_vis)?;
    let new_disp = tape.value(disp_id).saxpy_neg(lr, grad_disp)?;
    on_step("memory_update");
    let stats = UpdateStats {
        loss: loss_value,
        grad_max_vis: max_abs(grad_vis),
        grad_max_disp: max_abs(grad_disp),
        applied: true,
    };
    Ok((MemoryState::from_stacks(&new_vis, &new_disp)?, stats))
}

fn max_abs<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|&v| v.to_f64().abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{backward_warp, FlowDirection, FlowField};

    fn arch() -> ArchConfig {
        ArchConfig {
            token_channels: 8,
            stride_product: 4,
            heads: 2,
            decoder_scales: 2,
            memory_length: 3,
            ..ArchConfig::default()
        }
    }

    fn image(seed: usize) -> Tensor<f64> {
        Tensor::from_fn(&[3, 8, 8], |i| ((i * 31 + seed * 7) % 23) as f64 / 23.0)
    }

    fn features(params: &ModelParams<f64>, img: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let m = params.mount(&mut tape, false);
        let out = full_forward(
            &mut tape,
            &m,
            params.arch(),
            img,
            None,
            None,
            None,
            ForwardSwitches::default(),
        )
        .unwrap();
        tape.value(out.features).clone()
    }

    #[test]
    fn init_repeats_features_with_zero_displacement() {
        let a = arch();
        let f = Tensor::from_fn(&[1, 8, 2, 2], |i| i as f64);
        let mem = MemoryState::init(&a, &f, 8, 8).unwrap();
        assert_eq!(mem.len(), 3);
        for t in mem.tokens() {
            assert_eq!(t.vis.shape(), &[8, 2, 2]);
            assert_eq!(t.vis.data(), f.data());
            assert!(t.disp.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn slide_drops_oldest_and_appends_newest() {
        let a = arch();
        let f0 = Tensor::filled(&[1, 8, 2, 2], 0.0);
        let mut mem = MemoryState::init(&a, &f0, 8, 8).unwrap();
        for step in 1..=4 {
            let f = Tensor::filled(&[1, 8, 2, 2], step as f64);
            let flow = Tensor::filled(&[2, 8, 8], step as f64 * 0.5);
            mem = mem.slide(&a, &f, &flow).unwrap();
            assert_eq!(mem.len(), 3);
        }
        // after 4 slides over length 3: slots hold steps 2, 3, 4
        let marks: Vec<f64> = mem.tokens().iter().map(|t| t.vis.data()[0]).collect();
        assert_eq!(marks, vec![2.0, 3.0, 4.0]);
        let flows: Vec<f64> = mem.tokens().iter().map(|t| t.disp.data()[0]).collect();
        assert_eq!(flows, vec![1.0, 1.5, 2.0]);
    }

    #[test]
    fn buffer_length_is_invariant_for_any_capacity() {
        for l in [2usize, 4, 6] {
            let a = ArchConfig {
                memory_length: l,
                ..arch()
            };
            let f: Tensor<f64> = Tensor::zeros(&[1, 8, 2, 2]);
            let mut mem = MemoryState::init(&a, &f, 8, 8).unwrap();
            for _ in 0..10 {
                mem = mem
                    .slide(&a, &f, &Tensor::zeros(&[2, 8, 8]))
                    .unwrap();
                assert_eq!(mem.len(), l);
            }
        }
    }

    #[test]
    fn stack_round_trip_preserves_tokens() {
        let a = arch();
        let f = Tensor::from_fn(&[1, 8, 2, 2], |i| (i as f64 * 0.3).sin());
        let mut mem = MemoryState::init(&a, &f, 8, 8).unwrap();
        let g = Tensor::from_fn(&[1, 8, 2, 2], |i| (i as f64 * 0.7).cos());
        mem = mem
            .slide(&a, &g, &Tensor::filled(&[2, 8, 8], 1.5))
            .unwrap();
        let back = MemoryState::from_stacks(&mem.stack_vis(), &mem.stack_disp()).unwrap();
        assert_eq!(back, mem);
    }

    #[test]
    fn identical_frames_leave_memory_bitwise_unchanged() {
        // same image in both slots, zero flow: the two depth maps coincide,
        // the loss is exactly 0 and the guarded sqrt passes back exact zeros
        let a = arch();
        let params: ModelParams<f64> = ModelParams::init(a.clone(), 40).unwrap();
        let img = image(1);
        let feats = features(&params, &img);
        let mem = MemoryState::init(&a, &feats, 8, 8).unwrap();
        let valid = vec![true; 64];
        let inputs = UpdateInputs {
            image: &img,
            warped_image: &img,
            valid: &valid,
            flow: None,
            carry: None,
        };
        let (updated, stats) =
            memory_gradient_update(&params, &mem, &inputs, ForwardSwitches::default()).unwrap();
        assert_eq!(stats.loss, 0.0);
        assert_eq!(stats.grad_max_vis, 0.0);
        assert_eq!(stats.grad_max_disp, 0.0);
        assert!(stats.applied);
        assert_eq!(updated, mem);
    }

    #[test]
    fn differing_frames_move_tokens_but_never_parameters() {
        let a = arch();
        let params: ModelParams<f64> = ModelParams::init(a.clone(), 41).unwrap();
        let before = params.checksum();
        let img = image(1);
        let prev = image(2);
        let flow = FlowField::new(
            8,
            8,
            vec![1.0; 64],
            vec![0.0; 64],
            FlowDirection::Backward,
        )
        .unwrap();
        let (warped, valid) = backward_warp(&prev, &flow).unwrap();
        let feats = features(&params, &prev);
        let mem = MemoryState::init(&a, &feats, 8, 8).unwrap();
        let flow_t = flow.as_tensor();
        let inputs = UpdateInputs {
            image: &img,
            warped_image: &warped,
            valid: &valid,
            flow: Some(&flow_t),
            carry: None,
        };
        let (updated, stats) =
            memory_gradient_update(&params, &mem, &inputs, ForwardSwitches::default()).unwrap();
        assert!(stats.loss > 0.0);
        assert!(stats.applied);
        assert!(stats.grad_max_vis > 0.0);
        assert_ne!(updated, mem);
        assert_eq!(params.checksum(), before);
    }

    #[test]
    fn update_descends_the_objective() {
        // re-evaluating the same objective with the stepped tokens must not
        // increase it (small step, smooth region)
        let a = arch();
        let params: ModelParams<f64> = ModelParams::init(a.clone(), 42).unwrap();
        let img = image(3);
        let prev = image(4);
        let feats = features(&params, &prev);
        let mem = MemoryState::init(&a, &feats, 8, 8).unwrap();
        let valid = vec![true; 64];

        let eval = |mem: &MemoryState<f64>| -> f64 {
            let mut tape = Tape::new();
            let m = params.mount(&mut tape, false);
            let ids = mem.mount(&mut tape, false);
            let cur = full_forward(
                &mut tape, &m, &a, &img, Some(ids), None, None,
                ForwardSwitches::default(),
            )
            .unwrap();
            let warped = full_forward(
                &mut tape, &m, &a, &prev, Some(ids), None, None,
                ForwardSwitches::default(),
            )
            .unwrap();
            let loss = silog_on_tape(
                &mut tape, cur.depth, warped.depth, Some(&valid), a.depth_eps,
            )
            .unwrap();
            tape.value(loss).data()[0]
        };
        let before = eval(&mem);
        let inputs = UpdateInputs {
            image: &img,
            warped_image: &prev,
            valid: &valid,
            flow: None,
            carry: None,
        };
        let (updated, stats) =
            memory_gradient_update(&params, &mem, &inputs, ForwardSwitches::default()).unwrap();
        assert!((stats.loss - before).abs() < 1e-9);
        let after = eval(&updated);
        assert!(
            after < before,
            "objective should drop: before {before}, after {after}"
        );
    }

    #[test]
    fn all_invalid_mask_skips_the_update_untouched() {
        let a = arch();
        let params: ModelParams<f64> = ModelParams::init(a.clone(), 43).unwrap();
        let img = image(5);
        let feats = features(&params, &img);
        let mem = MemoryState::init(&a, &feats, 8, 8).unwrap();
        let valid = vec![false; 64];
        let inputs = UpdateInputs {
            image: &img,
            warped_image: &img,
            valid: &valid,
            flow: None,
            carry: None,
        };
        let (updated, stats) =
            memory_gradient_update(&params, &mem, &inputs, ForwardSwitches::default()).unwrap();
        assert!(!stats.applied);
        assert_eq!(updated, mem);
    }

    #[test]
    fn update_is_bitwise_deterministic() {
        let a = arch();
        let params: ModelParams<f64> = ModelParams::init(a.clone(), 44).unwrap();
        let img = image(6);
        let prev = image(7);
        let feats = features(&params, &prev);
        let mem = MemoryState::init(&a, &feats, 8, 8).unwrap();
        let valid = vec![true; 64];
        let run = || {
            let inputs = UpdateInputs {
                image: &img,
                warped_image: &prev,
                valid: &valid,
                flow: None,
                carry: None,
            };
            let (m, _) =
                memory_gradient_update(&params, &mem, &inputs, ForwardSwitches::default())
                    .unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
