//! Forward passes of the network blocks. Every function appends to a
//! caller-owned tape and returns node ids, so the same code serves the
//! frozen-parameter memory update and ordinary training.

use super::{ArchConfig, ModelError, MountedParams};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

type Result<T> = std::result::Result<T, ModelError>;

/// Stride-2 convolution ladder plus one stride-1 refinement, each followed
/// by relu. `prefix` selects the parameter family ("enc" or "pos").
fn run_ladder<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId> {
    let k = arch.decoder_scales;
    let mut x = input;
    for i in 0..k {
        let w = p.id(&format!("{prefix}.conv{i}.w"));
        let b = p.id(&format!("{prefix}.conv{i}.b"));
        let y = tape.conv2d(x, w, Some(b), 2, 1)?;
        x = tape.relu(y)?;
    }
    let w = p.id(&format!("{prefix}.refine.w"));
    let b = p.id(&format!("{prefix}.refine.b"));
    let y = tape.conv2d(x, w, Some(b), 1, 1)?;
    Ok(tape.relu(y)?)
}

/// Image features: [b, 3, h, w] -> [b, c, h', w'].
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    image: NodeId,
) -> Result<NodeId> {
    let s = tape.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(ModelError::Config(format!(
            "encoder expects [b, 3, h, w] input, got {s:?}"
        )));
    }
    arch.token_grid(s[2], s[3])?;
    run_ladder(tape, p, arch, "enc", image)
}

/// Positional encodings from displacement tokens: [l, 2, h, w] -> [l, c, h', w'].
pub fn pos_encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    disp: NodeId,
) -> Result<NodeId> {
    let s = tape.shape(disp).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(ModelError::Config(format!(
            "displacement encoder expects [l, 2, h, w] input, got {s:?}"
        )));
    }
    arch.token_grid(s[2], s[3])?;
    run_ladder(tape, p, arch, "pos", disp)
}

/// Flattens feature maps to an attention sequence:
/// [b, c, h, w] -> [b * h * w, c].
pub fn token_sequence<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    debug_assert_eq!(s.len(), 4);
    let nhwc = tape.permute(x, &[0, 2, 3, 1])?;
    Ok(tape.reshape(nhwc, &[s[0] * s[2] * s[3], s[1]])?)
}

/// Inverse of [`token_sequence`] for a known geometry.
fn sequence_to_map<T: Scalar>(
    tape: &mut Tape<T>,
    seq: NodeId,
    b: usize,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let c = tape.shape(seq)[1];
    let nhwc = tape.reshape(seq, &[b, h, w, c])?;
    Ok(tape.permute(nhwc, &[0, 3, 1, 2])?)
}

/// Multi-head scaled dot-product attention with separate query/key/value
/// inputs. Projections carry no bias; heads split the channel axis.
fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &ArchConfig,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
) -> Result<NodeId> {
    let dh = arch.token_channels / arch.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(k_in, wk)?;
    let v = tape.matmul(v_in, wv)?;
    let mut heads = Vec::with_capacity(arch.heads);
    for h in 0..arch.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.permute(kh, &[1, 0])?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale)?;
        let attn = tape.softmax(scaled, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let joined = tape.concat(&heads, 1)?;
    Ok(tape.matmul(joined, wo)?)
}

/// Attention among the memory tokens. Positional encodings derived from the
/// displacement tokens enter the query and key inputs only, never the
/// values, and there is no residual: the result replaces the raw tokens as
/// the memory the fusion stage reads. Returns a [l * h' * w', c] sequence.
pub fn memory_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    vis: NodeId,
    pos: NodeId,
) -> Result<NodeId> {
    if tape.shape(vis) != tape.shape(pos) {
        return Err(ModelError::Config(format!(
            "visual tokens {:?} and positional encodings {:?} must agree",
            tape.shape(vis),
            tape.shape(pos)
        )));
    }
    let vis_seq = token_sequence(tape, vis)?;
    let pos_seq = token_sequence(tape, pos)?;
    let qk_in = tape.add(vis_seq, pos_seq)?;
    multi_head_attention(
        tape,
        arch,
        qk_in,
        qk_in,
        vis_seq,
        p.id("attn.self.wq"),
        p.id("attn.self.wk"),
        p.id("attn.self.wv"),
        p.id("attn.self.wo"),
    )
}

/// Folds attended memory into the frame: encoder features query the memory
/// sequence, and the attended result is added back onto the features.
pub fn fuse_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    features: NodeId,
    memory_seq: NodeId,
) -> Result<NodeId> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 4 || fs[1] != arch.token_channels {
        return Err(ModelError::Config(format!(
            "fusion expects [b, {}, h', w'] features, got {fs:?}",
            arch.token_channels
        )));
    }
    let fq = token_sequence(tape, features)?;
    let attended = multi_head_attention(
        tape,
        arch,
        fq,
        memory_seq,
        memory_seq,
        p.id("attn.cross.wq"),
        p.id("attn.cross.wk"),
        p.id("attn.cross.wv"),
        p.id("attn.cross.wo"),
    )?;
    let fused = tape.add(fq, attended)?;
    sequence_to_map(tape, fused, fs[0], fs[2], fs[3])
}

/// Decoder: repeated (concat features, pooled flow, carry) -> conv -> relu
/// -> upsample, then a bounded head. Returns the depth map [b, 1, h, w] and
/// this frame's stage outputs, which become the next frame's carry.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    fused: NodeId,
    flow: NodeId,
    carry: &[NodeId],
) -> Result<(NodeId, Vec<NodeId>)> {
    let k = arch.decoder_scales;
    if carry.len() != k {
        return Err(ModelError::Config(format!(
            "decoder expects {k} carry tensors, got {}",
            carry.len()
        )));
    }
    let fshape = tape.shape(flow).to_vec();
    if fshape.len() != 4 || fshape[1] != 2 {
        return Err(ModelError::Config(format!(
            "decoder expects [b, 2, h, w] flow, got {fshape:?}"
        )));
    }
    let mut x = fused;
    let mut new_carry = Vec::with_capacity(k);
    for j in 0..k {
        let factor = arch.stride_product >> j;
        let flow_j = if factor > 1 {
            tape.avg_pool2d(flow, factor)?
        } else {
            flow
        };
        let input = tape.concat(&[x, flow_j, carry[j]], 1)?;
        let w = p.id(&format!("dec.stage{j}.w"));
        let b = p.id(&format!("dec.stage{j}.b"));
        let conv = tape.conv2d(input, w, Some(b), 1, 1)?;
        let f = tape.relu(conv)?;
        new_carry.push(f);
        x = tape.upsample_nearest2(f)?;
    }
    let hw = p.id("dec.head.w");
    let hb = p.id("dec.head.b");
    let logits = tape.conv2d(x, hw, Some(hb), 1, 1)?;
    let sig = tape.sigmoid(logits)?;
    let depth = tape.scale(sig, T::from_f64(arch.max_depth))?;
    Ok((depth, new_carry))
}

/// Which optional inputs the forward pass actually consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardSwitches {
    pub use_memory: bool,
    pub use_flow: bool,
    pub use_carry: bool,
}

impl Default for ForwardSwitches {
    fn default() -> Self {
        ForwardSwitches {
            use_memory: true,
            use_flow: true,
            use_carry: true,
        }
    }
}

impl ForwardSwitches {
    /// Resolves the switch interaction: dropping the memory makes the
    /// network strictly monocular, so the flow input and the carried
    /// decoder state go with it. `use_flow` and `use_carry` only select
    /// ablations within the memory pipeline.
    pub fn effective(self) -> ForwardSwitches {
        if self.use_memory {
            self
        } else {
            ForwardSwitches {
                use_memory: false,
                use_flow: false,
                use_carry: false,
            }
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Depth map [1, 1, h, w].
    pub depth: NodeId,
    /// Raw encoder features [1, c, h', w'], before fusion.
    pub features: NodeId,
    /// Features after memory fusion (equal to `features` when memory is off).
    pub fused: NodeId,
    /// Decoder stage outputs, the carry for the next frame.
    pub new_carry: Vec<NodeId>,
}

/// One full pass of the depth network on a single frame.
///
/// `memory` holds node ids of the visual tokens [l, c, h', w'] and
/// displacement tokens [l, 2, h, w]; mounting them as leaves or constants
/// is the caller's choice and decides where gradients flow. `flow` is the
/// backward flow at this frame and `carry` the previous frame's decoder
/// state; both fall back to zeros when absent or switched off.
pub fn full_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &MountedParams,
    arch: &ArchConfig,
    image: &Tensor<T>,
    memory: Option<(NodeId, NodeId)>,
    flow: Option<&Tensor<T>>,
    carry: Option<&[Tensor<T>]>,
    switches: ForwardSwitches,
) -> Result<ForwardOutput> {
    let switches = switches.effective();
    let is = image.shape().to_vec();
    if is.len() != 3 || is[0] != 3 {
        return Err(ModelError::Config(format!(
            "expected a [3, h, w] image, got {is:?}"
        )));
    }
    let (h, w) = (is[1], is[2]);
    let (hp, wp) = arch.token_grid(h, w)?;
    let img = tape.constant(Tensor::new(
        vec![1, 3, h, w],
        image.data().to_vec(),
    )?);
    let features = encode(tape, p, arch, img)?;

    let fused = match (switches.use_memory, memory) {
        (true, Some((vis, disp))) => {
            let vs = tape.shape(vis).to_vec();
            let ds = tape.shape(disp).to_vec();
            let l = arch.memory_length;
            if vs != [l, arch.token_channels, hp, wp] {
                return Err(ModelError::Config(format!(
                    "visual tokens must be [{l}, {}, {hp}, {wp}], got {vs:?}",
                    arch.token_channels
                )));
            }
            if ds != [l, 2, h, w] {
                return Err(ModelError::Config(format!(
                    "displacement tokens must be [{l}, 2, {h}, {w}], got {ds:?}"
                )));
            }
            let pos = pos_encode(tape, p, arch, disp)?;
            let mem_seq = memory_self_attention(tape, p, arch, vis, pos)?;
            fuse_cross_attention(tape, p, arch, features, mem_seq)?
        }
        _ => features,
    };

    let flow_node = match (switches.use_flow, flow) {
        (true, Some(f)) => {
            if f.shape() != [2, h, w] {
                return Err(ModelError::Config(format!(
                    "flow must be [2, {h}, {w}], got {:?}",
                    f.shape()
                )));
            }
            tape.constant(Tensor::new(vec![1, 2, h, w], f.data().to_vec())?)
        }
        _ => tape.constant(Tensor::zeros(&[1, 2, h, w])),
    };

    let mut carry_nodes = Vec::with_capacity(arch.decoder_scales);
    for j in 0..arch.decoder_scales {
        let sc = arch.stage_channels(j);
        let (ch, cw) = (hp << j, wp << j);
        let node = match (switches.use_carry, carry) {
            (true, Some(cs)) => {
                let t = &cs[j];
                if t.shape() != [1, sc, ch, cw] {
                    return Err(ModelError::Config(format!(
                        "carry {j} must be [1, {sc}, {ch}, {cw}], got {:?}",
                        t.shape()
                    )));
                }
                tape.constant(t.clone())
            }
            _ => tape.constant(Tensor::zeros(&[1, sc, ch, cw])),
        };
        carry_nodes.push(node);
    }

    let (depth, new_carry) = decode(tape, p, arch, fused, flow_node, &carry_nodes)?;
    Ok(ForwardOutput {
        depth,
        features,
        fused,
        new_carry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn arch_4() -> ArchConfig {
        ArchConfig {
            token_channels: 8,
            stride_product: 4,
            heads: 2,
            decoder_scales: 2,
            ..ArchConfig::default()
        }
    }

    fn mounted(
        arch: &ArchConfig,
        seed: u64,
        tape: &mut Tape<f64>,
    ) -> (ModelParams<f64>, MountedParams) {
        let p: ModelParams<f64> = ModelParams::init(arch.clone(), seed).unwrap();
        let m = p.mount(tape, false);
        (p, m)
    }

    #[test]
    fn encoder_shapes_follow_the_stride() {
        let arch = arch_4();
        let mut tape = Tape::new();
        let (_, m) = mounted(&arch, 1, &mut tape);
        let img = tape.constant(Tensor::from_fn(&[1, 3, 16, 12], |i| (i as f64).cos() * 0.1));
        let f = encode(&mut tape, &m, &arch, img).unwrap();
        assert_eq!(tape.shape(f), &[1, 8, 4, 3]);
    }

    #[test]
    fn zero_image_encodes_to_zero_features() {
        // weights times zero input plus zero bias stays zero through relu
        let arch = arch_4();
        let mut tape = Tape::new();
        let (_, m) = mounted(&arch, 2, &mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let f = encode(&mut tape, &m, &arch, img).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_stride_ladder_goes_straight_to_full_width() {
        let arch = ArchConfig {
            token_channels: 8,
            stride_product: 2,
            heads: 2,
            decoder_scales: 1,
            ..ArchConfig::default()
        };
        let mut tape = Tape::new();
        let (_, m) = mounted(&arch, 3, &mut tape);
        let img = tape.constant(Tensor::filled(&[1, 3, 4, 4], 0.5));
        let f = encode(&mut tape, &m, &arch, img).unwrap();
        assert_eq!(tape.shape(f), &[1, 8, 2, 2]);
    }

    #[test]
    fn pos_encoder_maps_displacements_to_token_grid() {
        let arch = arch_4();
        let mut tape = Tape::new();
        let (_, m) = mounted(&arch, 4, &mut tape);
        let disp = tape.constant(Tensor::filled(&[3, 2, 8, 8], 0.25));
        let pe = pos_encode(&mut tape, &m, &arch, disp).unwrap();
        assert_eq!(tape.shape(pe), &[3, 8, 2, 2]);
    }

    #[test]
    fn token_sequence_orders_positions_before_channels() {
        let mut tape: Tape<f64> = Tape::new();
        // x[b, c, y, x] with value encoding channel: data c at every position
        let x = tape.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| (i / 4) as f64));
        let seq = token_sequence(&mut tape, x).unwrap();
        assert_eq!(tape.shape(seq), &[4, 3]);
        // every row must read [0, 1, 2]: channels vary within a row
        for r in 0..4 {
            assert_eq!(
                &tape.value(seq).data()[r * 3..r * 3 + 3],
                &[0.0, 1.0, 2.0]
            );
        }
    }

    #[test]
    fn self_attention_on_one_token_is_a_double_projection() {
        // sequence length 1: softmax is 1, so out = token. Wv. Wo
        let arch = ArchConfig {
            token_channels: 4,
            stride_product: 4,
            heads: 1,
            decoder_scales: 2,
            memory_length: 1,
            ..ArchConfig::default()
        };
        let mut params: ModelParams<f64> = ModelParams::init(arch.clone(), 5).unwrap();
        params.overwrite_with(|name, t| match name {
            "attn.self.wv" => Tensor::from_fn(t.shape(), |i| (i as f64 * 0.3).sin()),
            "attn.self.wo" => Tensor::from_fn(t.shape(), |i| (i as f64 * 0.7).cos()),
            _ => t.clone(),
        });
        let mut tape = Tape::new();
        let m = params.mount(&mut tape, false);
        let token = Tensor::new(vec![1, 4, 1, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let vis = tape.constant(token.clone());
        let pos = tape.constant(Tensor::zeros(&[1, 4, 1, 1]));
        let out = memory_self_attention(&mut tape, &m, &arch, vis, pos).unwrap();
        assert_eq!(tape.shape(out), &[1, 4]);
        // hand-compute token . wv . wo
        let wv = params.get("attn.self.wv").unwrap();
        let wo = params.get("attn.self.wo").unwrap();
        let mut v = [0.0; 4];
        for j in 0..4 {
            for i in 0..4 {
                v[j] += token.data()[i] * wv.data()[i * 4 + j];
            }
        }
        let mut expect = [0.0; 4];
        for j in 0..4 {
            for i in 0..4 {
                expect[j] += v[i] * wo.data()[i * 4 + j];
            }
        }
        for j in 0..4 {
            assert!((tape.value(out).data()[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values() {
        // with wv = wo = identity, every output row must lie inside the
        // per-column min/max envelope of the value rows
        let arch = ArchConfig {
            token_channels: 4,
            stride_product: 4,
            heads: 2,
            decoder_scales: 2,
            memory_length: 3,
            ..ArchConfig::default()
        };
        let mut params: ModelParams<f64> = ModelParams::init(arch.clone(), 6).unwrap();
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        params.overwrite_with(|name, t| match name {
            "attn.self.wv" | "attn.self.wo" => eye.clone(),
            _ => t.clone(),
        });
        let mut tape = Tape::new();
        let m = params.mount(&mut tape, false);
        let vis = tape.constant(Tensor::from_fn(&[3, 4, 1, 1], |i| (i as f64 * 1.3).sin()));
        let pos = tape.constant(Tensor::from_fn(&[3, 2, 4, 4], |i| (i as f64 * 0.11).cos()));
        let pe = pos_encode(&mut tape, &m, &arch, pos).unwrap();
        let out = memory_self_attention(&mut tape, &m, &arch, vis, pe).unwrap();
        let vals = tape.value(vis);
        for col in 0..4 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for row in 0..3 {
                let v = vals.data()[row * 4 + col];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            for row in 0..3 {
                let o = tape.value(out).data()[row * 4 + col];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12, "col {col} row {row}: {o} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn zero_value_projection_makes_fusion_an_identity() {
        let arch = arch_4();
        let mut params: ModelParams<f64> = ModelParams::init(arch.clone(), 7).unwrap();
        params.overwrite_with(|name, t| {
            if name == "attn.cross.wv" {
                Tensor::zeros(t.shape())
            } else {
                t.clone()
            }
        });
        let mut tape = Tape::new();
        let m = params.mount(&mut tape, false);
        let feats = tape.constant(Tensor::from_fn(&[1, 8, 2, 2], |i| (i as f64 * 0.21).sin()));
        let mem_seq = tape.constant(Tensor::from_fn(&[12, 8], |i| (i as f64 * 0.17).cos()));
        let fused = fuse_cross_attention(&mut tape, &m, &arch, feats, mem_seq).unwrap();
        assert_eq!(tape.value(fused).data(), tape.value(feats).data());
    }

    #[test]
    fn full_forward_shapes_and_bounds() {
        let arch = arch_4();
        let mut tape = Tape::new();
        let (_, m) = mounted(&arch, 8, &mut tape);
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i % 17) as f64) / 17.0);
        let vis = tape.leaf(Tensor::from_fn(
            &[4, 8, 4, 4],
            |i| (i as f64 * 0.05).sin() * 0.1,
        ));
        let disp = tape.leaf(Tensor::zeros(&[4, 2, 16, 16]));
        let flow = Tensor::from_fn(&[2, 16, 16], |i| if i < 256 { 1.0 } else { 0.0 });
        let out = full_forward(
            &mut tape,
            &m,
            &arch,
            &img,
            Some((vis, disp)),
            Some(&flow),
            None,
            ForwardSwitches::default(),
        )
        .unwrap();
        assert_eq!(tape.shape(out.depth), &[1, 1, 16, 16]);
        assert_eq!(tape.shape(out.features), &[1, 8, 4, 4]);
        assert_eq!(tape.shape(out.fused), &[1, 8, 4, 4]);
        assert_eq!(out.new_carry.len(), 2);
        assert_eq!(tape.shape(out.new_carry[0]), &[1, 4, 4, 4]);
        assert_eq!(tape.shape(out.new_carry[1]), &[1, 4, 8, 8]);
        for &d in tape.value(out.depth).data() {
            assert!(d > 0.0 && d < arch.max_depth);
        }
    }

    #[test]
    fn memory_switch_off_reduces_to_the_bare_network() {
        let arch = arch_4();
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 7 % 13) as f64) / 13.0);

        let mut tape_a: Tape<f64> = Tape::new();
        let p: ModelParams<f64> = ModelParams::init(arch.clone(), 9).unwrap();
        let ma = p.mount(&mut tape_a, false);
        let vis = tape_a.leaf(Tensor::filled(&[4, 8, 2, 2], 0.3));
        let disp = tape_a.leaf(Tensor::filled(&[4, 2, 8, 8], 1.0));
        let off = ForwardSwitches {
            use_memory: false,
            ..ForwardSwitches::default()
        };
        let out_a = full_forward(
            &mut tape_a, &ma, &arch, &img, Some((vis, disp)), None, None, off,
        )
        .unwrap();

        let mut tape_b: Tape<f64> = Tape::new();
        let mb = p.mount(&mut tape_b, false);
        let out_b = full_forward(
            &mut tape_b,
            &mb,
            &arch,
            &img,
            None,
            None,
            None,
            ForwardSwitches::default(),
        )
        .unwrap();
        assert_eq!(
            tape_a.value(out_a.depth).data(),
            tape_b.value(out_b.depth).data()
        );
        assert_eq!(
            tape_a.value(out_a.fused).data(),
            tape_a.value(out_a.features).data()
        );
    }

    #[test]
    fn repeated_forward_is_bitwise_deterministic() {
        let arch = arch_4();
        let p: ModelParams<f64> = ModelParams::init(arch.clone(), 10).unwrap();
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.013).sin());
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let m = p.mount(&mut tape, false);
            let vis = tape.leaf(Tensor::from_fn(&[4, 8, 2, 2], |i| (i as f64 * 0.19).cos()));
            let disp = tape.leaf(Tensor::from_fn(&[4, 2, 8, 8], |i| ((i % 5) as f64) - 2.0));
            let out = full_forward(
                &mut tape,
                &m,
                &arch,
                &img,
                Some((vis, disp)),
                None,
                None,
                ForwardSwitches::default(),
            )
            .unwrap();
            tape.value(out.depth).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn carry_shape_mismatch_is_rejected() {
        let arch = arch_4();
        let mut tape = Tape::new();
        let (_, m) = mounted(&arch, 11, &mut tape);
        let img = Tensor::zeros(&[3, 8, 8]);
        let bad_carry = vec![
            Tensor::zeros(&[1, 4, 2, 2]),
            Tensor::zeros(&[1, 4, 3, 3]),
        ];
        let err = full_forward(
            &mut tape,
            &m,
            &arch,
            &img,
            None,
            None,
            Some(&bad_carry),
            ForwardSwitches::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("carry 1"));
    }
}
