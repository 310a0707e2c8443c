//! Parameter registry: shapes, initialization, tape mounting, SGD steps,
//! and byte-exact serialization.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{ArchConfig, ModelError, ModelParams};
use crate::tensor::{read_blob, write_blob, Gradients, NodeId, Scalar, Tape, Tensor};

/// Node ids of every parameter mounted on one tape, in registry order.
#[derive(Debug, Clone)]
pub struct MountedParams {
    ids: IndexMap<String, NodeId>,
    trainable: bool,
}

impl MountedParams {
    /// Parameter names are a closed set fixed by the architecture, so a miss
    /// is a programming error, not an input error.
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not mounted"))
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Ladder of stride-2 convolutions shared by the encoder and the
/// displacement encoder: `in_c` -> c/2 -> c -> ... -> c, then one stride-1
/// refinement at full width. With one downsampling stage the first
/// convolution goes straight to full width.
fn ladder_widths(arch: &ArchConfig, in_c: usize) -> Vec<(usize, usize)> {
    let c = arch.token_channels;
    let k = arch.decoder_scales;
    let mut widths = Vec::with_capacity(k + 1);
    let mut prev = in_c;
    for i in 0..k {
        let out = if i == 0 && k > 1 { c / 2 } else { c };
        widths.push((prev, out));
        prev = out;
    }
    widths.push((prev, c));
    widths
}

/// Every parameter name with its shape, in draw and serialization order.
fn param_shapes(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let c = arch.token_channels;
    let k = arch.decoder_scales;
    let mut out = Vec::new();
    for (prefix, in_c) in [("enc", 3usize), ("pos", 2usize)] {
        let widths = ladder_widths(arch, in_c);
        for (i, &(ci, co)) in widths.iter().enumerate() {
            let name = if i < k {
                format!("{prefix}.conv{i}")
            } else {
                format!("{prefix}.refine")
            };
            out.push((format!("{name}.w"), vec![co, ci, 3, 3]));
            out.push((format!("{name}.b"), vec![co]));
        }
    }
    for block in ["self", "cross"] {
        for mat in ["wq", "wk", "wv", "wo"] {
            out.push((format!("attn.{block}.{mat}"), vec![c, c]));
        }
    }
    let mut prev = c;
    for j in 0..k {
        let sc = arch.stage_channels(j);
        out.push((format!("dec.stage{j}.w"), vec![sc, prev + 2 + sc, 3, 3]));
        out.push((format!("dec.stage{j}.b"), vec![sc]));
        prev = sc;
    }
    out.push(("dec.head.w".to_string(), vec![1, prev, 3, 3]));
    out.push(("dec.head.b".to_string(), vec![1]));
    out
}

impl<T: Scalar> ModelParams<T> {
    /// Freshly initialized parameters: normal weights scaled by fan-in
    /// (He for convolutions feeding relu, 1/sqrt(c) for attention
    /// projections), zero biases. A seed fully determines every value.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut map = IndexMap::new();
        for (name, shape) in param_shapes(&arch) {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                // output projections of the attention blocks start damped so
                // the memory pathway perturbs a fresh network only gently and
                // training can grow its influence from near-neutral
                let gain = if name.starts_with("attn.") && name.ends_with(".wo") {
                    0.25
                } else if name.starts_with("attn.") {
                    1.0
                } else {
                    2.0
                };
                let std = (gain / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&shape, |_| T::from_f64(dist.sample(&mut rng)))
            };
            map.insert(name, t);
        }
        Ok(ModelParams { arch, map })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        match self.map.get_mut(name) {
            None => Err(ModelError::UnknownParam(name.to_string())),
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(ModelError::Tensor(
                        crate::tensor::TensorError::ShapeMismatch {
                            op: "set_param",
                            lhs: slot.shape().to_vec(),
                            rhs: value.shape().to_vec(),
                        },
                    ));
                }
                *slot = value;
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_tensors(&self) -> usize {
        self.map.len()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on the tape, as leaves when `trainable` and as
    /// constants otherwise. Frozen parameters therefore record no backward
    /// rules at all.
    pub fn mount(&self, tape: &mut Tape<T>, trainable: bool) -> MountedParams {
        let mut ids = IndexMap::new();
        for (name, t) in &self.map {
            let id = if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            ids.insert(name.clone(), id);
        }
        MountedParams { ids, trainable }
    }

    /// Plain gradient step `p -= lr * g` for every mounted parameter that
    /// received a gradient.
    pub fn sgd_step(
        &mut self,
        mounted: &MountedParams,
        grads: &Gradients<T>,
        lr: T,
    ) -> Result<usize, ModelError> {
        let mut updated = 0;
        for (name, id) in mounted.iter() {
            if let Some(g) = grads.get(id) {
                let cur = self.map.get(name).expect("mounted name exists");
                let next = cur.saxpy_neg(lr, g)?;
                self.map[name] = next;
                updated += 1;
            }
        }
        Ok(updated)
    }

    /// All parameters as consecutive named blobs.
    pub fn write_blobs(&self, buf: &mut Vec<u8>) {
        for (name, t) in &self.map {
            write_blob(buf, name, t);
        }
    }

    /// Reads back what [`Self::write_blobs`] wrote. Names, order, shapes and
    /// dtype must all match the architecture exactly.
    pub fn read_blobs(
        arch: ArchConfig,
        bytes: &[u8],
        pos: &mut usize,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut map = IndexMap::new();
        for (name, shape) in param_shapes(&arch) {
            let (got_name, data) =
                read_blob(bytes, pos).map_err(ModelError::Tensor)?;
            if got_name != name {
                return Err(ModelError::Config(format!(
                    "parameter stream out of order: expected '{name}', found '{got_name}'"
                )));
            }
            let t: Tensor<T> = data.into_tensor().map_err(ModelError::Tensor)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Tensor(
                    crate::tensor::TensorError::ShapeMismatch {
                        op: "read_params",
                        lhs: t.shape().to_vec(),
                        rhs: shape,
                    },
                ));
            }
            map.insert(name, t);
        }
        Ok(ModelParams { arch, map })
    }

    /// Hex digest over the serialized parameters; any value change shows.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.write_blobs(&mut buf);
        let digest = Sha256::digest(&buf);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces every parameter via `f`, keeping names and shapes. Test aid
    /// for building hand-crafted networks.
    pub fn overwrite_with(&mut self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) {
        let names: Vec<String> = self.map.keys().cloned().collect();
        for name in names {
            let cur = &self.map[&name];
            let next = f(&name, cur);
            assert_eq!(cur.shape(), next.shape(), "overwrite must keep shape of {name}");
            self.map[&name] = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            token_channels: 8,
            stride_product: 4,
            heads: 2,
            decoder_scales: 2,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn shapes_cover_every_block() {
        let shapes = param_shapes(&small_arch());
        let names: Vec<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"enc.conv0.w"));
        assert!(names.contains(&"enc.conv1.w"));
        assert!(names.contains(&"enc.refine.w"));
        assert!(names.contains(&"pos.conv0.w"));
        assert!(names.contains(&"attn.self.wq"));
        assert!(names.contains(&"attn.cross.wo"));
        assert!(names.contains(&"dec.stage0.w"));
        assert!(names.contains(&"dec.stage1.w"));
        assert!(names.contains(&"dec.head.w"));
        // first encoder conv halves the width, 8 -> 4
        let (_, s) = &shapes[0];
        assert_eq!(s, &vec![4, 3, 3, 3]);
    }

    #[test]
    fn decoder_inputs_account_for_flow_and_carry() {
        let arch = small_arch();
        let shapes: IndexMap<String, Vec<usize>> = param_shapes(&arch).into_iter().collect();
        // stage 0 reads fused (8) + flow (2) + carry (stage_channels(0) = 4)
        assert_eq!(shapes["dec.stage0.w"], vec![4, 8 + 2 + 4, 3, 3]);
        // stage 1 reads stage 0 output (4) + flow (2) + carry (4)
        assert_eq!(shapes["dec.stage1.w"], vec![4, 4 + 2 + 4, 3, 3]);
        assert_eq!(shapes["dec.head.w"], vec![1, 4, 3, 3]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a: ModelParams<f64> = ModelParams::init(small_arch(), 7).unwrap();
        let b: ModelParams<f64> = ModelParams::init(small_arch(), 7).unwrap();
        let c: ModelParams<f64> = ModelParams::init(small_arch(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn biases_start_at_zero_weights_do_not() {
        let p: ModelParams<f64> = ModelParams::init(small_arch(), 1).unwrap();
        assert!(p.get("enc.conv0.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("enc.conv0.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_mount_produces_no_parameter_gradients() {
        let p: ModelParams<f64> = ModelParams::init(small_arch(), 3).unwrap();
        let mut tape = Tape::new();
        let mounted = p.mount(&mut tape, false);
        let x = tape.leaf(Tensor::filled(&[8, 8], 1.0));
        let wq = mounted.id("attn.self.wq");
        let y = tape.matmul(x, wq).unwrap();
        let root = tape.sum_all(y).unwrap();
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(wq).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn sgd_step_applies_only_where_gradients_exist() {
        let mut p: ModelParams<f64> = ModelParams::init(small_arch(), 3).unwrap();
        let before_wq = p.get("attn.self.wq").unwrap().clone();
        let before_wk = p.get("attn.self.wk").unwrap().clone();
        let mut tape = Tape::new();
        let mounted = p.mount(&mut tape, true);
        let x = tape.constant(Tensor::filled(&[8, 8], 1.0));
        let y = tape.matmul(x, mounted.id("attn.self.wq")).unwrap();
        let root = tape.sum_all(y).unwrap();
        let grads = tape.backward(root).unwrap();
        let updated = p.sgd_step(&mounted, &grads, 0.5).unwrap();
        assert_eq!(updated, 1);
        assert_ne!(p.get("attn.self.wq").unwrap(), &before_wq);
        assert_eq!(p.get("attn.self.wk").unwrap(), &before_wk);
        // x is constant: d(sum(x wq))/d(wq) column j = sum over rows = 8
        let got = p.get("attn.self.wq").unwrap();
        for i in 0..64 {
            assert!((got.data()[i] - (before_wq.data()[i] - 0.5 * 8.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_round_trip_is_byte_identical() {
        let p: ModelParams<f64> = ModelParams::init(small_arch(), 11).unwrap();
        let mut buf = Vec::new();
        p.write_blobs(&mut buf);
        let mut pos = 0;
        let q: ModelParams<f64> =
            ModelParams::read_blobs(small_arch(), &buf, &mut pos).unwrap();
        assert_eq!(pos, buf.len());
        let mut buf2 = Vec::new();
        q.write_blobs(&mut buf2);
        assert_eq!(buf, buf2);
    }

    #[test]
    fn reordered_blob_stream_is_rejected() {
        let p: ModelParams<f64> = ModelParams::init(small_arch(), 11).unwrap();
        let mut a = Vec::new();
        write_blob(&mut a, "enc.conv1.w", p.get("enc.conv1.w").unwrap());
        let err = ModelParams::<f64>::read_blobs(small_arch(), &a, &mut 0).unwrap_err();
        assert!(err.to_string().contains("expected 'enc.conv0.w'"));
    }
}
