//! Synthetic video generator: layered 2-D scenes with rigidly moving
//! objects over a textured background, exact ground-truth depth, and exact
//! optical flow between arbitrary frame pairs with occlusion-aware
//! validity.
//!
//! Textures ride on surfaces, not on frames, so with integer velocities the
//! backward-warped previous frame reproduces the current frame bitwise on
//! valid pixels. Invalid flow entries (out of frame, or the surface is
//! hidden in the other frame) carry a large sentinel that pushes warp
//! samples far out of bounds, so every consumer of the warp mask treats
//! them correctly without extra plumbing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::flow::{load_flo, FlowDirection, FlowError, FlowField};
use crate::tensor::blob::{read_blob_from, write_blob_to};
use crate::tensor::{Tensor, TensorError};

/// Sentinel written into flow components whose pixel has no valid
/// correspondence. Far outside any frame, so bilinear warping lands out of
/// bounds and the warp mask marks the pixel invalid.
pub const INVALID_FLOW: f32 = 1e10;

/// True when a flow component pair is a real displacement, not the
/// invalidity sentinel.
pub fn flow_entry_valid(u: f32, v: f32) -> bool {
    u.abs() < 1e9 && v.abs() < 1e9
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("bad scene: {0}")]
    BadScene(String),
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("malformed index line {line_no}: {line:?}")]
    BadIndex { line_no: usize, line: String },
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
    #[error("{path}: {err}")]
    Blob {
        path: PathBuf,
        #[source]
        err: TensorError,
    },
    #[error("{path}: {err}")]
    Flo {
        path: PathBuf,
        #[source]
        err: FlowError,
    },
    #[error("sequence supports strides up to {available}, requested {requested}")]
    StrideUnavailable { available: usize, requested: usize },
    #[error("frame {t} out of range, sequence has {len}")]
    FrameRange { t: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjShape {
    /// Axis-aligned rectangle, extents in pixels.
    Rect { w: usize, h: usize },
    /// Disk of the given radius in pixels.
    Disk { r: usize },
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub shape: ObjShape,
    /// Constant distance of the surface, must be nearer than the background.
    pub depth: f64,
    /// Pixels per frame; integer components keep warp consistency exact.
    pub velocity: (f64, f64),
    /// Initial position: rectangle top-left corner or disk center.
    pub start: (f64, f64),
    pub albedo: [f64; 3],
    /// Amplitude of the per-surface speckle noise; 0 for flat shading.
    pub noise_amp: f64,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background_depth: f64,
    /// Lattice cell size of the background value noise.
    pub texture_cell: usize,
    /// Maximum per-frame integer jitter added to each moving axis.
    pub jitter: i32,
    /// Amplitude of a per-frame global gain wobble applied to the rendered
    /// image: frame t is scaled by `1 + flicker * u_t` with `u_t` a seeded
    /// value in [-1, 1). Zero keeps rendering purely geometric, so warping
    /// the previous frame reproduces the current one exactly on co-visible
    /// pixels; a positive value makes consecutive frames photometrically
    /// distinct the way real exposure noise does.
    pub flicker: f64,
    /// Amplitude of a per-object, per-frame brightness wobble: object k in
    /// frame t is shaded with gain `1 + shimmer * u_{k,t}`, `u` a seeded
    /// value in [-1, 1). The background is unaffected. Zero keeps every
    /// surface's shading constant over time; a positive value makes an
    /// object's single-frame brightness only a noisy version of its albedo,
    /// so appearance cues must be pooled over frames to be reliable.
    pub shimmer: f64,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(SynthError::BadScene("empty extents or no frames".into()));
        }
        if self.texture_cell == 0 {
            return Err(SynthError::BadScene("texture cell must be positive".into()));
        }
        if !(self.background_depth > 0.0) {
            return Err(SynthError::BadScene("background depth must be positive".into()));
        }
        if !(self.flicker >= 0.0 && self.flicker < 1.0) {
            return Err(SynthError::BadScene(format!(
                "flicker {} must lie in [0, 1)",
                self.flicker
            )));
        }
        if !(self.shimmer >= 0.0 && self.shimmer < 1.0) {
            return Err(SynthError::BadScene(format!(
                "shimmer {} must lie in [0, 1)",
                self.shimmer
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.depth > 0.0 && o.depth < self.background_depth) {
                return Err(SynthError::BadScene(format!(
                    "object {i} depth {} must sit in front of the background at {}",
                    o.depth, self.background_depth
                )));
            }
            let (bw, bh) = bbox_extent(o.shape);
            if bw + 2 > self.width || bh + 2 > self.height {
                return Err(SynthError::BadScene(format!(
                    "object {i} of extent {bw}x{bh} does not fit in {}x{}",
                    self.width, self.height
                )));
            }
            if o.velocity.0.abs() >= self.width as f64 || o.velocity.1.abs() >= self.height as f64 {
                return Err(SynthError::BadScene(format!(
                    "object {i} velocity {:?} crosses the frame in one step",
                    o.velocity
                )));
            }
        }
        Ok(())
    }
}

/// Bounding-box extent of a shape; positions are constrained so the whole
/// box stays inside the frame.
fn bbox_extent(shape: ObjShape) -> (usize, usize) {
    match shape {
        ObjShape::Rect { w, h } => (w, h),
        ObjShape::Disk { r } => (2 * r + 1, 2 * r + 1),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic hash noise in [-1, 1).
fn hash_noise(seed: u64, tag: u64, c: usize, x: i64, y: i64) -> f64 {
    let mut h = splitmix64(seed ^ tag.wrapping_mul(0xa076_1d64_78bd_642f));
    h = splitmix64(h ^ (c as u64));
    h = splitmix64(h ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = splitmix64(h ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// A built scene: trajectories resolved frame by frame, visibility maps
/// cached, every rendered product a pure function of (spec, seed).
pub struct Scene {
    spec: SceneSpec,
    seed: u64,
    /// Per frame, per object: resolved position (top-left or center).
    positions: Vec<Vec<(f64, f64)>>,
    /// Per frame: visible surface per pixel, 0 background, i+1 object i.
    ids: Vec<Vec<u32>>,
    /// Cached background image, [3, h, w].
    background: Tensor<f32>,
}

impl Scene {
    pub fn build(spec: SceneSpec, seed: u64) -> Result<Self, SynthError> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let positions = roll_positions(&spec, &mut rng);
        let ids = (0..spec.frames)
            .map(|t| id_map(&spec, &positions[t]))
            .collect();
        let background = render_background(&spec, seed);
        Ok(Scene {
            spec,
            seed,
            positions,
            ids,
            background,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    fn check_frame(&self, t: usize) -> Result<(), SynthError> {
        if t >= self.spec.frames {
            return Err(SynthError::FrameRange {
                t,
                len: self.spec.frames,
            });
        }
        Ok(())
    }

    /// Rendered frame, [3, h, w], values in [0, 1].
    pub fn image(&self, t: usize) -> Result<Tensor<f32>, SynthError> {
        self.check_frame(t)?;
        let (w, h) = (self.spec.width, self.spec.height);
        let mut data = self.background.data().to_vec();
        let ids = &self.ids[t];
        let gains: Vec<f64> = (0..self.spec.objects.len())
            .map(|k| {
                if self.spec.shimmer == 0.0 {
                    1.0
                } else {
                    1.0 + self.spec.shimmer * hash_noise(self.seed, 0x0b9a1e, k, t as i64, 0)
                }
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let id = ids[y * w + x];
                if id == 0 {
                    continue;
                }
                let obj = &self.spec.objects[(id - 1) as usize];
                let gain = gains[(id - 1) as usize];
                let (px, py) = self.positions[t][(id - 1) as usize];
                let lx = (x as f64 - px).floor() as i64;
                let ly = (y as f64 - py).floor() as i64;
                for c in 0..3 {
                    let n = hash_noise(self.seed, 0x0b1ec7 + id as u64, c, lx, ly);
                    let v = ((obj.albedo[c] + obj.noise_amp * n) * gain).clamp(0.0, 1.0);
                    data[c * h * w + y * w + x] = v as f32;
                }
            }
        }
        if self.spec.flicker != 0.0 {
            let gain = 1.0 + self.spec.flicker * hash_noise(self.seed, 0xf11c4e, 0, t as i64, 0);
            for v in &mut data {
                *v = ((*v as f64 * gain).clamp(0.0, 1.0)) as f32;
            }
        }
        Ok(Tensor::new(vec![3, h, w], data).expect("render size fixed"))
    }

    /// Exact depth of the nearest surface per pixel, [h, w].
    pub fn depth(&self, t: usize) -> Result<Tensor<f32>, SynthError> {
        self.check_frame(t)?;
        let (w, h) = (self.spec.width, self.spec.height);
        let ids = &self.ids[t];
        let data = (0..h * w)
            .map(|i| {
                let id = ids[i];
                if id == 0 {
                    self.spec.background_depth as f32
                } else {
                    self.spec.objects[(id - 1) as usize].depth as f32
                }
            })
            .collect();
        Ok(Tensor::new(vec![h, w], data).expect("render size fixed"))
    }

    /// Visible surface per pixel: 0 background, i+1 for object i.
    pub fn surface_ids(&self, t: usize) -> Result<&[u32], SynthError> {
        self.check_frame(t)?;
        Ok(&self.ids[t])
    }

    /// Exact flow from frame `t_from` toward frame `t_to`: each valid pixel
    /// displaces to where its visible surface sits at `t_to`. Pixels whose
    /// surface is out of frame or hidden at `t_to` carry the invalid
    /// sentinel. Direction is backward when `t_to < t_from`.
    pub fn flow(&self, t_from: usize, t_to: usize) -> Result<FlowField<f32>, SynthError> {
        self.check_frame(t_from)?;
        self.check_frame(t_to)?;
        let (w, h) = (self.spec.width, self.spec.height);
        let ids_from = &self.ids[t_from];
        let ids_to = &self.ids[t_to];
        let mut u = vec![0f32; w * h];
        let mut v = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let id = ids_from[i];
                let (du, dv) = if id == 0 {
                    (0.0, 0.0)
                } else {
                    let (fx, fy) = self.positions[t_from][(id - 1) as usize];
                    let (tx, ty) = self.positions[t_to][(id - 1) as usize];
                    (tx - fx, ty - fy)
                };
                let qx = x as f64 + du;
                let qy = y as f64 + dv;
                // in-bounds and same surface at the (rounded) target pixel;
                // integer motion makes the rounding a no-op
                let inside = qx >= 0.0 && qx <= (w - 1) as f64 && qy >= 0.0 && qy <= (h - 1) as f64;
                let same = inside && {
                    let qi = (qy.round() as usize) * w + (qx.round() as usize);
                    ids_to[qi] == id
                };
                if same {
                    u[i] = du as f32;
                    v[i] = dv as f32;
                } else {
                    u[i] = INVALID_FLOW;
                    v[i] = INVALID_FLOW;
                }
            }
        }
        let dir = if t_to < t_from {
            FlowDirection::Backward
        } else {
            FlowDirection::Forward
        };
        Ok(FlowField::new(w, h, u, v, dir).expect("lattice-sized components"))
    }

    /// Frame records with stride-1 flows plus backward flows for every
    /// extra stride requested.
    pub fn records(&self, extra_strides: &[usize]) -> Result<Vec<FrameRecord>, SynthError> {
        let n = self.spec.frames;
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let mut strided = BTreeMap::new();
            for &r in extra_strides {
                if r >= 2 && t >= r {
                    strided.insert(r, self.flow(t, t - r)?);
                }
            }
            out.push(FrameRecord {
                image: self.image(t)?,
                depth: self.depth(t)?,
                flow_bw: if t > 0 { Some(self.flow(t, t - 1)?) } else { None },
                flow_fw: if t + 1 < n { Some(self.flow(t, t + 1)?) } else { None },
                strided_bw: strided,
            });
        }
        Ok(out)
    }
}

fn roll_positions(spec: &SceneSpec, rng: &mut ChaCha20Rng) -> Vec<Vec<(f64, f64)>> {
    let mut vels: Vec<(f64, f64)> = spec.objects.iter().map(|o| o.velocity).collect();
    let mut pos: Vec<(f64, f64)> = spec
        .objects
        .iter()
        .map(|o| clamp_into_frame(spec, o.shape, o.start))
        .collect();
    let mut frames = vec![pos.clone()];
    for _ in 1..spec.frames {
        for (i, o) in spec.objects.iter().enumerate() {
            let (lo, hi) = position_bounds(spec, o.shape);
            let jx = axis_jitter(spec.jitter, vels[i].0, rng);
            let jy = axis_jitter(spec.jitter, vels[i].1, rng);
            let mut nx = pos[i].0 + vels[i].0 + jx;
            if nx < lo.0 || nx > hi.0 {
                vels[i].0 = -vels[i].0;
                nx = (pos[i].0 + vels[i].0 + jx).clamp(lo.0, hi.0);
            }
            let mut ny = pos[i].1 + vels[i].1 + jy;
            if ny < lo.1 || ny > hi.1 {
                vels[i].1 = -vels[i].1;
                ny = (pos[i].1 + vels[i].1 + jy).clamp(lo.1, hi.1);
            }
            pos[i] = (nx, ny);
        }
        frames.push(pos.clone());
    }
    frames
}

fn axis_jitter(jitter: i32, vel: f64, rng: &mut ChaCha20Rng) -> f64 {
    // static axes stay static so all-zero velocities mean a frozen scene
    if jitter == 0 || vel == 0.0 {
        0.0
    } else {
        rng.gen_range(-jitter..=jitter) as f64
    }
}

fn position_bounds(spec: &SceneSpec, shape: ObjShape) -> ((f64, f64), (f64, f64)) {
    match shape {
        ObjShape::Rect { w, h } => (
            (0.0, 0.0),
            ((spec.width - w) as f64, (spec.height - h) as f64),
        ),
        ObjShape::Disk { r } => (
            (r as f64, r as f64),
            ((spec.width - 1 - r) as f64, (spec.height - 1 - r) as f64),
        ),
    }
}

fn clamp_into_frame(spec: &SceneSpec, shape: ObjShape, start: (f64, f64)) -> (f64, f64) {
    let (lo, hi) = position_bounds(spec, shape);
    (start.0.clamp(lo.0, hi.0), start.1.clamp(lo.1, hi.1))
}

fn id_map(spec: &SceneSpec, positions: &[(f64, f64)]) -> Vec<u32> {
    let (w, h) = (spec.width, spec.height);
    let mut ids = vec![0u32; w * h];
    // painter order: far to near, nearest surface wins
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| {
        spec.objects[b]
            .depth
            .partial_cmp(&spec.objects[a].depth)
            .expect("depths validated finite")
            .then(b.cmp(&a))
    });
    for oi in order {
        let o = &spec.objects[oi];
        let (px, py) = positions[oi];
        match o.shape {
            ObjShape::Rect { w: rw, h: rh } => {
                for y in 0..h {
                    let yf = y as f64;
                    if yf < py || yf >= py + rh as f64 {
                        continue;
                    }
                    for x in 0..w {
                        let xf = x as f64;
                        if xf >= px && xf < px + rw as f64 {
                            ids[y * w + x] = oi as u32 + 1;
                        }
                    }
                }
            }
            ObjShape::Disk { r } => {
                let rr = (r * r) as f64;
                for y in 0..h {
                    let dy = y as f64 - py;
                    for x in 0..w {
                        let dx = x as f64 - px;
                        if dx * dx + dy * dy <= rr {
                            ids[y * w + x] = oi as u32 + 1;
                        }
                    }
                }
            }
        }
    }
    ids
}

fn render_background(spec: &SceneSpec, seed: u64) -> Tensor<f32> {
    let (w, h) = (spec.width, spec.height);
    let cell = spec.texture_cell;
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let lattice: Vec<f64> = (0..gw * gh)
            .map(|i| hash_noise(seed, 0xba5e, c, (i % gw) as i64, (i / gw) as i64))
            .collect();
        for y in 0..h {
            let gy = y / cell;
            let fy = (y % cell) as f64 / cell as f64;
            for x in 0..w {
                let gx = x / cell;
                let fx = (x % cell) as f64 / cell as f64;
                let v00 = lattice[gy * gw + gx];
                let v01 = lattice[gy * gw + gx + 1];
                let v10 = lattice[(gy + 1) * gw + gx];
                let v11 = lattice[(gy + 1) * gw + gx + 1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                let n = top + (bot - top) * fy;
                data.push((0.45 + 0.25 * n) as f32);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("render size fixed")
}

/// One frame's rendered products. The stride map holds backward flows to
/// `t - r` for strides beyond 1, keyed by r.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub flow_bw: Option<FlowField<f32>>,
    pub flow_fw: Option<FlowField<f32>>,
    pub strided_bw: BTreeMap<usize, FlowField<f32>>,
}

/// Uniform view over clip providers: built scenes answer any stride
/// exactly, sequences loaded from disk answer the strides they have files
/// for.
pub trait ClipSource {
    fn num_frames(&self) -> usize;
    fn image(&self, t: usize) -> Result<Tensor<f32>, SynthError>;
    fn depth(&self, t: usize) -> Result<Tensor<f32>, SynthError>;
    /// Backward flow from frame t to frame t - r.
    fn flow_to_prev(&self, t: usize, r: usize) -> Result<FlowField<f32>, SynthError>;
    fn max_stride(&self) -> usize;
}

impl ClipSource for Scene {
    fn num_frames(&self) -> usize {
        self.frames()
    }

    fn image(&self, t: usize) -> Result<Tensor<f32>, SynthError> {
        Scene::image(self, t)
    }

    fn depth(&self, t: usize) -> Result<Tensor<f32>, SynthError> {
        Scene::depth(self, t)
    }

    fn flow_to_prev(&self, t: usize, r: usize) -> Result<FlowField<f32>, SynthError> {
        if r == 0 || r > t {
            return Err(SynthError::FrameRange {
                t: t.wrapping_sub(r),
                len: self.frames(),
            });
        }
        self.flow(t, t - r)
    }

    fn max_stride(&self) -> usize {
        usize::MAX
    }
}

/// A sequence read back from a dataset directory.
#[derive(Debug)]
pub struct LoadedSequence {
    pub frames: Vec<FrameRecord>,
}

impl ClipSource for LoadedSequence {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn image(&self, t: usize) -> Result<Tensor<f32>, SynthError> {
        self.frames
            .get(t)
            .map(|f| f.image.clone())
            .ok_or(SynthError::FrameRange {
                t,
                len: self.frames.len(),
            })
    }

    fn depth(&self, t: usize) -> Result<Tensor<f32>, SynthError> {
        self.frames
            .get(t)
            .map(|f| f.depth.clone())
            .ok_or(SynthError::FrameRange {
                t,
                len: self.frames.len(),
            })
    }

    fn flow_to_prev(&self, t: usize, r: usize) -> Result<FlowField<f32>, SynthError> {
        let rec = self.frames.get(t).ok_or(SynthError::FrameRange {
            t,
            len: self.frames.len(),
        })?;
        let found = match r {
            1 => rec.flow_bw.clone(),
            _ => rec.strided_bw.get(&r).cloned(),
        };
        found.ok_or(SynthError::StrideUnavailable {
            available: self.max_stride(),
            requested: r,
        })
    }

    fn max_stride(&self) -> usize {
        self.frames
            .iter()
            .flat_map(|f| f.strided_bw.keys().copied())
            .max()
            .unwrap_or(1)
    }
}

fn io_err(path: &Path, err: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.to_path_buf(),
        err,
    }
}

/// Writes sequences under `dir` as `seq_{k}/` directories plus an
/// `index.txt` naming each sequence and its frame count. Per frame:
/// a 16-bit PGM preview and the authoritative f32 blob for image and depth,
/// and `.flo` files for whichever flows the record holds.
pub fn write_dataset(sequences: &[Vec<FrameRecord>], dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut index = String::new();
    for (k, frames) in sequences.iter().enumerate() {
        let seq_dir = dir.join(format!("seq_{k}"));
        fs::create_dir_all(&seq_dir).map_err(|e| io_err(&seq_dir, e))?;
        writeln!(index, "seq_{k} {}", frames.len()).expect("string write");
        for (t, rec) in frames.iter().enumerate() {
            write_blob_file(&seq_dir.join(format!("img_{t}.f32")), "img", &rec.image)?;
            write_blob_file(&seq_dir.join(format!("depth_{t}.f32")), "depth", &rec.depth)?;
            write_pgm16(
                &seq_dir.join(format!("img_{t}.pgm")),
                &luma(&rec.image),
                rec.image.shape()[2],
                rec.image.shape()[1],
                1.0,
            )?;
            write_pgm16(
                &seq_dir.join(format!("depth_{t}.pgm")),
                rec.depth.data(),
                rec.depth.shape()[1],
                rec.depth.shape()[0],
                rec.depth.data().iter().cloned().fold(0.0, f32::max).max(1e-6),
            )?;
            if let Some(f) = &rec.flow_bw {
                save_flo(f, &seq_dir.join(format!("flow_bw_{t}.flo")))?;
            }
            if let Some(f) = &rec.flow_fw {
                save_flo(f, &seq_dir.join(format!("flow_fw_{t}.flo")))?;
            }
            for (r, f) in &rec.strided_bw {
                save_flo(f, &seq_dir.join(format!("flow_bw_r{r}_{t}.flo")))?;
            }
        }
    }
    fs::write(dir.join("index.txt"), index).map_err(|e| io_err(&dir.join("index.txt"), e))
}

/// Reads a dataset directory written by `write_dataset`. PGM previews are
/// ignored; the blobs are authoritative.
pub fn read_dataset(dir: &Path) -> Result<Vec<LoadedSequence>, SynthError> {
    let index_path = dir.join("index.txt");
    let index = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, count) = line.split_once(' ').ok_or(SynthError::BadIndex {
            line_no: line_no + 1,
            line: line.to_string(),
        })?;
        let count: usize = count.trim().parse().map_err(|_| SynthError::BadIndex {
            line_no: line_no + 1,
            line: line.to_string(),
        })?;
        let seq_dir = dir.join(name);
        let mut frames = Vec::with_capacity(count);
        for t in 0..count {
            let image = read_blob_file(&seq_dir.join(format!("img_{t}.f32")))?;
            let depth = read_blob_file(&seq_dir.join(format!("depth_{t}.f32")))?;
            let flow_bw = maybe_flo(
                &seq_dir.join(format!("flow_bw_{t}.flo")),
                FlowDirection::Backward,
                t > 0,
            )?;
            let flow_fw = maybe_flo(
                &seq_dir.join(format!("flow_fw_{t}.flo")),
                FlowDirection::Forward,
                t + 1 < count,
            )?;
            let mut strided_bw = BTreeMap::new();
            for r in 2..=t {
                let p = seq_dir.join(format!("flow_bw_r{r}_{t}.flo"));
                if p.exists() {
                    strided_bw.insert(r, load_flo_file(&p, FlowDirection::Backward)?);
                }
            }
            frames.push(FrameRecord {
                image,
                depth,
                flow_bw,
                flow_fw,
                strided_bw,
            });
        }
        out.push(LoadedSequence { frames });
    }
    Ok(out)
}

/// Writes one f32 tensor as a shape-tagged binary blob file.
pub fn write_blob_file(path: &Path, name: &str, t: &Tensor<f32>) -> Result<(), SynthError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_blob_to(&mut f, name, t).map_err(|e| SynthError::Blob {
        path: path.to_path_buf(),
        err: e,
    })
}

/// Reads one f32 tensor blob written by [`write_blob_file`].
pub fn read_blob_file(path: &Path) -> Result<Tensor<f32>, SynthError> {
    if !path.exists() {
        return Err(SynthError::MissingFile(path.to_path_buf()));
    }
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let (_, data) = read_blob_from(&mut f).map_err(|e| SynthError::Blob {
        path: path.to_path_buf(),
        err: e,
    })?;
    data.into_tensor::<f32>().map_err(|e| SynthError::Blob {
        path: path.to_path_buf(),
        err: e,
    })
}

fn save_flo(flow: &FlowField<f32>, path: &Path) -> Result<(), SynthError> {
    flow.save_flo(path).map_err(|e| SynthError::Flo {
        path: path.to_path_buf(),
        err: e,
    })
}

fn load_flo_file(path: &Path, dir: FlowDirection) -> Result<FlowField<f32>, SynthError> {
    load_flo(path, dir).map_err(|e| SynthError::Flo {
        path: path.to_path_buf(),
        err: e,
    })
}

fn maybe_flo(
    path: &Path,
    dir: FlowDirection,
    expected: bool,
) -> Result<Option<FlowField<f32>>, SynthError> {
    if !expected {
        return Ok(None);
    }
    if !path.exists() {
        return Err(SynthError::MissingFile(path.to_path_buf()));
    }
    Ok(Some(load_flo_file(path, dir)?))
}

/// Channel-mean grey view of a [3, h, w] image, for PGM previews.
pub fn luma(image: &Tensor<f32>) -> Vec<f32> {
    let s = image.shape();
    let plane = s[1] * s[2];
    (0..plane)
        .map(|i| (image.data()[i] + image.data()[plane + i] + image.data()[2 * plane + i]) / 3.0)
        .collect()
}

/// 16-bit big-endian PGM; values scaled by `scale` into [0, 65535].
/// Viewing aid only, the f32 blobs are the data of record.
pub fn write_pgm16(
    path: &Path,
    values: &[f32],
    width: usize,
    height: usize,
    scale: f32,
) -> Result<(), SynthError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write!(f, "P5\n{width} {height}\n65535\n").map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::with_capacity(values.len() * 2);
    for &v in values {
        let q = ((v / scale).clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// The benchmark family used by the evaluation harness: three objects per
/// scene sharing one speed class (1, 2 or 3 pixels per frame, object depth
/// 6/v meters) while shape, axis, heading and start are drawn independently
/// of depth. Each frame carries two noisy cues to the class and one clean
/// but temporal one:
///
/// - brightness: the class sets the objects' albedo (nearer is brighter),
///   but a strong per-frame shimmer makes any single frame's brightness
///   overlap the neighboring class, so a frame-by-frame reading of it
///   jitters while the average over frames converges to the truth;
/// - flow: per-frame jitter of ±1 px blurs the instantaneous speed so one
///   frame pair underdetermines the class, and a global gain flicker keeps
///   consecutive frames photometrically distinct;
/// - history: pooling the motion or brightness sequence resolves the depth
///   level exactly.
pub fn benchmark_scenes(
    count: usize,
    width: usize,
    height: usize,
    frames: usize,
    base_seed: u64,
) -> Result<Vec<Scene>, SynthError> {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
    let mut scenes = Vec::with_capacity(count);
    for k in 0..count {
        let mut objects = Vec::new();
        // one speed class per scene, balanced across the family: every
        // object in the scene shares it, so pooling motion evidence across
        // objects and frames is what pins the scene's depth level down
        let class = 1 + k % 3;
        for _ in 0..3 {
            let speed = class as f64;
            let horizontal = rng.gen_bool(0.5);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let velocity = if horizontal {
                (sign * speed, 0.0)
            } else {
                (0.0, sign * speed)
            };
            let shape = if rng.gen_bool(0.5) {
                ObjShape::Rect {
                    w: rng.gen_range(12..=20),
                    h: rng.gen_range(12..=20),
                }
            } else {
                ObjShape::Disk {
                    r: rng.gen_range(6..=10),
                }
            };
            // the albedo tracks the depth class (nearer is brighter), but
            // the shimmer below drowns it at the single-frame level: only
            // the brightness averaged over frames identifies the class
            let b = 0.28 + 0.17 * class as f64;
            let albedo = [b, b, b];
            let start = (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
            );
            objects.push(ObjectSpec {
                shape,
                depth: 6.0 / speed,
                velocity,
                start,
                albedo,
                noise_amp: 0.05,
            });
        }
        let spec = SceneSpec {
            width,
            height,
            frames,
            background_depth: 12.0,
            texture_cell: 8,
            jitter: 1,
            flicker: 0.04,
            shimmer: 0.22,
            objects,
        };
        scenes.push(Scene::build(spec, base_seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15))?);
    }
    Ok(scenes)
}
