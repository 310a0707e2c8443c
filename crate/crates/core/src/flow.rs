//! Dense optical flow fields, backward warping, and file IO.
//!
//! A flow field stores one displacement vector per pixel of its frame.
//! Direction matters: a backward field at frame t points to where each
//! pixel came from in the previous frame, and only backward fields may be
//! used to warp that previous frame forward. Warping samples the source
//! with the same bilinear kernel the tape's `grid_sample` uses, so the
//! plain and differentiated paths agree bitwise.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{kernels, Scalar, Tensor};

/// On-disk flow files start with these magic bytes.
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("flow extents {got:?} do not match image extents {expected:?}")]
    ExtentMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected a {expected:?} flow field, got {got:?}")]
    WrongDirection { expected: FlowDirection, got: FlowDirection },
    #[error("component length {len} does not match {width}x{height}")]
    BadLength { len: usize, width: usize, height: usize },
    #[error("not a flow file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("flow file declares invalid extents {w}x{h}")]
    BadExtents { w: i32, h: i32 },
    #[error("non-finite flow component")]
    NonFinite,
    #[error("{path}: {err}")]
    Io { path: String, err: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// At frame t, points toward frame t+1.
    Forward,
    /// At frame t, points toward frame t-1.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Scalar> {
    width: usize,
    height: usize,
    u: Tensor<T>,
    v: Tensor<T>,
    direction: FlowDirection,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(
        width: usize,
        height: usize,
        u: Vec<T>,
        v: Vec<T>,
        direction: FlowDirection,
    ) -> Result<Self, FlowError> {
        if u.len() != width * height || v.len() != width * height {
            return Err(FlowError::BadLength {
                len: u.len().max(v.len()),
                width,
                height,
            });
        }
        if u.iter().chain(v.iter()).any(|c| !c.is_finite()) {
            return Err(FlowError::NonFinite);
        }
        Ok(FlowField {
            width,
            height,
            u: Tensor::new(vec![height, width], u).expect("length checked"),
            v: Tensor::new(vec![height, width], v).expect("length checked"),
            direction,
        })
    }

    pub fn zeros(width: usize, height: usize, direction: FlowDirection) -> Self {
        FlowField {
            width,
            height,
            u: Tensor::zeros(&[height, width]),
            v: Tensor::zeros(&[height, width]),
            direction,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn direction(&self) -> FlowDirection {
        self.direction
    }

    /// Horizontal components, shaped [height, width].
    pub fn u(&self) -> &Tensor<T> {
        &self.u
    }

    /// Vertical components, shaped [height, width].
    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    /// Both components stacked as a [2, height, width] tensor, u first.
    pub fn as_tensor(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * self.width * self.height);
        data.extend_from_slice(self.u.data());
        data.extend_from_slice(self.v.data());
        Tensor::new(vec![2, self.height, self.width], data).expect("componentwise lengths agree")
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.cast(),
            v: self.v.cast(),
            direction: self.direction,
        }
    }

    /// The [2, h, w] tensor with every component whose magnitude exceeds
    /// `max_mag` replaced by zero. Generators mark unmatchable pixels with a
    /// huge sentinel; those entries must not reach any network input.
    pub fn sanitized_tensor(&self, max_mag: T) -> Tensor<T> {
        let n = self.width * self.height;
        let mut data = Vec::with_capacity(2 * n);
        let lim = max_mag.to_f64();
        for plane in [self.u.data(), self.v.data()] {
            for i in 0..n {
                let keep = self.u.data()[i].to_f64().abs() <= lim
                    && self.v.data()[i].to_f64().abs() <= lim;
                data.push(if keep { plane[i] } else { T::zero() });
            }
        }
        Tensor::new(vec![2, self.height, self.width], data).expect("componentwise lengths agree")
    }

    /// Absolute sample coordinates (x + u, y + v) per pixel, the exact grids
    /// both warp paths consume.
    pub fn sample_grid(&self) -> (Tensor<T>, Tensor<T>) {
        let gx = Tensor::from_fn(&[self.height, self.width], |i| {
            T::from_f64((i % self.width) as f64) + self.u.data()[i]
        });
        let gy = Tensor::from_fn(&[self.height, self.width], |i| {
            T::from_f64((i / self.width) as f64) + self.v.data()[i]
        });
        (gx, gy)
    }

    pub fn write_flo(&self, w: &mut dyn Write) -> Result<(), FlowError> {
        let io = |e: std::io::Error| FlowError::Io {
            path: "<writer>".into(),
            err: e.to_string(),
        };
        w.write_all(&FLO_MAGIC).map_err(io)?;
        w.write_all(&(self.width as i32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.height as i32).to_le_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(self.width * self.height * 8);
        for i in 0..self.width * self.height {
            buf.extend_from_slice(&(self.u.data()[i].to_f64() as f32).to_le_bytes());
            buf.extend_from_slice(&(self.v.data()[i].to_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn save_flo(&self, path: &Path) -> Result<(), FlowError> {
        let mut file = std::fs::File::create(path).map_err(|e| FlowError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        self.write_flo(&mut file)
    }
}

/// Reads a flow file. Direction is not stored in the format, so the caller
/// states what the file is supposed to contain.
pub fn read_flo(r: &mut dyn Read, direction: FlowDirection) -> Result<FlowField<f32>, FlowError> {
    let io = |e: std::io::Error| FlowError::Io {
        path: "<reader>".into(),
        err: e.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != FLO_MAGIC {
        return Err(FlowError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let w = i32::from_le_bytes(b4);
    r.read_exact(&mut b4).map_err(io)?;
    let h = i32::from_le_bytes(b4);
    if w <= 0 || h <= 0 || w > 1 << 20 || h > 1 << 20 {
        return Err(FlowError::BadExtents { w, h });
    }
    let (w, h) = (w as usize, h as usize);
    let mut raw = vec![0u8; w * h * 8];
    r.read_exact(&mut raw).map_err(io)?;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in raw.chunks_exact(8) {
        u.push(f32::from_le_bytes([px[0], px[1], px[2], px[3]]));
        v.push(f32::from_le_bytes([px[4], px[5], px[6], px[7]]));
    }
    FlowField::new(w, h, u, v, direction)
}

pub fn load_flo(path: &Path, direction: FlowDirection) -> Result<FlowField<f32>, FlowError> {
    let mut file = std::fs::File::open(path).map_err(|e| FlowError::Io {
        path: path.display().to_string(),
        err: e.to_string(),
    })?;
    read_flo(&mut file, direction).map_err(|e| match e {
        FlowError::Io { err, .. } => FlowError::Io {
            path: path.display().to_string(),
            err,
        },
        other => other,
    })
}

/// Warps `src` (the previous frame, [c, h, w]) toward the frame the flow
/// belongs to: out[p] = src[p + flow[p]], sampled bilinearly with border
/// clamp. The mask is true where the sample point fell inside the source.
pub fn backward_warp<T: Scalar>(
    src: &Tensor<T>,
    flow: &FlowField<T>,
) -> Result<(Tensor<T>, Vec<bool>), FlowError> {
    if flow.direction != FlowDirection::Backward {
        return Err(FlowError::WrongDirection {
            expected: FlowDirection::Backward,
            got: flow.direction,
        });
    }
    let s = src.shape();
    if s.len() != 3 || s[1] != flow.height || s[2] != flow.width {
        let got = if s.len() == 3 { (s[2], s[1]) } else { (0, 0) };
        return Err(FlowError::ExtentMismatch {
            expected: (flow.width, flow.height),
            got,
        });
    }
    let (gx, gy) = flow.sample_grid();
    let (data, valid) =
        kernels::grid_sample_forward(src.data(), s[0], s[1], s[2], gx.data(), gy.data());
    let out = Tensor::new(s.to_vec(), data).expect("kernel preserves element count");
    Ok((out, valid))
}

/// 8-bit binary PGM, 255 inside the mask and 0 outside.
pub fn write_mask_pgm(w: &mut dyn Write, mask: &[bool], width: usize, height: usize) -> std::io::Result<()> {
    assert_eq!(mask.len(), width * height, "mask length must match extents");
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    w.write_all(&bytes)
}
