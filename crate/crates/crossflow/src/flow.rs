//! Optical flow fields: logarithmic normalization, 16-bit fixed-point codec,
//! uniform class discretization, and the `.flo16` container format.

use std::io::{Read, Write};
use std::path::Path;

/// Fixed-point scale: one code unit is 1/64 pixel.
pub const FIXED_POINT_SCALE: f64 = 64.0;
/// Code value for zero displacement.
pub const FIXED_POINT_OFFSET: f64 = 32768.0;
/// Number of discrete flow classes per axis.
pub const FLOW_CLASSES: usize = 16;
/// Default loose upper bound on flow magnitude for normalization.
pub const DEFAULT_FLOW_BOUND: f64 = 56.0;

const MAGIC: &[u8; 4] = b"CPF1";

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("non-finite flow component at pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("data length {got} does not match {width}x{height} pixels")]
    LengthMismatch { got: usize, width: usize, height: usize },
    #[error("normalization bound M = {0} must be positive and finite")]
    InvalidBound(f64),
    #[error("component {value} outside [-1, 1] at pixel ({x}, {y})")]
    OutOfRange { value: f64, x: usize, y: usize },
    #[error("bad magic in flow container")]
    BadMagic,
    #[error("truncated flow container: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("dimension overflow: {width}x{height} exceeds addressable size")]
    DimensionOverflow { width: usize, height: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-pixel 2-vector displacement grid in raw pixel units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self, FlowError> {
        if data.len() != width * height {
            return Err(FlowError::LengthMismatch { got: data.len(), width, height });
        }
        for (i, v) in data.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(FlowError::NonFinite { x: i % width, y: i / width });
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, fx: f64, fy: f64) -> Result<Self, FlowError> {
        Self::new(width, height, vec![[fx, fy]; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }
}

/// Flow after logarithmic normalization; every component lies in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
    bound: f64,
}

impl NormalizedFlowField {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<[f64; 2]>,
        bound: f64,
    ) -> Result<Self, FlowError> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(FlowError::InvalidBound(bound));
        }
        if data.len() != width * height {
            return Err(FlowError::LengthMismatch { got: data.len(), width, height });
        }
        for (i, v) in data.iter().enumerate() {
            for &c in v {
                if !(-1.0..=1.0).contains(&c) {
                    return Err(FlowError::OutOfRange { value: c, x: i % width, y: i / width });
                }
            }
        }
        Ok(Self { width, height, data, bound })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }
}

/// Fixed-point 16-bit image of a flow field, codes row-major with the
/// x-component first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFlowImage {
    width: usize,
    height: usize,
    codes: Vec<u16>,
}

impl EncodedFlowImage {
    pub fn new(width: usize, height: usize, codes: Vec<u16>) -> Result<Self, FlowError> {
        if codes.len() != 2 * width * height {
            return Err(FlowError::LengthMismatch { got: codes.len(), width, height });
        }
        Ok(Self { width, height, codes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }
}

/// Per-axis class indices in `0..FLOW_CLASSES`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowClassField {
    width: usize,
    height: usize,
    classes: Vec<[u8; 2]>,
}

impl FlowClassField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 2] {
        self.classes[y * self.width + x]
    }

    pub fn classes(&self) -> &[[u8; 2]] {
        &self.classes
    }
}

/// Map one component: sign(f) * min(1, log(|f|+1) / log(M+1)).
pub fn normalize_component(f: f64, bound: f64) -> f64 {
    let mag = ((f.abs() + 1.0).ln() / (bound + 1.0).ln()).min(1.0);
    f.signum() * mag
}

/// Logarithmic normalization of a whole field into [-1, 1] per component.
pub fn normalize_flow(flow: &FlowField, bound: f64) -> Result<NormalizedFlowField, FlowError> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(FlowError::InvalidBound(bound));
    }
    let data = flow
        .data
        .iter()
        .map(|v| [normalize_component(v[0], bound), normalize_component(v[1], bound)])
        .collect();
    NormalizedFlowField::new(flow.width, flow.height, data, bound)
}

fn encode_component(f: f64) -> (u16, bool) {
    let code = (f * FIXED_POINT_SCALE).round() + FIXED_POINT_OFFSET;
    if code < 0.0 {
        (0, true)
    } else if code > 65535.0 {
        (65535, true)
    } else {
        (code as u16, false)
    }
}

/// Fixed-point encoding: code = round(f * 64) + 32768, saturating.
/// Returns the image and the number of saturated components.
pub fn encode_flow(flow: &FlowField) -> (EncodedFlowImage, usize) {
    let mut codes = Vec::with_capacity(2 * flow.data.len());
    let mut saturated = 0;
    for v in &flow.data {
        for &c in v {
            let (code, sat) = encode_component(c);
            codes.push(code);
            if sat {
                saturated += 1;
            }
        }
    }
    (
        EncodedFlowImage { width: flow.width, height: flow.height, codes },
        saturated,
    )
}

/// Inverse of `encode_flow`: f = (code - 32768) / 64.
pub fn decode_flow(img: &EncodedFlowImage) -> FlowField {
    let data = img
        .codes
        .chunks_exact(2)
        .map(|c| {
            [
                (c[0] as f64 - FIXED_POINT_OFFSET) / FIXED_POINT_SCALE,
                (c[1] as f64 - FIXED_POINT_OFFSET) / FIXED_POINT_SCALE,
            ]
        })
        .collect();
    FlowField { width: img.width, height: img.height, data }
}

/// Uniform 16-bin discretization of a component in [-1, 1].
pub fn discretize_component(v: f64) -> u8 {
    let bin = ((v + 1.0) / 2.0 * FLOW_CLASSES as f64).floor();
    (bin.max(0.0) as usize).min(FLOW_CLASSES - 1) as u8
}

/// Per-axis uniform discretization into `FLOW_CLASSES` bins over [-1, 1].
pub fn discretize_flow(nf: &NormalizedFlowField) -> FlowClassField {
    let classes = nf
        .data
        .iter()
        .map(|v| [discretize_component(v[0]), discretize_component(v[1])])
        .collect();
    FlowClassField { width: nf.width, height: nf.height, classes }
}

/// Serialize to the `.flo16` container: "CPF1", u32le width, u32le height,
/// then 2*w*h u16le codes.
pub fn write_flow_file(img: &EncodedFlowImage, path: &Path) -> Result<(), FlowError> {
    let mut buf = Vec::with_capacity(12 + 2 * img.codes.len());
    buf.extend_from_slice(MAGIC);
    let w = u32::try_from(img.width)
        .map_err(|_| FlowError::DimensionOverflow { width: img.width, height: img.height })?;
    let h = u32::try_from(img.height)
        .map_err(|_| FlowError::DimensionOverflow { width: img.width, height: img.height })?;
    buf.extend_from_slice(&w.to_le_bytes());
    buf.extend_from_slice(&h.to_le_bytes());
    for code in &img.codes {
        buf.extend_from_slice(&code.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Parse a `.flo16` container. The payload length must match the header exactly.
pub fn read_flow_file(path: &Path) -> Result<EncodedFlowImage, FlowError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(FlowError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(FlowError::Truncated { expected: 8, got: bytes.len() - 4 });
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let ncodes = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .ok_or(FlowError::DimensionOverflow { width, height })?;
    let expected = ncodes * 2;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(FlowError::Truncated { expected, got: payload.len() });
    }
    let codes = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(EncodedFlowImage { width, height, codes })
}
