//! 8-bit images and binary PGM/PPM files.

use std::fs;
use std::path::Path;

use crate::ndgrad::Tensor;

use super::DataError;

/// Interleaved 8-bit image (`data[(y*width + x)*channels + c]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if channels != 1 && channels != 3 {
            return Err(DataError::Image(format!("{channels} channels (expected 1 or 3)")));
        }
        if height == 0 || width == 0 {
            return Err(DataError::Image(format!("empty image {width}x{height}")));
        }
        if data.len() != channels * height * width {
            return Err(DataError::Image(format!(
                "{} bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0; channels * height * width]).expect("valid extents")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-major planes with values on the 0–255 scale.
    pub fn to_planes(&self) -> Vec<f32> {
        let (c, hw) = (self.channels, self.height * self.width);
        let mut out = vec![0.0; c * hw];
        for (i, px) in self.data.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + i] = v as f32;
            }
        }
        out
    }

    /// Inverse of [`Image::to_planes`]; values are rounded and clamped.
    pub fn from_planes(channels: usize, height: usize, width: usize, planes: &[f32]) -> Result<Self, DataError> {
        let hw = height * width;
        if planes.len() != channels * hw {
            return Err(DataError::Image(format!("{} plane values for {width}x{height}x{channels}", planes.len())));
        }
        let mut data = vec![0u8; channels * hw];
        for ch in 0..channels {
            for i in 0..hw {
                data[i * channels + ch] = to_u8(planes[ch * hw + i]);
            }
        }
        Self::new(channels, height, width, data)
    }

    /// `[C, H, W]` tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let planes = self.to_planes().into_iter().map(|v| v / 255.0).collect();
        Tensor::new(vec![self.channels, self.height, self.width], planes).expect("consistent extents")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, DataError> {
        let [c, h, w] = t.shape() else {
            return Err(DataError::Image(format!("expected a [C, H, W] tensor, got {:?}", t.shape())));
        };
        let planes: Vec<f32> = t.data().iter().map(|v| v * 255.0).collect();
        Self::from_planes(*c, *h, *w, &planes)
    }

    /// Converts between grayscale and RGB (luma weights 0.299/0.587/0.114).
    pub fn with_channels(&self, channels: usize) -> Result<Self, DataError> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                Self::new(3, self.height, self.width, data)
            }
            (3, 1) => {
                let data = self
                    .data
                    .chunks(3)
                    .map(|p| to_u8(0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32))
                    .collect();
                Self::new(1, self.height, self.width, data)
            }
            (_, b) => Err(DataError::Image(format!("cannot convert to {b} channels"))),
        }
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Image(format!("malformed header: bad {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image, DataError> {
    let magic = bytes.get(..2).unwrap_or(bytes);
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(DataError::UnsupportedFormat {
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::Image(format!("maxval {maxval} (only 255 is supported)")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(DataError::Image("malformed header: missing separator after maxval".into())),
    }
    let need = channels * width * height;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(DataError::Truncated { expected: need, found: payload.len() });
    }
    Image::new(channels, height, width, payload[..need].to_vec())
}

pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| e.at(path))
}

pub fn write_image(image: &Image, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_pnm(image)).map_err(|e| DataError::io(path, e))
}
