//! Tiny in-memory image type used by the toy benchmark and oracle generator.
//!
//! Images travel through manifests either as file paths or as inline payloads
//! of the form `inline:<w>x<h>x<c>:<base64 of little-endian f32 pixels>`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-last pixel values, nominally in [0, 1].
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            pixels: vec![0.0; width * height * channels],
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Serialize to an inline manifest reference.
    pub fn to_inline_ref(&self) -> String {
        let mut bytes = Vec::with_capacity(self.pixels.len() * 4);
        for p in &self.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        format!(
            "inline:{}x{}x{}:{}",
            self.width,
            self.height,
            self.channels,
            B64.encode(&bytes)
        )
    }

    /// Parse an inline manifest reference produced by [`Image::to_inline_ref`].
    pub fn from_inline_ref(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix("inline:")
            .ok_or_else(|| Error::Parse(format!("not an inline image ref: {s:.32}")))?;
        let (shape, data) = rest
            .split_once(':')
            .ok_or_else(|| Error::Parse("inline image ref missing payload".into()))?;
        let dims: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("bad inline image shape `{shape}`: {e}")))?;
        if dims.len() != 3 {
            return Err(Error::Parse(format!("bad inline image shape `{shape}`")));
        }
        let bytes = B64
            .decode(data)
            .map_err(|e| Error::Parse(format!("bad inline image payload: {e}")))?;
        let expected = dims[0] * dims[1] * dims[2] * 4;
        if bytes.len() != expected {
            return Err(Error::Parse(format!(
                "inline image payload length {} does not match shape {shape}",
                bytes.len()
            )));
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Image {
            width: dims[0],
            height: dims[1],
            channels: dims[2],
            pixels,
        })
    }
}
