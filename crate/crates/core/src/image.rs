//! In-memory images and the two on-disk formats: binary PPM (P6) and raw
//! float32 tensors (`.f32t`).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed image at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("image shape {got:?} does not match expected {expected:?}")]
    Shape {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
}

/// Height × width × channels, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            channels: 3,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Sets a `w × h` rectangle (clipped to the image) to `value`.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, value: f32) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                let i = (y * self.width + x) * self.channels;
                self.data[i..i + self.channels].fill(value);
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32t") => read_f32t(path),
            _ => read_ppm(path),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    assert_eq!(image.channels, 3, "PPM requires 3 channels");
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_rgb8());
    out
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<(), ImageError> {
    std::fs::write(path, encode_ppm(image)).map_err(io_err(path))
}

pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<Image, ImageError> {
    let fail = |offset: usize, reason: &str| ImageError::Format {
        path: path.to_string(),
        offset,
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "truncated header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P6" {
        return Err(fail(0, "expected P6 magic"));
    }
    let mut nums = [0usize; 3];
    for (k, (off, text)) in fields[1..].iter().enumerate() {
        nums[k] = text.parse().map_err(|_| fail(*off, "invalid header number"))?;
    }
    if nums[2] != 255 {
        return Err(fail(fields[3].0, "only maxval 255 is supported"));
    }
    // single whitespace byte after maxval
    pos += 1;
    let (width, height) = (nums[0], nums[1]);
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(fail(bytes.len(), "truncated pixel data"));
    }
    Ok(Image::from_rgb8(height, width, &bytes[pos..pos + need]))
}

pub fn read_ppm(path: &Path) -> Result<Image, ImageError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes, &path.display().to_string())
}

const F32T_MAGIC: &[u8; 4] = b"F32T";

/// `.f32t`: magic `F32T`, u32 LE rank, rank × u32 LE dims, f32 LE payload.
pub fn write_f32t(path: &Path, image: &Image) -> Result<(), ImageError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut buf = Vec::with_capacity(20 + image.data.len() * 4);
    buf.extend_from_slice(F32T_MAGIC);
    buf.extend_from_slice(&3u32.to_le_bytes());
    for d in [image.height, image.width, image.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_f32t(path: &Path) -> Result<Image, ImageError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let p = path.display().to_string();
    let fail = |offset: usize, reason: &str| ImageError::Format {
        path: p.clone(),
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != F32T_MAGIC {
        return Err(fail(0, "bad F32T magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank != 3 {
        return Err(fail(4, "image tensors must have rank 3"));
    }
    if bytes.len() < 8 + 12 {
        return Err(fail(bytes.len(), "truncated dims"));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n = dims.iter().product::<usize>();
    let payload = &bytes[20..];
    if payload.len() != n * 4 {
        return Err(fail(20 + payload.len().min(n * 4), "payload length mismatch"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Image {
        height: dims[0],
        width: dims[1],
        channels: dims[2],
        data,
    })
}
