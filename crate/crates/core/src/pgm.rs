//! Binary PGM (P5) reading and writing, 8-bit and 16-bit.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PGM: {0}")]
    Malformed(String),
}

/// Decoded gray image; samples are raw values in `0..=maxval`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PgmError::Malformed("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(PgmError::Malformed(format!("magic {:?}, expected P5", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| PgmError::Malformed(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(PgmError::Malformed(format!("maxval {maxval}")));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let n = width * height;
        let body = bytes.get(pos..).unwrap_or(&[]);
        let samples: Vec<u16> = if maxval < 256 {
            if body.len() < n {
                return Err(PgmError::Malformed("truncated raster".into()));
            }
            body[..n].iter().map(|&b| u16::from(b)).collect()
        } else {
            if body.len() < 2 * n {
                return Err(PgmError::Malformed("truncated raster".into()));
            }
            body[..2 * n]
                .chunks(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self, PgmError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), PgmError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    /// Samples scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        let m = f64::from(self.maxval);
        self.samples.iter().map(|&s| f64::from(s) / m).collect()
    }

    /// 8-bit image from `[0, 1]` values (clamped, rounded).
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        let samples = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
            .collect();
        Self {
            width,
            height,
            maxval: 255,
            samples,
        }
    }
}
