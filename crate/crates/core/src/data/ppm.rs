//! Binary PPM (P6) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::RealGrid;

/// Encodes a 3-channel grid with values in `[0, 1]` as P6 with maxval 255.
pub fn encode_ppm(image: &RealGrid) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::dim(
            "encode_ppm",
            "channels",
            format!("expected 3, got {}", image.channels),
        ));
    }
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) -> Result<()> {
        let mut any = false;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
            any = true;
        }
        if any {
            Ok(())
        } else {
            Err(self.error("expected whitespace"))
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Decodes a P6 image with maxval up to 255 into `[0, 1]` values.
pub fn decode_ppm(bytes: &[u8]) -> Result<RealGrid> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return Err(r.error("missing P6 magic"));
    }
    r.pos = 2;
    r.skip_space()?;
    let width = r.number("width")?;
    r.skip_space()?;
    let height = r.number("height")?;
    r.skip_space()?;
    let maxval = r.number("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(r.error(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(r.error("zero image extent"));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(r.error("expected a single whitespace byte after maxval"));
    }
    r.pos += 1;
    let need = width * height * 3;
    let body = &bytes[r.pos..];
    if body.len() != need {
        return Err(r.error(format!("expected {need} pixel bytes, found {}", body.len())));
    }
    let scale = maxval as f64;
    let data = body.iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    RealGrid::new(height, width, 3, data)
}

pub fn save_ppm(path: &Path, image: &RealGrid) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<RealGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}
