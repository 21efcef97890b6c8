//! Binary netpbm: `P6` colour and `P5` grayscale, 8 bits per sample.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct PnmError(String);

fn err(msg: impl Into<String>) -> PnmError {
    PnmError(msg.into())
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "ppm payload size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pgm payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// A decoded image: width, height and samples in file order.
pub type Raster = (usize, usize, Vec<u8>);

pub fn decode_ppm(bytes: &[u8]) -> Result<Raster, PnmError> {
    decode(bytes, b"P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Raster, PnmError> {
    decode(bytes, b"P5", 1)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad {what} in header")))
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(err("header must end with a single whitespace byte")),
    }
    let need = width * height * channels;
    let data = &bytes[h.pos..];
    if data.len() < need {
        return Err(err(format!(
            "truncated pixel data: {} of {need} bytes",
            data.len()
        )));
    }
    Ok((width, height, data[..need].to_vec()))
}
