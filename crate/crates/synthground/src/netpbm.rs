//! Binary PPM (P6) and PBM (P4) encoding and decoding.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    pub width: usize,
    pub height: usize,
    /// Row-major; `true` is a set (black) pixel.
    pub bits: Vec<bool>,
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_pbm(width: usize, height: usize, bits: &[bool]) -> Vec<u8> {
    assert_eq!(bits.len(), width * height);
    let mut out = format!("P4\n{width} {height}\n").into_bytes();
    let row_bytes = width.div_ceil(8);
    for row in bits.chunks_exact(width) {
        let mut packed = vec![0u8; row_bytes];
        for (x, &b) in row.iter().enumerate() {
            if b {
                packed[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| Error::Netpbm(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Netpbm(format!("expected {what} at byte {start}")));
        }
        Ok(value)
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::Netpbm(format!(
                "missing whitespace after header at byte {}",
                self.pos
            ))),
        }
    }
}

fn dims(h: &mut Header<'_>) -> Result<(usize, usize)> {
    let width = h.number("width")?;
    let height = h.number("height")?;
    if width == 0 || height == 0 {
        return Err(Error::Netpbm(format!("empty image {width}x{height}")));
    }
    Ok((width, height))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Netpbm("not a binary PPM (missing P6 magic)".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let (width, height) = dims(&mut h)?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Netpbm(format!("unsupported maxval {maxval}")));
    }
    h.end()?;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Netpbm("dimensions overflow".into()))?;
    let body = &bytes[h.pos..];
    if body.len() != need {
        return Err(Error::Netpbm(format!(
            "expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: body.to_vec(),
    })
}

pub fn decode_pbm(bytes: &[u8]) -> Result<BitMask> {
    if !bytes.starts_with(b"P4") {
        return Err(Error::Netpbm("not a binary PBM (missing P4 magic)".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let (width, height) = dims(&mut h)?;
    h.end()?;
    let row_bytes = width.div_ceil(8);
    let need = row_bytes
        .checked_mul(height)
        .ok_or_else(|| Error::Netpbm("dimensions overflow".into()))?;
    let body = &bytes[h.pos..];
    if body.len() != need {
        return Err(Error::Netpbm(format!(
            "expected {need} bit-packed bytes, found {}",
            body.len()
        )));
    }
    let mut bits = Vec::with_capacity(width * height);
    for row in body.chunks_exact(row_bytes) {
        for x in 0..width {
            bits.push(row[x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    Ok(BitMask { width, height, bits })
}
