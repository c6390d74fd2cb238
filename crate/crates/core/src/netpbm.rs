//! Binary NetPBM codecs: PGM (P5), PPM (P6) and PBM (P4). Bit-exact,
//! dependency-free I/O for images and masks.

use std::path::Path;

use crate::error::{Error, Result};

fn parse_err(detail: impl Into<String>) -> Error {
    Error::Parse {
        path: "<netpbm>".to_string(),
        detail: detail.into(),
    }
}

/// Reads ASCII tokens after the magic: skips whitespace and `#` comments.
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        TokenReader { bytes, pos }
    }

    fn next_uint(&mut self) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(parse_err("truncated header")),
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(parse_err("expected an integer in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad integer in header"))
    }

    /// Consumes the single whitespace byte separating header from raster.
    fn raster(&mut self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(&self.bytes[self.pos..])
            }
            _ => Err(parse_err("missing raster separator")),
        }
    }
}

/// Grayscale 8-bit image, maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(parse_err("pixel buffer does not match extents"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Interleaved RGB 8-bit image, maxval 255.
pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != 3 * width * height {
        return Err(parse_err("pixel buffer does not match extents"));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Bitmap with 1 = set (black). Rows are packed MSB-first and byte-padded.
pub fn encode_pbm(width: usize, height: usize, bits: &[u8]) -> Result<Vec<u8>> {
    if bits.len() != width * height {
        return Err(parse_err("bit buffer does not match extents"));
    }
    if bits.iter().any(|b| *b > 1) {
        return Err(parse_err("mask values must be 0 or 1"));
    }
    let mut out = format!("P4\n{width} {height}\n").into_bytes();
    let row_bytes = width.div_ceil(8);
    for y in 0..height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..width {
            if bits[y * width + x] == 1 {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(out)
}

/// Decoded image: `channels` is 1 (PGM) or 3 (PPM), data interleaved.
#[derive(Debug)]
pub struct DecodedImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Decodes P5 or P6.
pub fn decode_image(bytes: &[u8]) -> Result<DecodedImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err("expected P5 or P6 magic")),
    };
    let mut rd = TokenReader::new(bytes, 2);
    let width = rd.next_uint()?;
    let height = rd.next_uint()?;
    let maxval = rd.next_uint()?;
    if maxval != 255 {
        return Err(parse_err(format!("unsupported maxval {maxval}")));
    }
    let raster = rd.raster()?;
    let need = channels * width * height;
    if raster.len() < need {
        return Err(parse_err(format!(
            "truncated raster: need {need} bytes, have {}",
            raster.len()
        )));
    }
    Ok(DecodedImage {
        width,
        height,
        channels,
        pixels: raster[..need].to_vec(),
    })
}

/// Decodes P4 into unpacked 0/1 bytes.
pub fn decode_pbm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.get(..2) != Some(b"P4".as_slice()) {
        return Err(parse_err("expected P4 magic"));
    }
    let mut rd = TokenReader::new(bytes, 2);
    let width = rd.next_uint()?;
    let height = rd.next_uint()?;
    let raster = rd.raster()?;
    let row_bytes = width.div_ceil(8);
    if raster.len() < row_bytes * height {
        return Err(parse_err(format!(
            "truncated raster: need {} bytes, have {}",
            row_bytes * height,
            raster.len()
        )));
    }
    let mut bits = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let byte = raster[y * row_bytes + x / 8];
            bits[y * width + x] = (byte >> (7 - x % 8)) & 1;
        }
    }
    Ok((width, height, bits))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_is_exact() {
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let bytes = encode_pgm(4, 3, &pixels).unwrap();
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (4, 3, 1));
        assert_eq!(img.pixels, pixels);
    }

    #[test]
    fn ppm_roundtrip_is_exact() {
        let pixels: Vec<u8> = (0..2 * 2 * 3).map(|i| (i * 11) as u8).collect();
        let bytes = encode_ppm(2, 2, &pixels).unwrap();
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.pixels, pixels);
    }

    #[test]
    fn pbm_roundtrip_handles_row_padding() {
        // width 10 forces 2 bytes per row with 6 padding bits
        let bits: Vec<u8> = (0..10 * 3).map(|i| (i % 3 == 0) as u8).collect();
        let bytes = encode_pbm(10, 3, &bits).unwrap();
        let (w, h, back) = decode_pbm(&bytes).unwrap();
        assert_eq!((w, h), (10, 3));
        assert_eq!(back, bits);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let pixels: Vec<u8> = vec![7; 16];
        let mut bytes = encode_pgm(4, 4, &pixels).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = decode_image(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(decode_image(b"P7\n2 2\n255\n0000").is_err());
        assert!(decode_image(b"P5\n2\n255\n0000").is_err());
        assert!(decode_pbm(b"P4\n\n").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);
    }

    #[test]
    fn non_binary_mask_rejected_at_encode() {
        assert!(encode_pbm(2, 1, &[0, 2]).is_err());
    }
}
