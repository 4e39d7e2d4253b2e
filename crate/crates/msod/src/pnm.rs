//! Binary netpbm rasters: `P5` grayscale and `P6` color, maxval 255.

use std::fs;
use std::path::Path;

use msod_core::image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Parse failure at a byte offset into the file.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("byte {offset}: {msg}")]
pub struct PnmError {
    pub offset: usize,
    pub msg: String,
}

fn err(offset: usize, msg: impl Into<String>) -> PnmError {
    PnmError {
        offset,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(
            0,
            format!("expected magic `{}`", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if !saw_space {
            return Err(err(pos, "expected whitespace in header"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][k];
            return Err(match bytes.get(pos) {
                None => err(pos, format!("file ends before {what}")),
                Some(_) => err(pos, format!("expected decimal {what}")),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, format!("number `{text}` out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(err(pos, format!("empty raster {width}×{height}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace after maxval")),
    }
    Ok(Header {
        width,
        height,
        payload: pos,
    })
}

fn payload(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>, PnmError> {
    let expected = h.width * h.height * channels;
    let actual = bytes.len() - h.payload;
    if actual < expected {
        return Err(err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(err(
            h.payload + expected,
            format!("{} trailing bytes after payload", actual - expected),
        ));
    }
    Ok(bytes[h.payload..].to_vec())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PnmError> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    Ok(GrayImage::new(h.width, h.height, data).expect("payload length checked"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PnmError> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Ok(RgbImage::new(h.width, h.height, data).expect("payload length checked"))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
