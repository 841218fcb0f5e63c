//! Binary PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Grayscale2D, MaskImage, Spacing};

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

/// Returns the value with its start and end offsets.
fn read_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize, usize)> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let value = text
        .parse()
        .map_err(|_| parse_err(start, format!("{what} `{text}` out of range")))?;
    Ok((value, start, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P2") => return Err(parse_err(0, "ASCII PGM (P2) is not supported; expected binary P5")),
        _ => return Err(parse_err(0, "missing P5 magic number")),
    }
    let (width, width_at, pos) = read_number(bytes, 2, "width")?;
    let (height, _, pos) = read_number(bytes, pos, "height")?;
    let (maxval, maxval_at, pos) = read_number(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(
            width_at,
            format!("image dims must be positive, got {width}x{height}"),
        ));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(parse_err(
            maxval_at,
            format!("maxval must lie in 1..=65535, got {maxval}"),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(parse_err(pos, "expected a single whitespace byte after maxval")),
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes a P5 file; samples are scaled by `1 / maxval` into `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grayscale2D> {
    let hdr = parse_header(bytes)?;
    let wide = hdr.maxval > 255;
    let n = hdr.width * hdr.height;
    let needed = n * if wide { 2 } else { 1 };
    let payload = &bytes[hdr.data_start..];
    if payload.len() < needed {
        return Err(parse_err(
            bytes.len(),
            format!("payload truncated: need {needed} bytes, found {}", payload.len()),
        ));
    }
    let scale = hdr.maxval as f64;
    let pixels = if wide {
        payload[..needed]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
            .collect()
    } else {
        payload[..n].iter().map(|&b| b as f64 / scale).collect()
    };
    Grayscale2D::new(hdr.height, hdr.width, pixels, Spacing::default())
}

/// Encodes with the given maxval (values clamped into `[0, 1]` first).
pub fn encode_pgm(image: &Grayscale2D, maxval: u16) -> Vec<u8> {
    let maxval = maxval.max(1);
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
    let quantize = |p: f64| (p.clamp(0.0, 1.0) * maxval as f64).round() as u16;
    for &p in image.pixels() {
        let q = quantize(p);
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Grayscale2D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Writes a 16-bit P5 file.
pub fn save_pgm(image: &Grayscale2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image, 65535)).map_err(|e| Error::io(path, e))
}

/// Loads a mask; any non-zero sample is foreground.
pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<MaskImage> {
    let image = load_pgm(path)?;
    MaskImage::threshold(image.height(), image.width(), image.pixels(), 0.0)
}

/// Writes a mask as an 8-bit P5 file with values 0 and 255.
pub fn save_mask_pgm(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(&mask.to_image(Spacing::default()), 255)).map_err(|e| Error::io(path, e))
}
