//! Minimal PNG output: 8-bit RGB, stored (uncompressed) deflate blocks.
//! Enough for report plots without pulling in an image stack.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Day2DarkError, Result};

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (n, slot) in table.iter_mut().enumerate() {
        let mut c = n as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xedb8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *slot = c;
    }
    table
}

fn crc32(data: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xffff_ffffu32;
    for &b in data {
        c = table[((c ^ u32::from(b)) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for &byte in data {
        a = (a + u32::from(byte)) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let mut body = Vec::with_capacity(4 + payload.len());
    body.extend_from_slice(kind);
    body.extend_from_slice(payload);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_be_bytes());
}

/// Encode interleaved RGB rows into PNG bytes.
pub fn encode_rgb(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height * 3 {
        return Err(Day2DarkError::invalid(format!(
            "pixel buffer {} != {width}*{height}*3",
            pixels.len()
        )));
    }
    if width == 0 || height == 0 || width > u32::MAX as usize || height > u32::MAX as usize {
        return Err(Day2DarkError::invalid("bad image dimensions"));
    }
    // Raw scanlines, each prefixed with filter byte 0.
    let mut raw = Vec::with_capacity(height * (1 + width * 3));
    for y in 0..height {
        raw.push(0);
        raw.extend_from_slice(&pixels[y * width * 3..(y + 1) * width * 3]);
    }
    // zlib stream with stored deflate blocks.
    let mut z = vec![0x78, 0x01];
    let mut off = 0;
    while off < raw.len() {
        let len = (raw.len() - off).min(65_535);
        let last = off + len == raw.len();
        z.push(u8::from(last));
        z.extend_from_slice(&(len as u16).to_le_bytes());
        z.extend_from_slice(&(!(len as u16)).to_le_bytes());
        z.extend_from_slice(&raw[off..off + len]);
        off += len;
    }
    z.extend_from_slice(&adler32(&raw).to_be_bytes());

    let mut out = Vec::new();
    out.extend_from_slice(&SIGNATURE);
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]); // 8-bit, RGB, deflate, none, none
    chunk(&mut out, b"IHDR", &ihdr);
    chunk(&mut out, b"IDAT", &z);
    chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

pub fn write_rgb(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_rgb(width, height, pixels)?;
    File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Structural validation: signature, IHDR first, chunk CRCs (recomputed
/// bitwise, without the encoder's table), IEND last. Returns the dimensions.
pub fn validate(bytes: &[u8]) -> Result<(usize, usize)> {
    fn crc32_bitwise(data: &[u8]) -> u32 {
        let mut c = 0xffff_ffffu32;
        for &b in data {
            c ^= u32::from(b);
            for _ in 0..8 {
                c = if c & 1 != 0 {
                    (c >> 1) ^ 0xedb8_8320
                } else {
                    c >> 1
                };
            }
        }
        c ^ 0xffff_ffff
    }
    let bad = |reason: &str| Day2DarkError::Malformed {
        path: "<png>".into(),
        reason: reason.into(),
    };
    if bytes.len() < 8 || bytes[..8] != SIGNATURE {
        return Err(bad("missing png signature"));
    }
    let mut off = 8;
    let mut dims = None;
    let mut saw_end = false;
    let mut first = true;
    while off + 12 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if off + 12 + len > bytes.len() {
            return Err(bad("chunk overruns file"));
        }
        let body = &bytes[off + 4..off + 8 + len];
        let stored = u32::from_be_bytes(bytes[off + 8 + len..off + 12 + len].try_into().unwrap());
        if crc32_bitwise(body) != stored {
            return Err(bad("chunk crc mismatch"));
        }
        let kind = &body[..4];
        if first {
            if kind != b"IHDR" || len != 13 {
                return Err(bad("IHDR must come first"));
            }
            let w = u32::from_be_bytes(body[4..8].try_into().unwrap()) as usize;
            let h = u32::from_be_bytes(body[8..12].try_into().unwrap()) as usize;
            dims = Some((w, h));
            first = false;
        }
        if kind == b"IEND" {
            saw_end = true;
        }
        off += 12 + len;
    }
    if !saw_end {
        return Err(bad("missing IEND"));
    }
    dims.ok_or_else(|| bad("no IHDR"))
}
