//! Binary PGM (P5, maxval 255) label-map IO.
//!
//! The writer always emits the canonical header `P5\n{w} {h}\n255\n`; the
//! reader accepts any standard whitespace/comment layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::LabelMap;

pub fn write_label_map<W: Write>(out: &mut W, map: &LabelMap) -> Result<()> {
    write!(out, "P5\n{} {}\n255\n", map.width(), map.height())?;
    out.write_all(map.pixels())?;
    Ok(())
}

pub fn read_label_map<R: Read>(input: &mut R) -> Result<LabelMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_label_map(&bytes)
}

pub fn parse_label_map(bytes: &[u8]) -> Result<LabelMap> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::BadFormat("not a binary PGM (expected P5)".into()));
    }
    let width: u32 = parse_number(next_token(bytes, &mut pos)?)?;
    let height: u32 = parse_number(next_token(bytes, &mut pos)?)?;
    let maxval: u32 = parse_number(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::BadFormat(format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::BadFormat("missing raster separator".into()));
    }
    pos += 1;
    let expected = height as usize * width as usize;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::BadFormat(format!(
            "raster has {} bytes, expected {expected}",
            raster.len()
        )));
    }
    if raster.len() > expected {
        return Err(Error::BadFormat("trailing bytes after raster".into()));
    }
    LabelMap::new(height, width, raster.to_vec())
}

pub fn write_label_map_file<P: AsRef<Path>>(path: P, map: &LabelMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_label_map(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn read_label_map_file<P: AsRef<Path>>(path: P) -> Result<LabelMap> {
    let mut r = BufReader::new(File::open(path)?);
    read_label_map(&mut r)
}

/// Next header token, skipping whitespace and `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return Err(Error::BadFormat("unexpected end of header".into()));
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(token: &[u8]) -> Result<u32> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::BadFormat("bad header number".into()))
}
