//! Semantic label maps as binary 8-bit PGM (P5).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class ids.
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!("{} labels for a {height}×{width} map", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Rejects ids outside `0..classes` other than the ignore id.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && usize::from(v) >= classes)
        {
            Some(v) => Err(Error::Domain(format!("label id {v} outside 0..{classes}"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resampling to `h`×`w` (cell centres).
    pub fn resample(&self, h: usize, w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = ((2 * y + 1) * self.height) / (2 * h);
            for x in 0..w {
                let sx = ((2 * x + 1) * self.width) / (2 * w);
                data.push(self.get(sy, sx));
            }
        }
        LabelMap {
            height: h,
            width: w,
            data,
        }
    }
}

pub fn write_pgm<W: Write>(mut w: W, map: &LabelMap) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", map.width, map.height)?;
    w.write_all(&map.data)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("PGM", msg)
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(bad("truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("expected a decimal number in header"))
}

pub fn read_pgm<R: Read>(mut r: R) -> Result<LabelMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let width = token(&bytes, &mut pos)?;
    let height = token(&bytes, &mut pos)?;
    let maxval = token(&bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} is not an 8-bit depth")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator before pixel data"));
    }
    pos += 1;
    let data = bytes[pos..].to_vec();
    if data.len() != width * height {
        return Err(bad(format!("{} pixel bytes for {width}×{height}", data.len())));
    }
    LabelMap::new(height, width, data)
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_pgm(std::fs::File::open(path)?)
}

pub fn save_label_map(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut f, map)?;
    f.flush()?;
    Ok(())
}
