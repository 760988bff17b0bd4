//! Netpbm grayscale (PGM) and color (PPM) rasters, ASCII and binary.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded raster, values interleaved per pixel (`h x w x channels`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    pub values: Vec<u16>,
}

impl Raster {
    /// Builds an 8-bit raster from channel-major bytes.
    pub fn planar(channels: usize, height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("PNM supports 1 or 3 channels, got {channels}")));
        }
        let hw = height * width;
        if data.len() != channels * hw {
            return Err(Error::Invalid(format!(
                "{} bytes for a {channels}x{height}x{width} raster",
                data.len()
            )));
        }
        let values = (0..hw)
            .flat_map(|p| (0..channels).map(move |c| data[c * hw + p] as u16))
            .collect();
        Ok(Self {
            channels,
            height,
            width,
            maxval: 255,
            values,
        })
    }

    /// Values reordered channel-major (`channels x h x w`).
    pub fn to_planar(&self) -> Vec<u16> {
        let hw = self.height * self.width;
        let mut out = vec![0; self.values.len()];
        for (i, &v) in self.values.iter().enumerate() {
            out[(i % self.channels) * hw + i / self.channels] = v;
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected {what} at byte {start}"))
    }
}

pub(crate) fn parse(bytes: &[u8]) -> std::result::Result<Raster, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a PGM/PPM file".into());
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        m => return Err(format!("unsupported netpbm variant P{}", m as char)),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(format!("maxval {maxval} out of range"));
    }
    let n = width * height * channels;
    let values = if binary {
        // exactly one whitespace byte separates the header from the raster
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err("missing separator before raster".into());
        }
        let data = &bytes[cur.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(format!("raster truncated: {} of {need} bytes", data.len()));
        }
        if wide {
            data[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            data[..n].iter().map(|&b| b as u16).collect()
        }
    } else {
        (0..n)
            .map(|_| cur.number("sample").map(|v| v as u16))
            .collect::<std::result::Result<Vec<_>, _>>()?
    };
    if let Some(v) = values.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    Ok(Raster {
        channels,
        height,
        width,
        maxval: maxval as u16,
        values,
    })
}

pub fn read_pnm(path: &Path) -> Result<Raster> {
    let err = |detail: String| Error::Data {
        path: path.to_path_buf(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    parse(&bytes).map_err(err)
}

pub(crate) fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    if r.maxval > 255 {
        r.values.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
    } else {
        out.extend(r.values.iter().map(|&v| v as u8));
    }
    out
}

/// Binary PGM/PPM, chosen by channel count.
pub fn write_pnm(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, encode(raster))?;
    Ok(())
}

pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    write_pnm(path, &Raster::planar(1, height, width, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_comments() {
        let r = parse(b"P2\n# c\n3 2\n# max\n9\n0 1 2\n3 4 9\n").unwrap();
        assert_eq!((r.width, r.height, r.maxval), (3, 2, 9));
        assert_eq!(r.values, vec![0, 1, 2, 3, 4, 9]);
        let c = parse(b"P3 1 1 255 10 20 30").unwrap();
        assert_eq!(c.to_planar(), vec![10, 20, 30]);
    }

    #[test]
    fn binary_round_trip() {
        let data: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 7).collect();
        let r = Raster::planar(3, 2, 3, &data).unwrap();
        let back = parse(&encode(&r)).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_planar(), data.iter().map(|&b| b as u16).collect::<Vec<_>>());
        let wide = Raster {
            maxval: 1000,
            values: vec![0, 999, 1000, 7],
            channels: 1,
            height: 2,
            width: 2,
        };
        assert_eq!(parse(&encode(&wide)).unwrap(), wide);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse(b"P7 1 1 255\n\x00").is_err());
        assert!(parse(b"P5 2 2 255\n\x00").is_err());
        assert!(parse(b"P2 1 1 5 6").is_err());
        assert!(parse(b"P2 0 1 5").is_err());
        assert!(parse(b"").is_err());
    }
}
