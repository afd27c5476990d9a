//! Netpbm graymap/pixmap reading and writing.
//!
//! Binary `P5`/`P6` are written; `P2`, `P3`, `P5` and `P6` are read.
//! Samples wider than 8 bits are big-endian.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for graymaps, 3 for pixmaps.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Parses a `P2`, `P3`, `P5` or `P6` image.
pub fn decode(buf: &[u8]) -> Result<Raster> {
    if buf.len() < 2 || buf[0] != b'P' {
        return Err(parse_err(0, "missing Netpbm magic"));
    }
    let (channels, ascii) = match buf[1] {
        b'2' => (1, true),
        b'3' => (3, true),
        b'5' => (1, false),
        b'6' => (3, false),
        m => return Err(parse_err(1, format!("unsupported Netpbm variant P{}", m as char))),
    };
    let mut cur = Cursor { buf, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > u16::MAX as u32 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    let n = width * height * channels;
    let samples = if ascii {
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            let at = cur.pos;
            let v = cur.number("sample")?;
            if v > maxval {
                return Err(parse_err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            s.push(v as u16);
        }
        s
    } else {
        match buf.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(parse_err(cur.pos, "expected one whitespace byte before the payload")),
        }
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let expected = n * bytes_per;
        let payload = &buf[cur.pos..];
        if payload.len() < expected {
            return Err(parse_err(
                cur.pos,
                format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
            ));
        }
        let s: Vec<u16> = if bytes_per == 2 {
            payload[..expected].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            payload[..expected].iter().map(|&b| b as u16).collect()
        };
        if let Some(i) = s.iter().position(|&v| v as u32 > maxval) {
            return Err(parse_err(cur.pos + i * bytes_per, format!("sample {} exceeds maxval {maxval}", s[i])));
        }
        s
    };
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

/// Binary `P5` (one channel) or `P6` (three channels).
pub fn encode(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Config(format!("cannot encode {c}-channel raster"))),
    };
    if r.samples.len() != r.width * r.height * r.channels {
        return Err(Error::Config(format!(
            "{} samples for a {}x{}x{} raster",
            r.samples.len(),
            r.width,
            r.height,
            r.channels
        )));
    }
    if r.maxval == 0 || r.samples.iter().any(|&v| v > r.maxval) {
        return Err(Error::Config(format!("samples exceed maxval {}", r.maxval)));
    }
    let mut out = format!("{magic}\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    if r.maxval > 255 {
        out.extend(r.samples.iter().flat_map(|v| v.to_be_bytes()));
    } else {
        out.extend(r.samples.iter().map(|&v| v as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_16_bit() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 1,
            maxval: 65535,
            samples: vec![0, 1, 256, 65535, 1000, 7],
        };
        let bytes = encode(&r).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x03, 0xe8, 0x00, 0x07]);
        assert_eq!(decode(&bytes).unwrap(), r);
    }

    #[test]
    fn ascii_with_comments() {
        let r = decode(b"P3\n# note\n2 1\n255\n1 2 3  4 5 6\n").unwrap();
        assert_eq!(r.channels, 3);
        assert_eq!(r.samples, vec![1, 2, 3, 4, 5, 6]);
        let r = decode(b"P2 2 2 15 0 15 7 3").unwrap();
        assert_eq!(r.samples, vec![0, 15, 7, 3]);
    }

    #[test]
    fn truncated_reports_lengths() {
        let err = decode(b"P5\n4 4\n255\nabc").unwrap_err();
        match err {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 11);
                assert!(msg.contains("expected 16") && msg.contains("found 3"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_magic_and_dims() {
        assert!(matches!(decode(b"Q5 1 1 255 a"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode(b"P7 1 1 255 a"), Err(Error::Parse { offset: 1, .. })));
        assert!(matches!(decode(b"P5 x 1 255 a"), Err(Error::Parse { offset: 3, .. })));
    }
}
