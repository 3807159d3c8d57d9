//! Binary greyscale PGM (`P5`) with 8-bit samples.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Parses a `P5` file into an `[H, W]` tensor of raw sample values.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P5") {
        return Err(parse_err(0, "bad magic, expected P5"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let max_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(max_at, format!("maxval {maxval} not in 1..=255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(max_at, "zero image dimension"));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(parse_err(hdr.pos, "expected whitespace before payload")),
    }
    let need = width * height;
    let payload = &bytes[hdr.pos..];
    if payload.len() < need {
        return Err(parse_err(
            hdr.pos + payload.len(),
            format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        ));
    }
    Tensor::new([height, width], payload[..need].iter().map(|&b| b as f64).collect())
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

/// Encodes an `[H, W]` tensor of integers in `0..=255`.
pub fn write_pgm(image: &Tensor, out: &mut impl Write) -> Result<()> {
    let [h, w] = image.shape() else {
        return Err(Error::Shape(format!("PGM needs a 2-D tensor, got {:?}", image.shape())));
    };
    let mut bytes = Vec::with_capacity(h * w);
    for &v in image.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Data(format!("value {v} is not an 8-bit sample")));
        }
        bytes.push(v as u8);
    }
    let io = |e| Error::io("<pgm stream>", e);
    write!(out, "P5\n{w} {h}\n255\n").map_err(io)?;
    out.write_all(&bytes).map_err(io)
}

pub fn save_pgm(image: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(image, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_header() {
        let mut f = b"P5 4 4 255\n".to_vec();
        f.extend(0u8..16);
        let t = parse_pgm(&f).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert_eq!(t.data()[5], 5.0);
    }

    #[test]
    fn tolerates_comments_and_whitespace() {
        let mut f = b"P5\n# made by hand\n  2\t# width\n1\n\n255 ".to_vec();
        f.extend([7, 9]);
        assert_eq!(parse_pgm(&f).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        let err = parse_pgm(b"P2 1 1 255\n\x00").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        let err = parse_pgm(b"P5 2 2 255\n\x01\x02").unwrap_err();
        match err {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 13);
                assert!(message.contains("expected 4") && message.contains("found 2"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse_pgm(b"P5 1 1 65535\n\x00\x00"), Err(Error::Parse { offset: 6, .. })));
        assert!(matches!(parse_pgm(b"P5 x"), Err(Error::Parse { offset: 3, .. })));
    }

    #[test]
    fn writer_rejects_non_bytes() {
        let t = Tensor::new([1, 2], vec![0.5, 1.0]).unwrap();
        assert!(write_pgm(&t, &mut Vec::new()).is_err());
        let t = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        assert!(write_pgm(&t, &mut Vec::new()).is_err());
    }
}
