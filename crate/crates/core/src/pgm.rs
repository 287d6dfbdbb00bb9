//! Binary PGM (P5) reading and writing, maxval 255.
//!
//! Values map to [0, 1] on load and back to `round(255 * v)` on save. The
//! writer emits a canonical header (`P5\n{w} {h}\n255\n`), so files
//! produced here round-trip byte-identically.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parse one whitespace-delimited ASCII token, skipping `#` comments.
fn next_token(bytes: &[u8], mut pos: usize) -> Result<(usize, usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    if pos >= bytes.len() {
        return Err(Error::format("unexpected end of header", pos as u64));
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    Ok((start, pos))
}

fn parse_usize(bytes: &[u8], range: (usize, usize), what: &str) -> Result<usize> {
    let s = std::str::from_utf8(&bytes[range.0..range.1])
        .map_err(|_| Error::format(format!("non-ASCII {what}"), range.0 as u64))?;
    s.parse::<usize>()
        .map_err(|_| Error::format(format!("invalid {what} {s:?}"), range.0 as u64))
}

/// Load a binary PGM into a tensor with values in [0, 1].
pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    load_pgm_bytes(&bytes)
}

pub fn load_pgm_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::format("missing P5 magic", 0));
    }
    let (s, e) = next_token(bytes, 2)?;
    let width = parse_usize(bytes, (s, e), "width")?;
    let (s, e) = next_token(bytes, e)?;
    let height = parse_usize(bytes, (s, e), "height")?;
    let (s, e) = next_token(bytes, e)?;
    let maxval = parse_usize(bytes, (s, e), "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}, expected 255"), s as u64));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("zero image extent", s as u64));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload_start = e + 1;
    if e >= bytes.len() || !bytes[e].is_ascii_whitespace() {
        return Err(Error::format("missing separator after maxval", e as u64));
    }
    let expected = width * height;
    let payload = &bytes[payload_start.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::format(
            format!("payload holds {} bytes, expected {expected}", payload.len()),
            payload_start as u64,
        ));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![height, width], data)
}

/// Save a [0, 1]-valued 2-D tensor as binary PGM; values are rounded to
/// the nearest of 256 levels and clamped.
pub fn save_pgm(tensor: &Tensor, path: &Path) -> Result<()> {
    let bytes = pgm_bytes(tensor)?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn pgm_bytes(tensor: &Tensor) -> Result<Vec<u8>> {
    if tensor.shape().len() != 2 {
        return Err(Error::usage(format!("save_pgm expects a 2-D tensor, got {:?}", tensor.shape())));
    }
    let (h, w) = (tensor.rows(), tensor.cols());
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in tensor.data() {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("zsad_pgm_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn single_white_pixel() {
        let t = Tensor::filled(&[1, 1], 1.0);
        let bytes = pgm_bytes(&t).unwrap();
        let back = load_pgm_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), &[1, 1]);
        assert_eq!(back.data(), &[1.0]);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = crate::rng::SeededRng::new(2);
        let t = Tensor::new(vec![5, 7], (0..35).map(|_| rng.next_f64()).collect()).unwrap();
        let path = tmp("roundtrip.pgm");
        save_pgm(&t, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_pgm(&path).unwrap();
        save_pgm(&loaded, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn load_recovers_values_within_one_level() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let bytes = pgm_bytes(&t).unwrap();
        let back = load_pgm_bytes(&bytes).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn rejects_wrong_maxval() {
        let bytes = b"P5\n2 2\n127\n\x00\x01\x02\x03".to_vec();
        let err = load_pgm_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_payload_with_offset() {
        let bytes = b"P5\n2 2\n255\n\x00\x01".to_vec();
        match load_pgm_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(load_pgm_bytes(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x10\xff".to_vec();
        let t = load_pgm_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.data()[1], 1.0);
    }
}
