//! Binary PGM (P5) and PPM (P6) image files, 8-bit, maxval 255.
//!
//! Pixels map to [0,1] on read; writes clamp to [0,1] and quantize with
//! round(v * 255). Header comments starting with '#' are skipped.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{MirError, Result};
use crate::tensor::Tensor;

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderReader { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping '#' comments to end of line.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(MirError::Format("truncated image header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MirError::Format("malformed number in image header".into()))
    }
}

/// Reads a P5 (grayscale, [H,W,1]) or P6 (color, [H,W,3]) file.
pub fn image_read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut hdr = HeaderReader::new(&bytes);
    let magic = hdr.token()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(MirError::Format(format!(
                "unsupported magic {:?} (want P5 or P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = hdr.number()?;
    let height = hdr.number()?;
    let maxval = hdr.number()?;
    if maxval != 255 {
        return Err(MirError::Format(format!(
            "unsupported maxval {maxval} (only 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(MirError::Format("zero image dimension".into()));
    }
    // exactly one whitespace byte separates header and payload
    let payload_start = hdr.pos + 1;
    let expected = height * width * channels;
    if bytes.len() < payload_start + expected {
        return Err(MirError::Format(format!(
            "truncated payload: want {expected} bytes, have {}",
            bytes.len().saturating_sub(payload_start)
        )));
    }
    let data: Vec<f64> = bytes[payload_start..payload_start + expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Tensor::from_vec(&[height, width, channels], data))
}

/// Writes [H,W,1] as P5 or [H,W,3] as P6.
pub fn image_write(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[2] != 1 && shape[2] != 3) {
        return Err(MirError::Shape(format!(
            "image_write expects [H,W,1] or [H,W,3], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(32 + h * w * c);
    write!(out, "{magic}\n{w} {h}\n255\n").expect("writing to a Vec cannot fail");
    for &v in image.data().iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Quantize to the 8-bit grid in place (what a write-then-read would do).
pub fn quantize(image: &Tensor) -> Tensor {
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::from_vec(image.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mambair-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_within_quantization_bound() {
        let mut rng = Rng::new(70);
        let data: Vec<f64> = (0..4 * 5 * 3).map(|_| rng.uniform()).collect();
        let img = Tensor::from_vec(&[4, 5, 3], data);
        let path = tmpfile("roundtrip.ppm");
        image_write(&path, &img).unwrap();
        let back = image_read(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn all_black_reads_as_zeros() {
        let img = Tensor::zeros(&[3, 3, 1]);
        let path = tmpfile("black.pgm");
        image_write(&path, &img).unwrap();
        let back = image_read(&path).unwrap();
        assert!(back.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn p6_header_parses_to_2x2x3() {
        let path = tmpfile("tiny.ppm");
        let mut bytes = b"P6 2 2 255 ".to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, bytes).unwrap();
        let img = image_read(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2, 3]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmpfile("comment.pgm");
        let mut bytes = b"P5\n# a comment line\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[128, 255]);
        std::fs::write(&path, bytes).unwrap();
        let img = image_read(&path).unwrap();
        assert_eq!(img.shape(), &[1, 2, 1]);
        assert!((img.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs_error() {
        let path = tmpfile("bad-magic.ppm");
        std::fs::write(&path, b"P7 1 1 255 xxx").unwrap();
        assert!(image_read(&path).is_err());

        let path = tmpfile("bad-maxval.pgm");
        std::fs::write(&path, b"P5 1 1 65535 ab").unwrap();
        assert!(image_read(&path).is_err());

        let path = tmpfile("truncated.ppm");
        std::fs::write(&path, b"P6 4 4 255 onlyafewbytes").unwrap();
        assert!(image_read(&path).is_err());
    }
}
