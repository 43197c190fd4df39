//! Binary portable graymap (P5) and pixmap (P6) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), w * h);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `[3, H, W]` image in `[0, 1]` to P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    let (c, h, w) = crate::imaging::dims(img);
    assert_eq!(c, 3);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + i]));
        }
    }
    out
}

pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(w, h, pixels))?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &str) -> Result<(usize, usize, &'a [u8])> {
    let bad = |msg: &str| Error::Parse {
        path: path.into(),
        line: 1,
        msg: msg.to_owned(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // single whitespace byte after maxval
    Ok((w, h, &bytes[pos + 1..]))
}

/// Reads a P6 file into `[3, H, W]` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let (w, h, body) = parse_header(&bytes, "P6", &name)?;
    if body.len() < w * h * 3 {
        return Err(Error::Parse {
            path: name.into(),
            line: 1,
            msg: "pixel data truncated".into(),
        });
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = body[i * 3 + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a P5 file as `(w, h, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let (w, h, body) = parse_header(&bytes, "P5", &name)?;
    if body.len() < w * h {
        return Err(Error::Parse {
            path: name.into(),
            line: 1,
            msg: "pixel data truncated".into(),
        });
    }
    Ok((w, h, body[..w * h].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_are_byte_exact() {
        let b = encode_pgm(8, 8, &[7; 64]);
        assert_eq!(&b[..11], b"P5\n8 8\n255\n");
        assert_eq!(b.len(), 11 + 64);
        let b = encode_ppm(&Tensor::zeros(&[3, 2, 3]));
        assert_eq!(&b[..11], b"P6\n3 2\n255\n");
        assert_eq!(b.len(), 11 + 18);
    }

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        let q = dir.path().join("b.pgm");
        write_pgm(&q, 2, 1, &[3, 250]).unwrap();
        assert_eq!(read_pgm(&q).unwrap(), (2, 1, vec![3, 250]));
        assert!(read_ppm(&q).is_err());
    }
}
