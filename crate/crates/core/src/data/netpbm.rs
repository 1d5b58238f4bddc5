//! Binary PPM (P6) images and PGM (P5) label masks.

use std::fs;
use std::path::Path;

use crate::data::{Image, Mask};
use crate::error::{Error, Result};

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_pgm(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    for &l in &mask.labels {
        let v = u8::try_from(l).map_err(|_| Error::Input(format!("class id {l} does not fit in a PGM byte")))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(mask)?)?;
    Ok(())
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    payload: usize,
}

fn parse_error(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_error(path, 0, "missing netpbm magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(parse_error(path, pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_error(path, pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_error(path, start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_error(path, pos, "expected one whitespace byte before raster")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_error(path, pos, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        payload: pos,
    })
}

fn samples(bytes: &[u8], h: &Header, count: usize, path: &Path) -> Result<Vec<usize>> {
    let width = if h.maxval < 256 { 1 } else { 2 };
    let need = count * width;
    let avail = bytes.len() - h.payload;
    if avail < need {
        return Err(parse_error(
            path,
            bytes.len(),
            format!("truncated raster: need {need} bytes, have {avail}"),
        ));
    }
    let raster = &bytes[h.payload..h.payload + need];
    Ok(if width == 1 {
        raster.iter().map(|&b| b as usize).collect()
    } else {
        raster.chunks(2).map(|c| (c[0] as usize) << 8 | c[1] as usize).collect()
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P6" {
        return Err(parse_error(path, 0, "expected P6"));
    }
    let raw = samples(bytes, &h, h.width * h.height * 3, path)?;
    let scale = h.maxval as f64;
    Ok(Image {
        height: h.height,
        width: h.width,
        data: raw.into_iter().map(|v| v as f64 / scale).collect(),
    })
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Mask> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P5" {
        return Err(parse_error(path, 0, "expected P5"));
    }
    let raw = samples(bytes, &h, h.width * h.height, path)?;
    Ok(Mask {
        height: h.height,
        width: h.width,
        labels: raw.into_iter().map(|v| v as u32).collect(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let mask = Mask {
            height: 3,
            width: 4,
            labels: (0..12).map(|i| (i * 21) as u32).collect(),
        };
        let back = decode_pgm(&encode_pgm(&mask).unwrap(), p()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let mut img = Image::new(5, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 1000) as f64 / 999.0;
        }
        let back = decode_ppm(&encode_ppm(&img), p()).unwrap();
        let err = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 255.0);
    }

    #[test]
    fn foreign_header_with_comments() {
        let mut bytes = b"P6 # written by another tool\n# second comment\n2 1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
        let img = decode_ppm(&bytes, p()).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P5\n1 2\n1000\n".to_vec();
        bytes.extend_from_slice(&[0x03, 0xE8, 0x00, 0x07]);
        let m = decode_pgm(&bytes, p()).unwrap();
        assert_eq!(m.labels, vec![1000, 7]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        match decode_ppm(b"P6\n2 2\n255\n\x00\x01", p()) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, 13);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match decode_ppm(b"P6\n2 x\n255\n", p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00", p()).is_err());
        assert!(decode_pgm(b"XX", p()).is_err());
        assert!(matches!(read_ppm(Path::new("/nonexistent/x.ppm")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn class_ids_must_fit_a_byte() {
        let m = Mask::filled(1, 1, 300);
        assert!(encode_pgm(&m).is_err());
    }
}
