use std::fs;
use std::path::Path;

use crate::data::RgbImage;
use crate::error::{Error, Result};

/// Binary portable pixmap with maxval 255.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a P6 pixmap; header tokens may be separated by any whitespace
/// and `#` comments.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
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
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated pixmap header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Data("not a P6 pixmap".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Data(format!("bad pixmap header value `{s}`")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != width * height * 3 {
        return Err(Error::Data(format!(
            "pixmap payload has {} bytes, expected {}",
            body.len(),
            width * height * 3
        )));
    }
    RgbImage::new(width, height, body.to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        let commented = b"P6 # c\n2 1\n# another\n255\n\x01\x02\x03\x04\x05\x06";
        assert_eq!(decode_ppm(commented).unwrap(), img);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    }
}
