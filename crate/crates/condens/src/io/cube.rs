//! CUBE1 hyperspectral image format.
//!
//! Layout: ASCII header line `CUBE1 <height> <width> <bands>\n` followed by
//! exactly `height * width * bands` little-endian IEEE-754 f64 values,
//! row-major with the band index fastest.

use crate::dataset::Dataset;
use crate::{Error, Result};

const MAX_VALUES: u64 = 1 << 28; // 2 GiB of payload; rejects absurd headers

#[derive(Debug, Clone, PartialEq)]
pub struct CubeImage {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `data[(row * width + col) * bands + band]`.
    pub data: Vec<f64>,
}

impl CubeImage {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Format("cube dimensions must be positive".into()));
        }
        if data.len() != height * width * bands {
            return Err(Error::Format("cube payload length mismatch".into()));
        }
        Ok(CubeImage { height, width, bands, data })
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    /// Pixel-center coordinates scaled to `[0,1]^2` paired with spectra:
    /// `x = ((col + 0.5)/width, (row + 0.5)/height)`.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let mut xs = Vec::with_capacity(self.height * self.width);
        let mut ys = Vec::with_capacity(self.height * self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                xs.push(vec![
                    (col as f64 + 0.5) / self.width as f64,
                    (row as f64 + 0.5) / self.height as f64,
                ]);
                ys.push(self.spectrum(row, col).to_vec());
            }
        }
        Dataset::new(xs, ys)
    }
}

pub fn decode_cube(bytes: &[u8]) -> Result<CubeImage> {
    let newline = bytes
        .iter()
        .take(128)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some("CUBE1") {
        return Err(Error::Format("bad magic, expected CUBE1".into()));
    }
    let mut dims = [0u64; 3];
    for d in dims.iter_mut() {
        let field = parts.next().ok_or_else(|| Error::Format("header needs 3 dimensions".into()))?;
        *d = field
            .parse()
            .map_err(|_| Error::Format(format!("bad dimension `{field}`")))?;
        if *d == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
    }
    if parts.next().is_some() {
        return Err(Error::Format("trailing header fields".into()));
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    if count > MAX_VALUES {
        return Err(Error::Format(format!("cube of {count} values exceeds the size cap")));
    }
    let payload = &bytes[newline + 1..];
    let expected = (count as usize)
        .checked_mul(8)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count as usize);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
    }
    CubeImage::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
}

pub fn encode_cube(img: &CubeImage) -> Vec<u8> {
    let mut out = format!("CUBE1 {} {} {}\n", img.height, img.width, img.bands).into_bytes();
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = CubeImage::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let bytes = encode_cube(&img);
        let back = decode_cube(&bytes).unwrap();
        assert_eq!(img, back);
        assert_eq!(back.spectrum(1, 2), &[10.0 * 0.5, 11.0 * 0.5]);
    }

    #[test]
    fn dataset_coordinates() {
        let img = CubeImage::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let data = img.to_dataset().unwrap();
        assert_eq!(data.x[0], vec![0.25, 0.25]);
        assert_eq!(data.x[1], vec![0.75, 0.25]);
        assert_eq!(data.x[3], vec![0.75, 0.75]);
        assert_eq!(data.y[3], vec![4.0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_cube(b"").is_err());
        assert!(decode_cube(b"CUBE2 1 1 1\n").is_err());
        assert!(decode_cube(b"CUBE1 1 1\n").is_err());
        assert!(decode_cube(b"CUBE1 0 1 1\n").is_err());
        assert!(decode_cube(b"CUBE1 1 1 1 9\n").is_err());
        assert!(decode_cube(b"CUBE1 1 1 1\nshort").is_err());
        // Absurd header must fail before any allocation.
        assert!(decode_cube(b"CUBE1 99999999999 99999999999 9\n").is_err());
        let ok = decode_cube(b"CUBE1 1 1 1\n\x00\x00\x00\x00\x00\x00\xf0\x3f").unwrap();
        assert_eq!(ok.data, vec![1.0]);
    }
}
