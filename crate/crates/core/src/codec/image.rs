use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanoImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl PanoImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::from_data(width, height, channels, vec![0; width * height * channels])
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} bytes, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Write an intensity through the fixed gray-to-RGB palette.
    pub fn set_gray(&mut self, x: usize, y: usize, g: u8) {
        let ch = self.channels;
        for (dst, v) in self.pixel_mut(x, y).iter_mut().zip(Self::palette(g, ch)) {
            *dst = v;
        }
    }

    /// Fixed intensity palette; channel 0 is always the intensity itself.
    pub fn palette(g: u8, channels: usize) -> impl Iterator<Item = u8> {
        let rgb = [g, 255 - g, g / 2 + 64];
        rgb.into_iter().take(channels)
    }

    /// Columns `[x0, x1)` and rows `[y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<PanoImage> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::OutOfRange(format!(
                "crop [{x0},{x1})x[{y0},{y1}) of {}x{}",
                self.width, self.height
            )));
        }
        let ch = self.channels;
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * ch);
        for y in y0..y1 {
            let o = (y * self.width + x0) * ch;
            data.extend_from_slice(&self.data[o..o + (x1 - x0) * ch]);
        }
        PanoImage::from_data(x1 - x0, y1 - y0, ch, data)
    }

    pub fn inverted(&self) -> PanoImage {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = 255 - *v;
        }
        out
    }
}

/// Binary PGM (P5) for gray, PPM (P6) for RGB, maxval 255.
pub fn write_pnm(path: &Path, image: &PanoImage) -> Result<()> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut buf = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.data);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<PanoImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|reason| Error::BadHeader {
        format: "PNM",
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<PanoImage, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
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
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates maxval from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic {m:?}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad number {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} != 255"));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(format!("raster needs {need} bytes"));
    }
    PanoImage::from_data(w, h, channels, bytes[pos..pos + need].to_vec()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1, 3] {
            let data: Vec<u8> = (0..5 * 4 * ch).map(|i| (i * 7 % 256) as u8).collect();
            let img = PanoImage::from_data(5, 4, ch, data).unwrap();
            let p = dir.path().join(format!("a{ch}.pnm"));
            write_pnm(&p, &img).unwrap();
            assert_eq!(read_pnm(&p).unwrap(), img);
            let raw = std::fs::read(&p).unwrap();
            assert!(raw.starts_with(if ch == 1 { b"P5\n5 4\n255\n" } else { b"P6\n5 4\n255\n" }));
        }
    }

    #[test]
    fn pnm_rejects_garbage() {
        assert!(parse_pnm(b"P2\n1 1\n255\n\0").is_err());
        assert!(parse_pnm(b"P5\n2 2\n255\n\0").is_err());
        assert!(parse_pnm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(parse_pnm(b"P5 # c\n1 1\n255\n\x07").is_ok());
    }

    #[test]
    fn crop_bounds() {
        let img = PanoImage::new(8, 4, 1).unwrap();
        assert_eq!(img.crop(2, 0, 6, 4).unwrap().width(), 4);
        assert!(img.crop(2, 0, 9, 4).is_err());
    }
}
