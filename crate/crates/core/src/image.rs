//! RGB float images and their portable float map / pixmap encodings.

use std::io::{BufRead, Write};

use crate::{Error, Result};

/// Row-major RGB image, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i] as f64, self.data[i + 1] as f64, self.data[i + 2] as f64]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for ch in 0..3 {
            self.data[i + ch] = c[ch] as f32;
        }
    }

    /// Little-endian PFM. Rows are stored bottom to top as the format requires.
    pub fn write_pfm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for y in (0..self.height).rev() {
            let row = &self.data[y * self.width * 3..(y + 1) * self.width * 3];
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_pfm<R: BufRead>(mut r: R, path: &str) -> Result<Self> {
        let mut header = Vec::new();
        // three whitespace-terminated header lines
        for line in 1..=3 {
            let mut l = String::new();
            r.read_line(&mut l)?;
            if l.is_empty() {
                return Err(Error::parse(path, line, "truncated PFM header"));
            }
            header.push(l.trim().to_string());
        }
        if header[0] != "PF" {
            return Err(Error::parse(path, 1, "only color PFM ('PF') is supported"));
        }
        let dims: Vec<usize> = header[1]
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, 2, "bad PFM dimensions"))?;
        if dims.len() != 2 {
            return Err(Error::parse(path, 2, "bad PFM dimensions"));
        }
        let scale: f32 = header[2].parse().map_err(|_| Error::parse(path, 3, "bad PFM scale"))?;
        let little = scale < 0.0;
        let (width, height) = (dims[0], dims[1]);
        let mut bytes = vec![0u8; width * height * 12];
        r.read_exact(&mut bytes)?;
        let mut img = Image::new(width, height);
        for (n, chunk) in bytes.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let row = n / (width * 3);
            let col = n % (width * 3);
            img.data[(height - 1 - row) * width * 3 + col] = v;
        }
        Ok(img)
    }

    /// 8-bit binary PPM, values clamped to `[0, 1]`.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    }
}
