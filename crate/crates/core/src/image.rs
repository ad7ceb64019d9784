//! RGB images and binary NetPBM (P6) I/O.
//!
//! Pixels are stored row-major, interleaved R, G, B, as `f64` in `[0, 1]`.
//! P6 files carry 8-bit samples with maxval 255 in the same RGB order.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use vton_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Rounds to the nearest 8-bit level so that values survive a P6 round trip.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn quantize_rgb(c: [f64; 3]) -> [f64; 3] {
    c.map(quantize)
}

impl Image {
    pub fn new(height: usize, width: usize, fill: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&fill);
        }
        Self { height, width, data }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::Image(format!("{} samples do not fill a {height}x{width} RGB image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// ITU-R BT.601 luma: `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Planar `[3, H, W]` tensor mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = p[c] * 2.0 - 1.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("image dims are nonzero")
    }

    /// Inverse of [`Image::to_tensor`], clamping to `[0, 1]`. Accepts
    /// `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected [3,H,W] image tensor, got {s:?}"))),
        };
        let hw = h * w;
        let d = t.data();
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = ((d[c * hw + i] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Image::from_raw(h, w, data)
    }

    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
        let f = std::fs::File::open(path)?;
        Self::decode_ppm(BufReader::new(f))
    }

    pub fn decode_ppm(mut r: impl BufRead) -> Result<Image> {
        let mut fields = Vec::with_capacity(4);
        let mut token = Vec::new();
        let mut byte = [0u8; 1];
        while fields.len() < 4 {
            if r.read(&mut byte)? == 0 {
                return Err(Error::Image("truncated P6 header".into()));
            }
            match byte[0] {
                b'#' if token.is_empty() => {
                    let mut skip = Vec::new();
                    r.read_until(b'\n', &mut skip)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        fields.push(String::from_utf8_lossy(&token).into_owned());
                        token.clear();
                    }
                }
                c => token.push(c),
            }
        }
        if fields[0] != "P6" {
            return Err(Error::Image(format!("expected P6 magic, got {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad header field {s}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Image(format!("only maxval 255 is supported, got {maxval}")));
        }
        let mut raw = vec![0u8; width * height * 3];
        r.read_exact(&mut raw)?;
        Image::from_raw(height, width, raw.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Horizontal concatenation of equally tall images.
    pub fn hstack(images: &[&Image]) -> Result<Image> {
        let h = images.first().map(|i| i.height).unwrap_or(0);
        if h == 0 || images.iter().any(|i| i.height != h) {
            return Err(Error::Shape("hstack needs non-empty images of equal height".into()));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = Image::new(h, w, [0.0; 3]);
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                for x in 0..img.width {
                    out.set(y, x0 + x, img.get(y, x));
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }
}
