//! Frame and video carriers shared by every module.
//!
//! Intensities are `f32` in `[0, 1]`, stored row-major as `H x W x 3` per
//! frame and frame-major across a video.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A single RGB image, `height x width x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "frame buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Writes the frame as a binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&quantize_slice(&self.data))?;
        Ok(())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(file))
    }
}

/// `F` stacked frames of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0.0; frames * height * width * 3] }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::Shape(format!(
                "video buffer has {} values, expected {}x{}x{}x3",
                data.len(),
                frames,
                height,
                width
            )));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Shape("cannot build a video from zero frames".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(frames.len() * h * w * 3);
        for f in frames {
            if f.height != h || f.width != w {
                return Err(Error::Shape("frames differ in size".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Self { frames: frames.len(), height: h, width: w, data })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(F, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame { height: self.height, width: self.width, data: self.frame_slice(t).to_vec() }
    }

    pub fn last_frame(&self) -> Frame {
        self.frame(self.frames - 1)
    }

    /// Rounds every value to the nearest multiple of 1/255, the resolution of
    /// on-disk storage.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = dequantize(quantize(*v));
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        quantize_slice(&self.data)
    }

    pub fn from_u8(frames: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(frames, height, width, bytes.iter().map(|&b| dequantize(b)).collect())
    }

    /// Clamps all values into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Writes frames `0..F` as `prefix_000.ppm`, `prefix_001.ppm`, ...
    pub fn save_ppm_frames(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for t in 0..self.frames {
            self.frame(t).save_ppm(dir.as_ref().join(format!("{prefix}_{t:03}.ppm")))?;
        }
        Ok(())
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn quantize_slice(data: &[f32]) -> Vec<u8> {
    data.iter().map(|&v| quantize(v)).collect()
}

/// Lays frames side by side and videos top to bottom: one row per video,
/// one column per frame.
pub fn video_strip(rows: &[&VideoTensor]) -> Result<Frame> {
    let first = rows.first().ok_or_else(|| Error::Shape("empty strip".into()))?;
    let (f, h, w) = first.shape();
    if rows.iter().any(|v| v.shape() != (f, h, w)) {
        return Err(Error::Shape("strip rows differ in shape".into()));
    }
    let mut out = Frame::zeros(h * rows.len(), w * f);
    for (r, video) in rows.iter().enumerate() {
        for t in 0..f {
            let frame = video.frame_slice(t);
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) * 3;
                    out.set_pixel(t * w + x, r * h + y, [frame[i], frame[i + 1], frame[i + 2]]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let mut f = Frame::zeros(2, 3);
        f.set_pixel(2, 1, [1.0, 0.5, 0.0]);
        let mut buf = Vec::new();
        f.write_ppm(&mut buf).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 18);
        assert_eq!(&buf[buf.len() - 3..], &[255, 128, 0]);
    }

    #[test]
    fn quantized_video_survives_u8_round_trip() {
        let data: Vec<f32> = (0..2 * 2 * 2 * 3).map(|i| (i as f32 * 0.37).fract()).collect();
        let mut v = VideoTensor::from_vec(2, 2, 2, data).unwrap();
        v.quantize_u8();
        let back = VideoTensor::from_u8(2, 2, 2, &v.to_u8()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn rejects_bad_buffer_len() {
        assert!(VideoTensor::from_vec(2, 2, 2, vec![0.0; 5]).is_err());
        assert!(VideoTensor::from_frames(&[]).is_err());
    }
}
