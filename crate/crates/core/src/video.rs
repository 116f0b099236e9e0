//! Frames, clips and their on-disk form: numbered 8-bit PGM/PPM files plus
//! `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimParams;

/// Planar `C×H×W` frame with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(&[channels, height, width], "empty frame"));
        }
        let want = channels * height * width;
        if data.len() != want {
            return Err(Error::LengthMismatch {
                shape: vec![channels, height, width],
                expected: want,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_geometry(&self, other: &Frame) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// Rounds to the nearest of the 256 8-bit levels.
    pub fn quantized(&self) -> Frame {
        Frame {
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }

    fn to_image(&self) -> Result<DynamicImage> {
        let (h, w) = (self.height as u32, self.width as u32);
        match self.channels {
            1 => Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect()).expect("sized"),
            )),
            3 => {
                let n = self.height * self.width;
                let mut buf = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        buf.push(to_u8(self.data[c * n + i]));
                    }
                }
                Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, buf).expect("sized")))
            }
            c => Err(Error::shape(&[c], "frames have 1 or 3 channels")),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a binary or ASCII PGM (1 channel) or PPM (3 channels).
pub fn read_frame(path: &Path) -> Result<Frame> {
    let bad = |reason: String| Error::Image {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Frame::new(1, h, w, g.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()),
        DynamicImage::ImageRgb8(rgb) => {
            let n = h * w;
            let raw = rgb.into_raw();
            let mut data = vec![0.0; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = raw[3 * i + c] as f32 / 255.0;
                }
            }
            Frame::new(3, h, w, data)
        }
        other => Err(bad(format!("unsupported pixel layout {:?}; only 8-bit gray or RGB", other.color()))),
    }
}

/// Writes binary PGM for one channel, binary PPM for three.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let img = frame.to_image()?;
    img.save_with_format(path, ImageFormat::Pnm).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Equal-geometry frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::shape(&[0], "clip has no frames"))?;
        if let Some(f) = frames.iter().find(|f| !f.same_geometry(first)) {
            return Err(Error::mismatch(
                "VideoClip",
                &[first.channels, first.height, first.width],
                &[f.channels, f.height, f.width],
            ));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn quantized(&self) -> VideoClip {
        VideoClip {
            frames: self.frames.iter().map(Frame::quantized).collect(),
        }
    }
}

/// `manifest.json` of a clip directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ClipManifest {
    pub fn describe(clip: &VideoClip) -> Self {
        Self {
            width: clip.width(),
            height: clip.height(),
            frames: clip.len(),
            channels: clip.channels(),
            sim: None,
            seed: None,
        }
    }
}

pub const MANIFEST: &str = "manifest.json";

fn frame_ext(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Frame file paths of a clip directory in name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every PGM/PPM frame in `dir`, sorted by file name.
pub fn read_clip(dir: &Path) -> Result<VideoClip> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Image {
            path: dir.display().to_string(),
            reason: "no .pgm or .ppm frames".into(),
        });
    }
    VideoClip::new(paths.iter().map(|p| read_frame(p)).collect::<Result<_>>()?)
}

/// Writes `frame_0000.pgm`, … and `manifest.json`. The index is padded to at
/// least four digits.
pub fn write_clip(dir: &Path, clip: &VideoClip, manifest: &ClipManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let digits = clip.len().saturating_sub(1).to_string().len().max(4);
    let ext = frame_ext(clip.channels());
    for (i, f) in clip.frames.iter().enumerate() {
        write_frame(&dir.join(format!("frame_{i:0digits$}.{ext}")), f)?;
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Option<ClipManifest>> {
    let p = dir.join(MANIFEST);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize) -> Frame {
        let (h, w) = (5, 7);
        let data = (0..channels * h * w).map(|i| (i % 256) as f32 / 255.0).collect();
        Frame::new(channels, h, w, data).unwrap()
    }

    #[test]
    fn gray_and_color_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let f = ramp(c);
            let p = dir.path().join(format!("x.{}", frame_ext(c)));
            write_frame(&p, &f).unwrap();
            assert_eq!(read_frame(&p).unwrap(), f);
        }
    }

    #[test]
    fn ascii_pgm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        fs::write(&p, "P2\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(read_frame(&p).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn clip_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::new(vec![ramp(1), ramp(1).quantized(), Frame::filled(1, 5, 7, 0.5).unwrap().quantized()]).unwrap();
        let m = ClipManifest::describe(&clip);
        write_clip(dir.path(), &clip, &m).unwrap();
        assert_eq!(read_clip(dir.path()).unwrap(), clip);
        assert_eq!(read_manifest(dir.path()).unwrap(), Some(m));
        assert!(dir.path().join("frame_0002.pgm").exists());
    }

    #[test]
    fn mixed_geometry_and_garbage_are_rejected() {
        assert!(VideoClip::new(vec![ramp(1), ramp(3)]).is_err());
        assert!(VideoClip::new(vec![]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P9 nonsense").unwrap();
        assert!(matches!(read_frame(&p), Err(Error::Image { .. })));
        assert!(read_clip(dir.path()).is_err());
    }

    #[test]
    fn quantization_clamps() {
        let f = Frame::new(1, 1, 3, vec![-0.2, 0.5, 1.7]).unwrap().quantized();
        assert_eq!(f.data, vec![0.0, 128.0 / 255.0, 1.0]);
    }
}
