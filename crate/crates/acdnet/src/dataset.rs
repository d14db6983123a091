//! On-disk RGB-D panorama datasets.
//!
//! A dataset directory holds frames named `NNNN.rgb.png` / `NNNN.depth.png`
//! (plus an optional `NNNN.mask.png`). Color is 8-bit RGB; depth is 16-bit
//! single-channel in millimeters with 0 marking missing ground truth. Both
//! images share dimensions with width = 2 * height.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::PanoFrame;
use crate::loss::ValidMask;
use crate::tensor::{Shape, Tensor};

/// Millimeters per meter; depth PNGs quantize to 1 mm.
const MM: f64 = 1000.0;

#[derive(Clone, Debug)]
pub struct FrameEntry {
    pub index: u32,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// A scanned dataset directory with frames in index order.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub frames: Vec<FrameEntry>,
}

impl DatasetDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut frames = Vec::new();
        let entries = std::fs::read_dir(&root).map_err(|e| Error::Dataset {
            path: root.clone(),
            message: format!("cannot read directory: {e}"),
        })?;
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".rgb.png") {
                if let Ok(index) = stem.parse::<u32>() {
                    let depth_path = root.join(format!("{stem}.depth.png"));
                    if !depth_path.is_file() {
                        return Err(Error::Dataset {
                            path: depth_path,
                            message: "depth file missing for rgb frame".into(),
                        });
                    }
                    let mask_path = root.join(format!("{stem}.mask.png"));
                    frames.push(FrameEntry {
                        index,
                        rgb_path: entry.path(),
                        depth_path,
                        mask_path: mask_path.is_file().then_some(mask_path),
                    });
                }
            }
        }
        if frames.is_empty() {
            return Err(Error::Dataset { path: root, message: "no NNNN.rgb.png frames found".into() });
        }
        frames.sort_by_key(|f| f.index);
        Ok(DatasetDir { root, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn by_index(&self, index: u32) -> Option<&FrameEntry> {
        self.frames.iter().find(|f| f.index == index)
    }

    pub fn load(&self, entry: &FrameEntry) -> Result<PanoFrame> {
        let rgb_img = image::open(&entry.rgb_path)?;
        let rgb = match rgb_img {
            DynamicImage::ImageRgb8(img) => img,
            other => {
                return Err(Error::Dataset {
                    path: entry.rgb_path.clone(),
                    message: format!("expected 8-bit RGB, got {:?}", other.color()),
                })
            }
        };
        let depth_img = image::open(&entry.depth_path)?;
        let depth = match depth_img {
            DynamicImage::ImageLuma16(img) => img,
            other => {
                return Err(Error::Dataset {
                    path: entry.depth_path.clone(),
                    message: format!("expected 16-bit grayscale depth, got {:?}", other.color()),
                })
            }
        };
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if depth.width() as usize != w || depth.height() as usize != h {
            return Err(Error::Dataset {
                path: entry.depth_path.clone(),
                message: format!(
                    "depth {}x{} does not match rgb {w}x{h}",
                    depth.width(),
                    depth.height()
                ),
            });
        }
        if w != 2 * h {
            return Err(Error::Dataset {
                path: entry.rgb_path.clone(),
                message: format!("equirectangular frames need width = 2 * height, got {w}x{h}"),
            });
        }

        let rgb_shape = Shape::new(1, 3, h, w);
        let mut rgb_data = vec![0.0; rgb_shape.numel()];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                rgb_data[rgb_shape.index(0, c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
            }
        }
        let d_shape = Shape::new(1, 1, h, w);
        let mut d_data = vec![0.0; d_shape.numel()];
        let mut valid = vec![false; d_shape.numel()];
        for (x, y, px) in depth.enumerate_pixels() {
            let i = d_shape.index(0, 0, y as usize, x as usize);
            d_data[i] = px.0[0] as f64 / MM;
            valid[i] = px.0[0] > 0;
        }
        if let Some(mask_path) = &entry.mask_path {
            let mask_img = image::open(mask_path)?.to_luma8();
            if mask_img.width() as usize != w || mask_img.height() as usize != h {
                return Err(Error::Dataset {
                    path: mask_path.clone(),
                    message: "mask dimensions do not match the frame".into(),
                });
            }
            for (x, y, px) in mask_img.enumerate_pixels() {
                if px.0[0] == 0 {
                    valid[d_shape.index(0, 0, y as usize, x as usize)] = false;
                }
            }
        }

        Ok(PanoFrame {
            rgb: Tensor::from_vec(rgb_shape, rgb_data)?,
            depth: Tensor::from_vec(d_shape, d_data)?,
            mask: ValidMask::from_vec(d_shape, valid)?,
        })
    }
}

/// Encode one metric depth value as a 16-bit millimeter sample.
pub fn depth_to_mm(meters: f64) -> u16 {
    (meters * MM).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Write a frame pair under `dir` as `NNNN.rgb.png` + `NNNN.depth.png`.
/// Pixels the mask marks invalid encode as depth 0.
pub fn save_frame(dir: impl AsRef<Path>, index: u32, frame: &PanoFrame) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let sh = frame.depth.shape();
    let (h, w) = (sh.height, sh.width);

    let mut rgb = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = frame.rgb.at(0, c, y as usize, x as usize);
            px.0[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    rgb.save(dir.join(format!("{index:04}.rgb.png")))?;

    let mut depth = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in depth.enumerate_pixels_mut() {
        px.0[0] = if frame.mask.get(0, y as usize, x as usize) {
            depth_to_mm(frame.depth.at(0, 0, y as usize, x as usize)).max(1)
        } else {
            0
        };
    }
    depth.save(dir.join(format!("{index:04}.depth.png")))?;
    Ok(())
}
