//! RGB images: PPM I/O, training augmentation and patch extraction.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary P6 encoding with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut p = PpmCursor { bytes, pos: 0 };
        if bytes.get(..2) != Some(b"P6") {
            return Err(Error::Ppm {
                offset: 0,
                reason: "missing P6 magic".into(),
            });
        }
        p.pos = 2;
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Ppm {
                offset: p.pos,
                reason: format!("unsupported maxval {maxval}"),
            });
        }
        if width == 0 || height == 0 {
            return Err(Error::Ppm {
                offset: p.pos,
                reason: "zero-sized image".into(),
            });
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => {
                return Err(Error::Ppm {
                    offset: p.pos,
                    reason: "expected whitespace before raster".into(),
                })
            }
        }
        let need = width * height * 3;
        let raster = &bytes[p.pos..];
        if raster.len() < need {
            return Err(Error::Ppm {
                offset: bytes.len(),
                reason: format!("raster truncated: need {need} bytes, have {}", raster.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data: raster[..need].to_vec(),
        })
    }
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Ppm {
                offset: start,
                reason: format!("expected decimal {field}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Ppm {
                offset: start,
                reason: format!("{field} out of range"),
            })
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::from_ppm(&bytes)
}

pub fn save_image(image: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, image.to_ppm()).map_err(|e| Error::io(path, e))
}

pub fn flip_horizontal(image: &RgbImage) -> RgbImage {
    let mut out = RgbImage::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            out.set_pixel(image.width - 1 - x, y, image.pixel(x, y));
        }
    }
    out
}

/// Bilinear resample of the window `(x0, y0, w, h)` (source pixel units) to
/// `side × side`. Sample positions use pixel-centre alignment.
pub fn resample_window(image: &RgbImage, x0: f64, y0: f64, w: f64, h: f64, side: usize) -> RgbImage {
    let mut out = RgbImage::new(side, side);
    let sx = w / side as f64;
    let sy = h / side as f64;
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;
    for oy in 0..side {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(image.height - 1);
        let ty = fy - y_lo as f64;
        for ox in 0..side {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(image.width - 1);
            let tx = fx - x_lo as f64;
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let p = |x: usize, y: usize| f64::from(image.data[(y * image.width + x) * 3 + c]);
                let top = p(x_lo, y_lo) * (1.0 - tx) + p(x_hi, y_lo) * tx;
                let bottom = p(x_lo, y_hi) * (1.0 - tx) + p(x_hi, y_hi) * tx;
                *v = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(ox, oy, rgb);
        }
    }
    out
}

/// Deterministic resize to `side × side`; identity when already that size.
pub fn resize(image: &RgbImage, side: usize) -> RgbImage {
    if image.width == side && image.height == side {
        return image.clone();
    }
    resample_window(image, 0.0, 0.0, image.width as f64, image.height as f64, side)
}

/// Smallest and largest area fraction kept by the random crop.
pub const CROP_SCALE: (f64, f64) = (0.6, 1.0);

/// Training mode: square random-resized crop (area fraction uniform in
/// [`CROP_SCALE`]) followed by a horizontal flip with probability 0.5.
/// Eval mode: plain resize.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R, train_mode: bool, side: usize) -> RgbImage {
    if !train_mode {
        return resize(image, side);
    }
    let scale = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
    let frac = scale.sqrt();
    let w = image.width as f64 * frac;
    let h = image.height as f64 * frac;
    let x0 = rng.random::<f64>() * (image.width as f64 - w);
    let y0 = rng.random::<f64>() * (image.height as f64 - h);
    let cropped = resample_window(image, x0, y0, w, h, side);
    if rng.random_bool(0.5) {
        flip_horizontal(&cropped)
    } else {
        cropped
    }
}

/// Non-overlapping square patches, row-major over the grid, each flattened
/// channel-last and scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[i * d..(i + 1) * d]
    }
}

pub fn patchify(image: &RgbImage, patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 || !image.width.is_multiple_of(patch_size) || !image.height.is_multiple_of(patch_size) {
        return Err(Error::InvalidConfig(format!(
            "image {}x{} is not divisible into {patch_size}-pixel patches",
            image.width, image.height
        )));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let d = patch_size * patch_size * 3;
    let mut patches = Vec::with_capacity(rows * cols * d);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch_size {
                let start = ((pr * patch_size + y) * image.width + pc * patch_size) * 3;
                patches.extend(
                    image.data[start..start + patch_size * 3]
                        .iter()
                        .map(|&v| f32::from(v) / 255.0),
                );
            }
        }
    }
    Ok(PatchSequence {
        patches,
        rows,
        cols,
        patch_size,
    })
}

/// Inverse of [`patchify`]; values are rounded back to 8 bits.
pub fn unpatchify(seq: &PatchSequence) -> RgbImage {
    let p = seq.patch_size;
    let mut image = RgbImage::new(seq.cols * p, seq.rows * p);
    let d = seq.patch_dim();
    for pr in 0..seq.rows {
        for pc in 0..seq.cols {
            let patch = &seq.patches[(pr * seq.cols + pc) * d..][..d];
            for y in 0..p {
                let start = ((pr * p + y) * image.width + pc * p) * 3;
                for (dst, &v) in image.data[start..start + p * 3]
                    .iter_mut()
                    .zip(&patch[y * p * 3..(y + 1) * p * 3])
                {
                    *dst = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = stream(seed, "img");
        RgbImage {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rand::Rng::random(&mut rng)).collect(),
        }
    }

    #[test]
    fn default_geometry_gives_196_patches_of_768() {
        let seq = patchify(&RgbImage::new(224, 224), 16).unwrap();
        assert_eq!(seq.len(), 196);
        assert_eq!(seq.patch_dim(), 768);
        assert_eq!(seq.patches.len(), 196 * 768);
    }

    #[test]
    fn small_geometry_gives_four_patches() {
        let seq = patchify(&RgbImage::new(32, 32), 16).unwrap();
        assert_eq!((seq.rows, seq.cols, seq.patch_dim()), (2, 2, 768));
    }

    #[test]
    fn non_divisible_geometry_is_rejected() {
        assert!(matches!(
            patchify(&RgbImage::new(40, 32), 16),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn patch_layout_is_row_major_channel_last() {
        let mut img = RgbImage::new(32, 32);
        img.set_pixel(17, 1, [255, 0, 51]); // patch (0, 1), local (1, 1)
        let seq = patchify(&img, 16).unwrap();
        let p = seq.patch(1);
        let off = (16 + 1) * 3;
        assert_eq!(&p[off..off + 3], &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn eval_mode_is_identity_at_target_size() {
        let img = noise_image(64, 64, 1);
        let mut rng = stream(0, "aug");
        assert_eq!(augment(&img, &mut rng, false, 64), img);
    }

    #[test]
    fn train_mode_is_reproducible() {
        let img = noise_image(64, 64, 2);
        let a = augment(&img, &mut stream(5, "aug"), true, 64);
        let b = augment(&img, &mut stream(5, "aug"), true, 64);
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (64, 64));
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let img = noise_image(5, 3, 3);
        assert_eq!(RgbImage::from_ppm(&img.to_ppm()).unwrap(), img);

        let with_comment = [b"P6\n# hi\n5 3\n255\n".as_slice(), &img.data].concat();
        assert_eq!(RgbImage::from_ppm(&with_comment).unwrap(), img);

        match RgbImage::from_ppm(b"P5\n1 1\n255\n\0") {
            Err(Error::Ppm { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match RgbImage::from_ppm(b"P6\n2 x\n255\n") {
            Err(Error::Ppm { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        let truncated = [b"P6\n2 2\n255\n".as_slice(), &[0u8; 5]].concat();
        assert!(matches!(RgbImage::from_ppm(&truncated), Err(Error::Ppm { .. })));
        assert!(matches!(
            RgbImage::from_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::Ppm { .. })
        ));
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let img = noise_image(w, h, seed);
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        }

        #[test]
        fn patchify_round_trips(rows in 1usize..4, cols in 1usize..4, p in 1usize..9, seed in any::<u64>()) {
            let img = noise_image(cols * p, rows * p, seed);
            let seq = patchify(&img, p).unwrap();
            prop_assert_eq!(seq.len(), rows * cols);
            prop_assert!(seq.patches.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(unpatchify(&seq), img);
        }
    }
}
