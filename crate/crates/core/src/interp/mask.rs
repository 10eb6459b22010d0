use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasae::SparseCodeMatrix;
use crate::stats::{quantile_sorted, sorted};
use crate::tensorio::{read_bytes, write_bytes, TokenGrouping};

pub const DEFAULT_MASK_QUANTILE: f64 = 0.7;

/// One concept's token activations laid out on the patch grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialActivationMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpatialActivationMap {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} activations for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("activation map holds {v}")));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            values,
        })
    }

    /// Reads the tokens of image `image` for `concept` out of token codes.
    /// Every token of the image must be a patch token.
    pub fn from_codes(
        codes: &SparseCodeMatrix,
        grouping: TokenGrouping,
        image: usize,
        image_id: impl Into<String>,
        concept: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        grouping.check_rows(codes.n_rows())?;
        if grid.0 * grid.1 != grouping.tokens_per_image {
            return Err(Error::Shape(format!(
                "{}x{} grid for {} tokens per image",
                grid.0, grid.1, grouping.tokens_per_image
            )));
        }
        if image >= grouping.image_count || concept >= codes.n_concepts() {
            return Err(Error::Argument(format!("image {image} / concept {concept} out of range")));
        }
        let values = grouping
            .image_rows(image)
            .map(|r| {
                codes
                    .row_entries(r)
                    .find(|&(j, _)| j == concept)
                    .map_or(0.0, |(_, a)| a)
            })
            .collect();
        Self::new(image_id, grid.0, grid.1, values)
    }

    fn cell_size(&self, img: &RgbaImage) -> Result<(u32, u32)> {
        let (w, h) = img.dimensions();
        if w as usize % self.width != 0 || h as usize % self.height != 0 || w == 0 || h == 0 {
            return Err(Error::Shape(format!(
                "{w}x{h} bitmap does not split into a {}x{} grid",
                self.width, self.height
            )));
        }
        Ok((w / self.width as u32, h / self.height as u32))
    }

    fn at_pixel(&self, x: u32, y: u32, cell: (u32, u32)) -> f64 {
        let col = (x / cell.0) as usize;
        let row = (y / cell.1) as usize;
        self.values[row * self.width + col]
    }
}

/// Hides every patch whose activation is below the `q`-quantile of the
/// positive activations. Only the alpha channel changes.
pub fn alpha_mask(img: &RgbaImage, map: &SpatialActivationMap, q: f64) -> Result<RgbaImage> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Argument(format!("mask quantile must lie in (0, 1), got {q}")));
    }
    let cell = map.cell_size(img)?;
    let positive: Vec<f64> = map.values.iter().cloned().filter(|v| *v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Validation(format!(
            "activation map of `{}` is all zero",
            map.image_id
        )));
    }
    let threshold = quantile_sorted(&sorted(&positive), q);
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[3] = if map.at_pixel(x, y, cell) < threshold { 0 } else { 255 };
    }
    Ok(out)
}

/// Fraction of pixels left visible by a mask.
pub fn visible_fraction(img: &RgbaImage) -> f64 {
    let n = img.pixels().filter(|p| p.0[3] > 0).count();
    n as f64 / (img.width() as f64 * img.height() as f64)
}

/// Blends a red heat layer over the image, scaled by activation relative to
/// the map maximum. Meant for figures, not for VLM queries.
pub fn heatmap_overlay(img: &RgbaImage, map: &SpatialActivationMap, opacity: f64) -> Result<RgbaImage> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::Argument(format!("opacity {opacity} outside [0, 1]")));
    }
    let cell = map.cell_size(img)?;
    let peak = map.values.iter().cloned().fold(0.0, f64::max);
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let heat = if peak > 0.0 { map.at_pixel(x, y, cell) / peak } else { 0.0 };
        let a = opacity * heat;
        let color = [255.0, 64.0 * (1.0 - heat), 0.0];
        for c in 0..3 {
            p.0[c] = ((1.0 - a) * p.0[c] as f64 + a * color[c]).round() as u8;
        }
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|i| i.to_rgba8())
        .map_err(|e| Error::Image(e.to_string()))
}

pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<RgbaImage> {
    let path = path.as_ref();
    decode_png(&read_bytes(path)?).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn save_png(img: &RgbaImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_png(img)?)
}

/// Solid test pattern with distinct RGB per pixel.
pub fn gradient_image(width: u32, height: u32) -> RgbaImage {
    RgbaImage::from_fn(width, height, |x, y| Rgba([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8, 255]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, v: Vec<f64>) -> SpatialActivationMap {
        SpatialActivationMap::new("img", h, w, v).unwrap()
    }

    fn visible_cells(img: &RgbaImage, map: &SpatialActivationMap) -> Vec<bool> {
        let cell = map.cell_size(img).unwrap();
        (0..map.height)
            .flat_map(|r| (0..map.width).map(move |c| (r, c)))
            .map(|(r, c)| img.get_pixel(c as u32 * cell.0, r as u32 * cell.1).0[3] == 255)
            .collect()
    }

    #[test]
    fn one_hot_patch() {
        let img = gradient_image(8, 8);
        let map = grid(2, 2, vec![0.0, 3.0, 0.0, 0.0]);
        let m = alpha_mask(&img, &map, 0.5).unwrap();
        assert_eq!(visible_cells(&m, &map), vec![false, true, false, false]);
        assert_eq!(visible_fraction(&m), 0.25);
    }

    #[test]
    fn uniform_map_stays_visible() {
        let img = gradient_image(6, 9);
        let m = alpha_mask(&img, &grid(3, 2, vec![2.0; 6]), 0.9).unwrap();
        assert_eq!(visible_fraction(&m), 1.0);
    }

    #[test]
    fn median_of_four_patches() {
        let img = gradient_image(4, 4);
        let map = grid(2, 2, vec![4.0, 3.0, 2.0, 1.0]);
        let m = alpha_mask(&img, &map, 0.5).unwrap();
        assert_eq!(visible_cells(&m, &map), vec![true, true, false, false]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let img = gradient_image(4, 4);
        assert!(matches!(alpha_mask(&img, &grid(2, 2, vec![0.0; 4]), 0.5), Err(Error::Validation(_))));
        assert!(alpha_mask(&img, &grid(3, 1, vec![1.0; 3]), 0.5).is_err());
        assert!(alpha_mask(&img, &grid(2, 2, vec![1.0; 4]), 1.0).is_err());
        assert!(SpatialActivationMap::new("x", 2, 2, vec![1.0, -1.0, 0.0, 0.0]).is_err());
        assert!(SpatialActivationMap::new("x", 2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn map_from_codes() {
        let z = SparseCodeMatrix::from_rows(3, vec![vec![(1, 2.0)], vec![], vec![(0, 1.0), (1, 5.0)], vec![], vec![(1, 9.0)], vec![], vec![], vec![]]).unwrap();
        let g = TokenGrouping::new(4, 2).unwrap();
        let m = SpatialActivationMap::from_codes(&z, g, 0, "a", 1, (2, 2)).unwrap();
        assert_eq!(m.values, vec![2.0, 0.0, 5.0, 0.0]);
        let m = SpatialActivationMap::from_codes(&z, g, 1, "b", 1, (2, 2)).unwrap();
        assert_eq!(m.values, vec![9.0, 0.0, 0.0, 0.0]);
        assert!(SpatialActivationMap::from_codes(&z, g, 0, "a", 1, (1, 2)).is_err());
    }

    #[test]
    fn png_round_trip_and_overlay() {
        let img = gradient_image(10, 6);
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
        let map = grid(3, 5, (0..15).map(|i| i as f64).collect());
        let o = heatmap_overlay(&img, &map, 0.0).unwrap();
        assert_eq!(o, img);
        let o = heatmap_overlay(&img, &map, 1.0).unwrap();
        assert_eq!(o.get_pixel(9, 5).0, [255, 0, 0, 255]);
        assert!(decode_png(b"not a png").is_err());
    }

    proptest! {
        #[test]
        fn masking_only_touches_alpha(vals in prop::collection::vec(0.0f64..5.0, 6), q in 0.01f64..0.99) {
            prop_assume!(vals.iter().any(|v| *v > 0.0));
            let img = gradient_image(9, 4);
            let map = grid(2, 3, vals);
            let m = alpha_mask(&img, &map, q).unwrap();
            for (a, b) in img.pixels().zip(m.pixels()) {
                prop_assert_eq!(&a.0[..3], &b.0[..3]);
                prop_assert!(b.0[3] == 0 || b.0[3] == 255);
            }
        }

        #[test]
        fn visibility_shrinks_with_q(vals in prop::collection::vec(0.0f64..5.0, 8), q1 in 0.01f64..0.99, q2 in 0.01f64..0.99) {
            prop_assume!(vals.iter().any(|v| *v > 0.0));
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let img = gradient_image(8, 4);
            let map = grid(2, 4, vals);
            let a = visible_fraction(&alpha_mask(&img, &map, lo).unwrap());
            let b = visible_fraction(&alpha_mask(&img, &map, hi).unwrap());
            prop_assert!(b <= a);
            prop_assert!(b > 0.0);
        }
    }
}
