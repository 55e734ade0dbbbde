//! Sliding-window patch extraction.

use super::Tile;
use crate::error::{Error, Result};

/// Window origins along one axis; the last window is aligned to the far edge.
pub fn window_starts(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 || stride > size {
        return Err(Error::Invalid(format!("need 0 < stride ({stride}) <= size ({size})")));
    }
    if extent < size {
        return Err(Error::Invalid(format!("extent {extent} smaller than window {size}")));
    }
    let mut starts: Vec<usize> = (0..=extent - size).step_by(stride).collect();
    if *starts.last().expect("nonempty") != extent - size {
        starts.push(extent - size);
    }
    Ok(starts)
}

/// Row-major patches of `size x size` with the given stride.
pub fn tile_crop(tile: &Tile, size: usize, stride: usize) -> Result<Vec<Tile>> {
    let ys = window_starts(tile.height, size, stride)?;
    let xs = window_starts(tile.width, size, stride)?;
    let (h, w) = (tile.height, tile.width);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let mut image = Vec::with_capacity(3 * size * size);
            for c in 0..3 {
                for y in y0..y0 + size {
                    image.extend_from_slice(&tile.image[(c * h + y) * w + x0..][..size]);
                }
            }
            let mut label = Vec::with_capacity(size * size);
            for y in y0..y0 + size {
                label.extend_from_slice(&tile.label[y * w + x0..][..size]);
            }
            out.push(Tile {
                height: size,
                width: size,
                image,
                label,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coordinate_tile(h: usize, w: usize) -> Tile {
        // channel 0 encodes x, channel 1 encodes y
        let mut image = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                image[y * w + x] = x as u8;
                image[(h + y) * w + x] = y as u8;
            }
        }
        Tile::new(h, w, image, vec![0; h * w]).unwrap()
    }

    #[test]
    fn nine_patches_on_64() {
        assert_eq!(tile_crop(&coordinate_tile(64, 64), 32, 16).unwrap().len(), 9);
        assert_eq!(window_starts(64, 32, 16).unwrap(), vec![0, 16, 32]);
    }

    #[test]
    fn stride_equal_to_size_is_a_grid() {
        assert_eq!(window_starts(96, 32, 32).unwrap(), vec![0, 32, 64]);
    }

    #[test]
    fn edge_aligned_windows_match_coordinates() {
        let starts = window_starts(100, 32, 16).unwrap();
        let mut want: Vec<usize> = (0..).map(|i| i * 16).take_while(|&s| s + 32 <= 100).collect();
        want.push(68);
        assert_eq!(starts, want);
        let patches = tile_crop(&coordinate_tile(100, 100), 32, 16).unwrap();
        assert_eq!(patches.len(), want.len() * want.len());
        for (pi, p) in patches.iter().enumerate() {
            let (y0, x0) = (want[pi / want.len()], want[pi % want.len()]);
            assert_eq!(p.image[0] as usize, x0);
            assert_eq!(p.image[32 * 32] as usize, y0);
            assert_eq!(p.image[31] as usize, x0 + 31);
        }
    }

    #[test]
    fn small_images_rejected() {
        assert!(tile_crop(&coordinate_tile(20, 40), 32, 16).is_err());
        assert!(window_starts(64, 32, 40).is_err());
    }
}
