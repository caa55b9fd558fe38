use crate::error::{Error, Result};
use crate::image::Image;

/// Top-left tile offsets along one axis. Tiles start every `stride` pixels and
/// the last one is anchored to the far edge, so the axis is always covered.
pub fn tile_offsets(len: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || tile > len {
        return Err(Error::shape(format!("tile size in [1, {len}]"), tile));
    }
    if stride == 0 || stride > tile {
        return Err(Error::shape(format!("stride in [1, {tile}]"), stride));
    }
    let mut out: Vec<usize> = (0..=len - tile).step_by(stride).collect();
    if *out.last().expect("nonempty") != len - tile {
        out.push(len - tile);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub y: usize,
    pub x: usize,
    pub image: Image,
}

/// Square tiles covering `frame`, row-major.
pub fn tile_frame(frame: &Image, tile: usize, stride: usize) -> Result<Vec<Tile>> {
    let ys = tile_offsets(frame.height(), tile, stride)?;
    let xs = tile_offsets(frame.width(), tile, stride)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(Tile {
                y,
                x,
                image: frame.crop(y, x, tile, tile)?,
            });
        }
    }
    Ok(out)
}

/// Linear feathering weight at position `i` of a tile of length `n`: ramps
/// from `1/(ramp+1)` at the border to 1 at `ramp` pixels inside.
fn feather(i: usize, n: usize, ramp: usize) -> f64 {
    let d = i.min(n - 1 - i) + 1;
    (d as f64 / (ramp + 1) as f64).min(1.0)
}

/// Weighted average of overlapping tiles. Every weight is positive, so a pixel
/// covered by tiles that all carry the same value gets exactly that value.
pub fn stitch(tiles: &[Tile], height: usize, width: usize, overlap: usize) -> Result<Image> {
    let mut acc = vec![0.0f64; height * width];
    let mut wsum = vec![0.0f64; height * width];
    for t in tiles {
        let (th, tw) = t.image.shape();
        if t.y + th > height || t.x + tw > width {
            return Err(Error::shape(
                format!("tile inside {height}x{width}"),
                format!("{th}x{tw} at ({}, {})", t.y, t.x),
            ));
        }
        for i in 0..th {
            let wy = feather(i, th, overlap);
            for j in 0..tw {
                let w = wy * feather(j, tw, overlap);
                let k = (t.y + i) * width + t.x + j;
                acc[k] += w * t.image.get(i, j) as f64;
                wsum[k] += w;
            }
        }
    }
    if let Some(k) = wsum.iter().position(|&w| w == 0.0) {
        return Err(Error::shape(
            "full tile coverage",
            format!("pixel ({}, {}) uncovered", k / width, k % width),
        ));
    }
    let data = acc
        .iter()
        .zip(&wsum)
        .map(|(&a, &w)| (a / w) as f32)
        .collect();
    Image::new(height, width, data)
}

/// Number of tiles covering each pixel.
pub fn coverage(height: usize, width: usize, tile: usize, stride: usize) -> Result<Vec<u32>> {
    let mut c = vec![0u32; height * width];
    for y in tile_offsets(height, tile, stride)? {
        for x in tile_offsets(width, tile, stride)? {
            for i in y..y + tile {
                for j in x..x + tile {
                    c[i * width + j] += 1;
                }
            }
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_anchor_last_tile() {
        assert_eq!(tile_offsets(64, 32, 16).unwrap(), vec![0, 16, 32]);
        assert_eq!(tile_offsets(70, 32, 16).unwrap(), vec![0, 16, 32, 38]);
        assert_eq!(tile_offsets(32, 32, 7).unwrap(), vec![0]);
        assert!(tile_offsets(16, 32, 8).is_err());
        assert!(tile_offsets(64, 32, 0).is_err());
        assert!(tile_offsets(64, 32, 33).is_err());
    }

    #[test]
    fn identity_roundtrip_is_exact() {
        let f = Image::from_fn(45, 70, |y, x| ((y * 31 + x * 17) % 23) as f32 * 0.37 - 1.1);
        for (tile, stride) in [(16, 16), (16, 5), (32, 24), (45, 1)] {
            let tiles = tile_frame(&f, tile, stride).unwrap();
            let s = stitch(&tiles, 45, 70, tile - stride).unwrap();
            assert_eq!(s, f, "tile {tile} stride {stride}");
        }
    }

    #[test]
    fn every_pixel_covered() {
        let c = coverage(70, 53, 16, 12).unwrap();
        assert!(c.iter().all(|&n| n >= 1));
    }
}
