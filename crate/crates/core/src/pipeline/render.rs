//! PNG slice grids: MRI / CT / sCT views, label maps and suture heatmap
//! overlays, each in axial, coronal and sagittal mid-planes.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::volume::{LabelMap, Volume};

/// Pixels per voxel in rendered slices.
const ZOOM: usize = 4;
const GAP: usize = 4;

const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [255, 255, 255],
];

#[derive(Clone, Copy)]
enum View {
    Axial,
    Coronal,
    Sagittal,
}

const VIEWS: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

/// Mid-plane of a `[z, y, x]` array as (width, height, values); rows run
/// top to bottom with superior up in the coronal and sagittal views.
fn plane<T: Copy>(data: &[T], shape: [usize; 3], view: View) -> (usize, usize, Vec<T>) {
    let [d, h, w] = shape;
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    match view {
        View::Axial => {
            let z = d / 2;
            (w, h, (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(z, y, x)).collect())
        }
        View::Coronal => {
            let y = h / 2;
            (w, d, (0..d).rev().flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| at(z, y, x)).collect())
        }
        View::Sagittal => {
            let x = w / 2;
            (h, d, (0..d).rev().flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| at(z, y, x)).collect())
        }
    }
}

fn gray(v: f32) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// A grid of tiles; each tile is a (width, height, pixel) plane.
type Tile = (usize, usize, Vec<[u8; 3]>);

fn compose(rows: &[Vec<Tile>]) -> RgbImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let col_w: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|t| t.0).max().unwrap_or(0)).collect();
    let row_h: Vec<usize> = rows.iter().map(|r| r.iter().map(|t| t.1).max().unwrap_or(0)).collect();
    let width = GAP + col_w.iter().map(|w| w * ZOOM + GAP).sum::<usize>();
    let height = GAP + row_h.iter().map(|h| h * ZOOM + GAP).sum::<usize>();
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([32, 32, 32]));
    let mut oy = GAP;
    for (r, row) in rows.iter().enumerate() {
        let mut ox = GAP;
        for (c, (tw, th, px)) in row.iter().enumerate() {
            for ty in 0..th * ZOOM {
                for tx in 0..tw * ZOOM {
                    let p = px[(ty / ZOOM) * tw + tx / ZOOM];
                    img.put_pixel((ox + tx) as u32, (oy + ty) as u32, Rgb(p));
                }
            }
            ox += col_w[c] * ZOOM + GAP;
        }
        oy += row_h[r] * ZOOM + GAP;
    }
    img
}

fn intensity_row(v: &Volume) -> Vec<Tile> {
    VIEWS
        .iter()
        .map(|&view| {
            let (w, h, vals) = plane(v.data(), v.shape(), view);
            (w, h, vals.into_iter().map(gray).collect())
        })
        .collect()
}

fn label_row(l: &LabelMap) -> Vec<Tile> {
    VIEWS
        .iter()
        .map(|&view| {
            let (w, h, vals) = plane(l.data(), l.shape(), view);
            (w, h, vals.into_iter().map(|c| PALETTE[c as usize % PALETTE.len()]).collect())
        })
        .collect()
}

fn heat_row(base: &Volume, heat: &Volume) -> Vec<Tile> {
    VIEWS
        .iter()
        .map(|&view| {
            let (w, h, b) = plane(base.data(), base.shape(), view);
            let (_, _, q) = plane(heat.data(), heat.shape(), view);
            let px = b
                .into_iter()
                .zip(q)
                .map(|(v, p)| {
                    let g = gray(v);
                    let a = p.clamp(0.0, 1.0);
                    let mix = |c: u8, t: f32| (c as f32 * (1.0 - a) + t * a).round() as u8;
                    [mix(g[0], 255.0), mix(g[1], 40.0), mix(g[2], 0.0)]
                })
                .collect();
            (w, h, px)
        })
        .collect()
}

fn save(img: RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// Rows MRI, CT, sCT; columns axial, coronal, sagittal.
pub fn render_slices(mri: &Volume, ct: &Volume, sct: &Volume, path: &Path) -> Result<()> {
    save(compose(&[intensity_row(mri), intensity_row(ct), intensity_row(sct)]), path)
}

/// One row per label map (ground truth first).
pub fn render_labels(maps: &[&LabelMap], path: &Path) -> Result<()> {
    let rows: Vec<Vec<Tile>> = maps.iter().map(|m| label_row(m)).collect();
    save(compose(&rows), path)
}

/// Suture probability in red over each base image, one row per pair.
pub fn render_heatmaps(pairs: &[(&Volume, &Volume)], path: &Path) -> Result<()> {
    let rows: Vec<Vec<Tile>> = pairs.iter().map(|(b, h)| heat_row(b, h)).collect();
    save(compose(&rows), path)
}
