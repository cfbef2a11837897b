//! Qualitative panels: one row per scene, one column per view.

use std::path::Path;

use ndarray::{s, Array3};
use synth_core::compose::CompositeScene;
use synth_core::dataset::{write_rgb_png, ClassMap};

use crate::error::{PipelineError, Result};

fn invalid(message: String) -> PipelineError {
    synth_core::Error::Validation(message).into()
}

/// Tiles the rows `[real?, colorized mask, composite, refined?]`. Optional
/// columns appear when their images are given, one per scene.
pub fn figure_grid(
    scenes: &[CompositeScene],
    refined: Option<&[Array3<u8>]>,
    real_refs: Option<&[Array3<u8>]>,
    class_map: &ClassMap,
) -> Result<Array3<u8>> {
    if scenes.is_empty() {
        return Err(invalid("figure grid needs at least one scene".into()));
    }
    let (h, w, _) = scenes[0].image.dim();
    for (name, extra) in [("refined", refined), ("real", real_refs)] {
        if let Some(x) = extra {
            if x.len() != scenes.len() {
                return Err(invalid(format!(
                    "{} {name} images for {} scenes",
                    x.len(),
                    scenes.len()
                )));
            }
        }
    }
    let mut rows: Vec<Vec<Array3<u8>>> = Vec::with_capacity(scenes.len());
    for (i, sc) in scenes.iter().enumerate() {
        if sc.label_map.dim() != (h, w) {
            return Err(invalid(format!(
                "scene {i} has a {:?} label map, expected {h}×{w}",
                sc.label_map.dim()
            )));
        }
        let mask = Array3::from_shape_fn((h, w, 3), |(y, x, k)| {
            class_map.color(sc.label_map[[y, x]])[k]
        });
        let mut row = Vec::with_capacity(4);
        if let Some(r) = real_refs {
            row.push(r[i].clone());
        }
        row.push(mask);
        row.push(sc.image.clone());
        if let Some(r) = refined {
            row.push(r[i].clone());
        }
        for t in &row {
            if t.dim() != (h, w, 3) {
                return Err(invalid(format!(
                    "scene {i} has a tile of {:?}, expected {h}×{w}×3",
                    t.dim()
                )));
            }
        }
        rows.push(row);
    }
    let cols = rows[0].len();
    let mut grid = Array3::zeros((h * rows.len(), w * cols, 3));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            grid.slice_mut(s![r * h..(r + 1) * h, c * w..(c + 1) * w, ..])
                .assign(tile);
        }
    }
    Ok(grid)
}

/// Writes [`figure_grid`] as a PNG and returns its `(height, width)`.
pub fn emit_figure_grid(
    scenes: &[CompositeScene],
    refined: Option<&[Array3<u8>]>,
    real_refs: Option<&[Array3<u8>]>,
    class_map: &ClassMap,
    out_path: &Path,
) -> Result<(usize, usize)> {
    let grid = figure_grid(scenes, refined, real_refs, class_map)?;
    if let Some(p) = out_path.parent() {
        std::fs::create_dir_all(p).map_err(|e| PipelineError::io(p, e))?;
    }
    write_rgb_png(out_path, &grid)?;
    Ok((grid.dim().0, grid.dim().1))
}
