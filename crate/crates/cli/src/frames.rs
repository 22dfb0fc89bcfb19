//! PNG import/export for observations and generated video plans.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use vilp_core::dataset::ViewSpec;
use vilp_nn::Array;

pub fn save_frame_png(frame: &Array<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = (frame.dim(0), frame.dim(1), frame.dim(2));
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ci: usize| {
                (frame.data()[(y * w + x) * c + ci.min(c - 1)].clamp(0.0, 1.0) * 255.0).round()
                    as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_frame_png(path: &Path, spec: &ViewSpec) -> Result<Array<f32>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    anyhow::ensure!(
        img.width() as usize == spec.width && img.height() as usize == spec.height,
        "{}: {}x{} does not match view {} ({}x{})",
        path.display(),
        img.width(),
        img.height(),
        spec.view_id,
        spec.width,
        spec.height
    );
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut data = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            if c == 3 {
                for ci in 0..3 {
                    data[(y * w + x) * 3 + ci] = px[ci] as f32 / 255.0;
                }
            } else {
                let lum =
                    0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32;
                data[y * w + x] = lum / 255.0;
            }
        }
    }
    Ok(Array::from_vec(&[h, w, c], data))
}

/// Write a plan's per-view videos as lossless image sequences plus an
/// index JSON.
pub fn save_plan(
    plan_frames: &BTreeMap<String, Array<f32>>,
    out_dir: &Path,
    index_extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut index = serde_json::Map::new();
    for (view, frames) in plan_frames {
        let n = frames.dim(0);
        let per = frames.dim(1) * frames.dim(2) * frames.dim(3);
        let mut files = Vec::with_capacity(n);
        for i in 0..n {
            let frame = Array::from_vec(
                &[frames.dim(1), frames.dim(2), frames.dim(3)],
                frames.data()[i * per..(i + 1) * per].to_vec(),
            );
            let name = format!("{view}_{i:03}.png");
            save_frame_png(&frame, &out_dir.join(&name))?;
            files.push(serde_json::Value::String(name));
        }
        index.insert(view.clone(), serde_json::Value::Array(files));
    }
    index.insert("meta".into(), index_extra);
    std::fs::write(
        out_dir.join("index.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(index))?,
    )?;
    Ok(())
}
