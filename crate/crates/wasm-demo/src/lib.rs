//! Browser bindings over the `sdae` library. Every export returns a JSON
//! string (or an error message) so the page needs no generated types.

use std::collections::HashMap;

use serde_json::json;
use wasm_bindgen::prelude::*;

use sdae::data::{generate_synthetic, SyntheticParams, SHAPE_NAMES};
use sdae::masking::{complexity_estimate, complexity_report, plan_for, report_csv, validate, CostMode, CostParams, CropReading, FeedingMode};
use sdae::tensor::io::decode;
use sdae::vit::{attention_map, patchify, ModelConfig, ModelState};

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Samples one plan. `mode` is full_image, only_masked, teacher_crop or
/// multi_fold.
#[wasm_bindgen]
pub fn mask_plan(n: usize, r: f64, mode: &str, folds: usize, crop_ratio: f64, seed: u64) -> Result<String, String> {
    let mode = FeedingMode::parse(mode, folds, crop_ratio).map_err(msg)?;
    let plan = plan_for(n, r, mode, seed).map_err(msg)?;
    let side = (n as f64).sqrt().round() as usize;
    let violations: Vec<String> = validate(&plan).iter().map(|v| format!("{v:?}")).collect();
    Ok(json!({
        "n": n,
        "grid_side": if side * side == n { Some(side) } else { None },
        "visible": plan.visible,
        "masked": plan.masked,
        "folds": plan.folds,
        "targets": plan.targets(),
        "teacher_groups": plan.teacher_groups(),
        "violations": violations,
    })
    .to_string())
}

/// Teacher cost of each mode relative to the full image, for fold counts
/// `1..=t_max`.
#[wasm_bindgen]
pub fn cost_curve(n: f64, d: f64, r: f64, crop_ratio: f64, t_max: usize) -> Result<String, String> {
    let at = |mode, t: f64, reading| {
        let p = CostParams { n, d, r, r_c: crop_ratio, t, reading };
        complexity_estimate(mode, &p)
    };
    let full = at(CostMode::FullImage, 1.0, CropReading::Retained).map_err(msg)?;
    let ts: Vec<usize> = (1..=t_max.max(1)).collect();
    let multi = ts
        .iter()
        .map(|&t| at(CostMode::MultiFold, t as f64, CropReading::Retained).map(|c| c / full))
        .collect::<Result<Vec<_>, _>>()
        .map_err(msg)?;
    let flat = |mode, reading| at(mode, 1.0, reading).map(|c| c / full).map_err(msg);
    Ok(json!({
        "t": ts,
        "multi_fold": multi,
        "only_masked": flat(CostMode::OnlyMasked, CropReading::Retained)?,
        "teacher_crop": flat(CostMode::TeacherCrop, CropReading::Retained)?,
        "teacher_crop_literal": flat(CostMode::TeacherCrop, CropReading::Literal)?,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn complexity_csv(n: f64, d: f64, r: f64, crop_ratio: f64, t: f64) -> Result<String, String> {
    complexity_report(n, d, r, crop_ratio, t).map(|rows| report_csv(&rows)).map_err(msg)
}

/// Class-token attention of the toy model on one synthetic image. Uses a
/// random initialization unless checkpoint bytes are given.
#[wasm_bindgen]
pub fn attention(image_seed: u64, index: usize, model_seed: u64, block: Option<usize>, checkpoint: Option<Vec<u8>>) -> Result<String, String> {
    let cfg = ModelConfig::toy();
    let mut model = ModelState::<f32>::new(cfg.clone(), model_seed).map_err(msg)?;
    if let Some(bytes) = checkpoint {
        let entries: HashMap<_, _> = decode(&bytes).map_err(msg)?.into_iter().collect();
        model.params.assign_from(&entries, "").map_err(msg)?;
    }
    let params = SyntheticParams { n_items: index + 1, seed: image_seed, image_size: cfg.image_size, ..Default::default() };
    let data = generate_synthetic(&params).map_err(msg)?;
    let patches = patchify(&data.standardized(index), cfg.image_size, cfg.channels, cfg.patch_size).map_err(msg)?;
    let map = attention_map(&model, &patches, block).map_err(msg)?;
    let label = data.labels.as_ref().map(|l| SHAPE_NAMES[l[index] as usize]);
    Ok(json!({
        "image_size": cfg.image_size,
        "grid_side": map.grid_side,
        "block": map.block,
        "label": label,
        "rgb": data.images[index].pixels,
        "mean": map.mean,
        "heads": map.heads,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn plan_json_is_deterministic_and_complete() {
        let a = mask_plan(64, 0.75, "multi_fold", 3, 0.5, 7).unwrap();
        assert_eq!(a, mask_plan(64, 0.75, "multi_fold", 3, 0.5, 7).unwrap());
        let v: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["visible"].as_array().unwrap().len(), 16);
        assert_eq!(v["folds"].as_array().unwrap().len(), 3);
        assert_eq!(v["grid_side"], 8);
        assert!(v["violations"].as_array().unwrap().is_empty());
    }

    #[test]
    fn bad_mode_is_an_error() {
        assert!(mask_plan(64, 0.75, "sideways", 3, 0.5, 0).is_err());
        assert!(mask_plan(64, 1.5, "multi_fold", 3, 0.5, 0).is_err());
    }

    #[test]
    fn curve_divides_by_folds() {
        let v: Value = serde_json::from_str(&cost_curve(196.0, 768.0, 0.75, 0.5, 6).unwrap()).unwrap();
        let om = v["only_masked"].as_f64().unwrap();
        for (i, c) in v["multi_fold"].as_array().unwrap().iter().enumerate() {
            let want = om / (i + 1) as f64;
            assert!((c.as_f64().unwrap() - want).abs() < 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn csv_has_header() {
        assert!(complexity_csv(196.0, 768.0, 0.75, 0.5, 3.0).unwrap().starts_with("mode,n,d,r,r_c,t,cost,ratio_vs_full"));
    }

    #[test]
    fn attention_is_a_distribution() {
        let v: Value = serde_json::from_str(&attention(1, 3, 0, None, None).unwrap()).unwrap();
        let mean: Vec<f64> = v["mean"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(mean.len(), 64);
        assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        assert_eq!(v["rgb"].as_array().unwrap().len(), 32 * 32 * 3);
    }

    #[test]
    fn garbage_checkpoint_is_rejected() {
        assert!(attention(1, 0, 0, None, Some(vec![1, 2, 3])).is_err());
    }
}
