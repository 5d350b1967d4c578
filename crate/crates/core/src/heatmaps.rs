//! Per-patch attention extraction, grid heatmap rendering and the
//! top-expresser selection for side-by-side review.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgba, RgbaImage};

use crate::attmil::{forward_features, ModelParams};
use crate::data_model::{Cohort, FeatureBag};
use crate::error::{Error, Result};
use crate::training::bag_score;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub model_id: String,
    pub patient_id: String,
    /// Grid cell positions, one per retained patch.
    pub positions: Vec<(i32, i32)>,
    /// Nonnegative, sums to one, aligned with `positions`.
    pub attention: Vec<f64>,
}

impl AttentionMap {
    /// Smallest covering grid: (origin, width, height).
    pub fn grid(&self) -> ((i32, i32), u32, u32) {
        let min_x = self.positions.iter().map(|p| p.0).min().unwrap_or(0);
        let min_y = self.positions.iter().map(|p| p.1).min().unwrap_or(0);
        let max_x = self.positions.iter().map(|p| p.0).max().unwrap_or(-1);
        let max_y = self.positions.iter().map(|p| p.1).max().unwrap_or(-1);
        (
            (min_x, min_y),
            (max_x - min_x + 1).max(0) as u32,
            (max_y - min_y + 1).max(0) as u32,
        )
    }
}

/// Eval-mode attention of `model` over the bag's patches.
pub fn extract_attention(bag: &FeatureBag, model: &ModelParams, model_id: &str) -> Result<AttentionMap> {
    let coords = bag.tile_coords().ok_or_else(|| {
        Error::Invalid(format!("bag {} has no tile coordinates", bag.patient_id))
    })?;
    let h = bag.features_f64();
    let trace = forward_features(h.view(), model, None)?;
    Ok(AttentionMap {
        model_id: model_id.to_string(),
        patient_id: bag.patient_id.clone(),
        positions: coords.to_vec(),
        attention: trace.pools[0].attention.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    /// Sequential single-hue red ramp (ColorBrewer "Reds").
    Reds,
    Greys,
}

const REDS: [[u8; 3]; 9] = [
    [255, 245, 240],
    [254, 224, 210],
    [252, 187, 161],
    [252, 146, 114],
    [251, 106, 74],
    [239, 59, 44],
    [203, 24, 29],
    [165, 15, 21],
    [103, 0, 13],
];

impl Colormap {
    pub fn as_str(self) -> &'static str {
        match self {
            Colormap::Reds => "reds",
            Colormap::Greys => "greys",
        }
    }

    /// Colour for `t` in [0, 1]; the endpoints are the first and last stops.
    pub fn color(self, t: f64) -> [u8; 3] {
        let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
        match self {
            Colormap::Greys => {
                let v = (255.0 * (1.0 - t)).round() as u8;
                [v, v, v]
            }
            Colormap::Reds => {
                let pos = t * (REDS.len() - 1) as f64;
                let i = (pos.floor() as usize).min(REDS.len() - 2);
                let f = pos - i as f64;
                std::array::from_fn(|c| {
                    let (a, b) = (f64::from(REDS[i][c]), f64::from(REDS[i + 1][c]));
                    (a + f * (b - a)).round() as u8
                })
            }
        }
    }
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Colormap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reds" => Ok(Colormap::Reds),
            "greys" | "grays" => Ok(Colormap::Greys),
            _ => Err(Error::Invalid(format!("unknown colormap {s}"))),
        }
    }
}

/// Min-max normalized attention; a constant map becomes all 0.5.
pub fn normalize_attention(attention: &[f64]) -> Vec<f64> {
    let lo = attention.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        attention.iter().map(|a| (a - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; attention.len()]
    }
}

/// Draws one `cell_px` square per patch (empty cells transparent) and writes
/// the values next to the image as `<stem>.csv`. Returns the CSV path.
pub fn render_heatmap(map: &AttentionMap, out: &Path, colormap: Colormap, cell_px: u32) -> Result<PathBuf> {
    if map.attention.is_empty() || map.attention.len() != map.positions.len() {
        return Err(Error::Invalid(format!(
            "attention map for {} has {} values for {} patches",
            map.patient_id,
            map.attention.len(),
            map.positions.len()
        )));
    }
    if cell_px == 0 {
        return Err(Error::Invalid("cell_px must be positive".into()));
    }
    let norm = normalize_attention(&map.attention);
    if norm.iter().all(|&v| v == 0.5) && map.attention.len() > 1 {
        log::warn!("attention for {} is constant; rendering mid-colour", map.patient_id);
    }
    let ((ox, oy), gw, gh) = map.grid();
    let mut img = RgbaImage::new(gw * cell_px, gh * cell_px);
    for (&(x, y), &t) in map.positions.iter().zip(&norm) {
        let [r, g, b] = colormap.color(t);
        let (cx, cy) = ((x - ox) as u32 * cell_px, (y - oy) as u32 * cell_px);
        for py in cy..cy + cell_px {
            for px in cx..cx + cell_px {
                img.put_pixel(px, py, Rgba([r, g, b, 255]));
            }
        }
    }
    img.save(out)?;

    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["x", "y", "attention_raw", "attention_norm"])?;
    for ((x, y), (a, n)) in map.positions.iter().zip(map.attention.iter().zip(&norm)) {
        w.write_record([x.to_string(), y.to_string(), a.to_string(), n.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

/// Patients ordered by target (descending, ties by id), first `n`.
pub fn select_top_expressers(targets: &BTreeMap<String, f64>, n: usize) -> Result<Vec<String>> {
    if n > targets.len() {
        return Err(Error::Invalid(format!(
            "asked for {n} top expressers from {} patients",
            targets.len()
        )));
    }
    let mut ids: Vec<(&String, f64)> = targets.iter().map(|(k, v)| (k, *v)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(ids.into_iter().take(n).map(|(k, _)| k.clone()).collect())
}

/// Per patient: classification and regression heatmaps plus a metadata CSV
/// under `dir/<patient_id>/`.
pub fn write_review_bundle(
    dir: &Path,
    cohort: &Cohort,
    classifier: &ModelParams,
    regressor: &ModelParams,
    patients: &[String],
    colormap: Colormap,
    cell_px: u32,
) -> Result<()> {
    for id in patients {
        let bag = cohort
            .bag(id)
            .ok_or_else(|| Error::Invalid(format!("patient {id} has no feature bag")))?;
        let pdir = dir.join(id);
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let clf = extract_attention(bag, classifier, "classification")?;
        let reg = extract_attention(bag, regressor, "regression")?;
        render_heatmap(&clf, &pdir.join("classification.png"), colormap, cell_px)?;
        render_heatmap(&reg, &pdir.join("regression.png"), colormap, cell_px)?;

        let h = bag.features_f64();
        let meta = pdir.join("metadata.csv");
        let mut w = csv::Writer::from_path(&meta)?;
        w.write_record(["key", "value"])?;
        w.write_record(["patient_id", id])?;
        w.write_record(["site_id", &bag.site_id])?;
        if let Some(r) = cohort.record(id) {
            w.write_record(["target", &r.target_value.to_string()])?;
        }
        w.write_record(["n_patches", &clf.positions.len().to_string()])?;
        w.write_record(["classification_score", &bag_score(classifier, h.view())?.to_string()])?;
        w.write_record(["regression_score", &bag_score(regressor, h.view())?.to_string()])?;
        w.flush().map_err(|e| Error::io(&meta, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attmil::{HeadKind, ModelConfig};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(head: HeadKind, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            h_att: 8,
            h_mlp: 8,
            ..ModelConfig::new(3, head)
        };
        ModelParams::init(cfg, &mut rng).unwrap()
    }

    fn bag(rows: &[[f32; 3]], coords: Option<Vec<(i32, i32)>>) -> FeatureBag {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        FeatureBag::new("P1", "S1", Array2::from_shape_vec((rows.len(), 3), flat).unwrap(), coords)
            .unwrap()
    }

    #[test]
    fn trivial_maps() {
        let m = model(HeadKind::Regression, 1);
        let one = extract_attention(&bag(&[[0.3, -1.0, 2.0]], Some(vec![(4, 5)])), &m, "r").unwrap();
        assert_eq!(one.attention, vec![1.0]);

        let same = bag(&[[0.5, 0.5, 0.5]; 4], Some(vec![(0, 0), (1, 0), (0, 1), (1, 1)]));
        let u = extract_attention(&same, &m, "r").unwrap();
        assert!(u.attention.iter().all(|&a| (a - 0.25).abs() < 1e-12));

        assert!(extract_attention(&bag(&[[1.0, 2.0, 3.0]], None), &m, "r").is_err());
    }

    #[test]
    fn both_heads_share_support() {
        let rows = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.0], [2.0, 0.5, -0.5]];
        let coords = Some(vec![(0, 0), (3, 1), (2, 2)]);
        let b = bag(&rows, coords);
        let c = extract_attention(&b, &model(HeadKind::Classification, 2), "c").unwrap();
        let r = extract_attention(&b, &model(HeadKind::Regression, 3), "r").unwrap();
        assert_eq!(c.positions, r.positions);
        for m in [&c, &r] {
            assert!((m.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(m.attention.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn render_dimensions_csv_and_endpoints() {
        let map = AttentionMap {
            model_id: "m".into(),
            patient_id: "P1".into(),
            positions: vec![(0, 0), (1, 0), (0, 1), (1, 1)],
            attention: vec![0.1, 0.2, 0.3, 0.4],
        };
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("map.png");
        let csv_path = render_heatmap(&map, &png, Colormap::Reds, 10).unwrap();
        let img = image::open(&png).unwrap().to_rgba8();
        assert_eq!(img.dimensions(), (20, 20));
        assert_eq!(img.get_pixel(0, 0).0[..3], REDS[0]);
        assert_eq!(img.get_pixel(15, 15).0[..3], REDS[8]);

        let mut r = csv::Reader::from_path(&csv_path).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        for (row, a) in rows.iter().zip(&map.attention) {
            let raw: f64 = row[2].parse().unwrap();
            assert_eq!(raw.to_bits(), a.to_bits());
        }
        assert_eq!(&rows[0][3], "0");
        assert_eq!(&rows[3][3], "1");
    }

    #[test]
    fn constant_map_renders_mid_colour_and_sparse_cells_stay_clear() {
        let map = AttentionMap {
            model_id: "m".into(),
            patient_id: "P1".into(),
            positions: vec![(2, 3), (4, 3)],
            attention: vec![0.5, 0.5],
        };
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("flat.png");
        render_heatmap(&map, &png, Colormap::Greys, 4).unwrap();
        let img = image::open(&png).unwrap().to_rgba8();
        assert_eq!(img.dimensions(), (12, 4));
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128, 255]);
        assert_eq!(img.get_pixel(5, 0).0[3], 0);
    }

    #[test]
    fn top_expressers_order() {
        let mut t: BTreeMap<String, f64> = (0..100).map(|i| (format!("P{i:03}"), i as f64)).collect();
        let top = select_top_expressers(&t, 42).unwrap();
        assert_eq!(top.len(), 42);
        assert_eq!(top[0], "P099");
        assert!(top.windows(2).all(|w| t[&w[0]] >= t[&w[1]]));

        let all = select_top_expressers(&t, 100).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, t.keys().cloned().collect::<Vec<_>>());

        t.insert("P050".into(), 500.0);
        t.insert("P010".into(), 500.0);
        assert_eq!(select_top_expressers(&t, 2).unwrap(), ["P010", "P050"]);
        assert!(select_top_expressers(&t, 101).is_err());
    }
}
