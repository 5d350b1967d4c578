use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix3, Matrix3x2, SymmetricEigen, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::numeric::percentile_nearest_rank;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.15;
/// Minimum share of pixels whose optical density clears `beta`.
pub const MIN_TISSUE_FRACTION: f64 = 0.10;
const I0: f64 = 256.0;

const REFERENCE_CSV: &str = include_str!("../../assets/reference_stain_profile.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    /// Unit optical-density directions, hematoxylin in column 0.
    pub stain_matrix: Matrix3x2<f64>,
    /// 99th-percentile concentration per stain.
    pub max_concentrations: Vector2<f64>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ProfileRow {
    h_r: f64,
    h_g: f64,
    h_b: f64,
    e_r: f64,
    e_g: f64,
    e_b: f64,
    max_c_h: f64,
    max_c_e: f64,
}

impl StainProfile {
    pub fn new(stain_matrix: Matrix3x2<f64>, max_concentrations: Vector2<f64>) -> Result<Self> {
        if stain_matrix.iter().chain(max_concentrations.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stain profile".into()));
        }
        for c in stain_matrix.column_iter() {
            if (c.norm() - 1.0).abs() > 1e-3 {
                return Err(Error::Invalid(format!("stain vector norm {} is not 1", c.norm())));
            }
        }
        if max_concentrations.iter().any(|&c| c <= 0.0) {
            return Err(Error::Invalid("max concentrations must be positive".into()));
        }
        let mut m = stain_matrix;
        for mut c in m.column_iter_mut() {
            c.normalize_mut();
        }
        Ok(Self {
            stain_matrix: m,
            max_concentrations,
        })
    }

    /// The checked-in target profile.
    pub fn reference() -> Self {
        Self::from_csv_str(REFERENCE_CSV).expect("bundled reference profile parses")
    }

    fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let row: ProfileRow = r
            .deserialize()
            .next()
            .ok_or_else(|| Error::Csv("stain profile has no row".into()))??;
        Self::new(
            Matrix3x2::new(row.h_r, row.e_r, row.h_g, row.e_g, row.h_b, row.e_b),
            Vector2::new(row.max_c_h, row.max_c_e),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let m = &self.stain_matrix;
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(ProfileRow {
            h_r: m[(0, 0)],
            h_g: m[(1, 0)],
            h_b: m[(2, 0)],
            e_r: m[(0, 1)],
            e_g: m[(1, 1)],
            e_b: m[(2, 1)],
            max_c_h: self.max_concentrations[0],
            max_c_e: self.max_concentrations[1],
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn optical_density(px: [u8; 3]) -> Vector3<f64> {
    Vector3::from_fn(|i, _| -((f64::from(px[i]) + 1.0) / I0).log10())
}

/// Nonnegative least squares for two stains, solved by enumerating the
/// active sets.
pub fn nnls2(m: &Matrix3x2<f64>, od: &Vector3<f64>) -> Vector2<f64> {
    let gram = m.transpose() * m;
    let rhs = m.transpose() * od;
    if let Some(inv) = gram.try_inverse() {
        let c = inv * rhs;
        if c[0] >= 0.0 && c[1] >= 0.0 {
            return c;
        }
    }
    let single = |j: usize| (rhs[j] / gram[(j, j)]).max(0.0);
    let (c0, c1) = (single(0), single(1));
    let r0 = (od - m.column(0) * c0).norm_squared();
    let r1 = (od - m.column(1) * c1).norm_squared();
    if r0 <= r1 {
        Vector2::new(c0, 0.0)
    } else {
        Vector2::new(0.0, c1)
    }
}

/// Macenko stain estimation: principal plane of the tissue optical
/// densities, robust extreme angles at the `alpha` / `100 - alpha`
/// percentiles, and 99th-percentile concentrations.
pub fn estimate_stains(img: &RgbImage, alpha: f64, beta: f64) -> Result<StainProfile> {
    let od: Vec<Vector3<f64>> = img.pixels().map(|p| optical_density(p.0)).collect();
    let tissue: Vec<&Vector3<f64>> = od.iter().filter(|v| v.iter().any(|&c| c >= beta)).collect();
    if od.is_empty() || (tissue.len() as f64) < MIN_TISSUE_FRACTION * od.len() as f64 || tissue.len() < 3 {
        return Err(Error::InsufficientTissue(format!(
            "{} of {} pixels have optical density above {beta}",
            tissue.len(),
            od.len()
        )));
    }
    let n = tissue.len() as f64;
    let mean = tissue.iter().fold(Vector3::zeros(), |a, v| a + *v) / n;
    let cov = tissue.iter().fold(Matrix3::zeros(), |a, v| {
        let d = *v - mean;
        a + d * d.transpose()
    }) / (n - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l0 > 0.0) || l1 <= 1e-9 * l0 {
        return Err(Error::DegenerateStain(format!(
            "optical density scatter is rank-deficient (eigenvalues {l0:e}, {l1:e})"
        )));
    }
    let mut v0: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let v1: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    if v0.sum() < 0.0 {
        v0 = -v0;
    }

    let phi: Vec<f64> = tissue.iter().map(|v| v1.dot(v).atan2(v0.dot(v))).collect();
    let lo = percentile_nearest_rank(&phi, alpha);
    let hi = percentile_nearest_rank(&phi, 100.0 - alpha);
    let dir = |a: f64| -> Vector3<f64> {
        let mut s = v0 * a.cos() + v1 * a.sin();
        if s.sum() < 0.0 {
            s = -s;
        }
        s.normalize()
    };
    let (a, b) = (dir(lo), dir(hi));
    // hematoxylin absorbs red most strongly
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    let m = Matrix3x2::from_columns(&[h, e]);
    if (h - e).norm() < 1e-6 {
        return Err(Error::DegenerateStain("stain vectors coincide".into()));
    }

    let (mut ch, mut ce) = (Vec::with_capacity(od.len()), Vec::with_capacity(od.len()));
    for v in &od {
        let c = nnls2(&m, v);
        ch.push(c[0]);
        ce.push(c[1]);
    }
    let max_c = Vector2::new(
        percentile_nearest_rank(&ch, 99.0),
        percentile_nearest_rank(&ce, 99.0),
    );
    if max_c.iter().any(|&c| c <= 0.0) {
        return Err(Error::DegenerateStain(format!(
            "99th-percentile concentrations {max_c:?} are not positive"
        )));
    }
    StainProfile::new(m, max_c)
}

/// Maps concentrations under `source` onto the `target` stains, rescaled by
/// the ratio of maximum concentrations.
pub fn normalize_patch(img: &RgbImage, source: &StainProfile, target: &StainProfile) -> RgbImage {
    let scale = target.max_concentrations.component_div(&source.max_concentrations);
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let c = nnls2(&source.stain_matrix, &optical_density(p.0)).component_mul(&scale);
        let od = target.stain_matrix * c;
        for i in 0..3 {
            p.0[i] = (I0 * 10f64.powf(-od[i]) - 1.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
