use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::{
    build_tile_grid, estimate_stains, extract_patch, normalize_patch, reject_patch,
    standardize_brightness, CannyConfig, Patch, StainProfile, DEFAULT_ALPHA, DEFAULT_BETA,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub source_mpp: f64,
    pub canny: CannyConfig,
    pub alpha: f64,
    pub beta: f64,
    pub target: StainProfile,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            source_mpp: 0.5,
            canny: CannyConfig::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            target: StainProfile::reference(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    FewEdges,
    NoSignal,
    InsufficientTissue,
    DegenerateStain,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::FewEdges => "few_edges",
            RejectReason::NoSignal => "no_signal",
            RejectReason::InsufficientTissue => "insufficient_tissue",
            RejectReason::DegenerateStain => "degenerate_stain",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub slide_id: String,
    pub x: i32,
    pub y: i32,
    pub reject_reason: Option<RejectReason>,
}

/// Edge filter, brightness standardization, then stain normalization
/// against the patch's own Macenko profile.
pub fn process_patch(
    patch: &Patch,
    cfg: &PreprocessConfig,
) -> Result<std::result::Result<RgbImage, RejectReason>> {
    if reject_patch(&patch.pixels, &cfg.canny) {
        return Ok(Err(RejectReason::FewEdges));
    }
    let bright = match standardize_brightness(&patch.pixels) {
        Ok(b) => b,
        Err(Error::NoSignal(_)) => return Ok(Err(RejectReason::NoSignal)),
        Err(e) => return Err(e),
    };
    let source = match estimate_stains(&bright, cfg.alpha, cfg.beta) {
        Ok(s) => s,
        Err(Error::InsufficientTissue(_)) => return Ok(Err(RejectReason::InsufficientTissue)),
        Err(Error::DegenerateStain(_)) => return Ok(Err(RejectReason::DegenerateStain)),
        Err(e) => return Err(e),
    };
    Ok(Ok(normalize_patch(&bright, &source, &cfg.target)))
}

type TileOutcome = (TileRecord, Option<RgbImage>);

/// Tiles one raster and processes the tiles on up to `jobs` threads. Output
/// order follows the grid, independent of `jobs`.
pub fn preprocess_raster(
    slide_id: &str,
    raster: &RgbImage,
    cfg: &PreprocessConfig,
    jobs: usize,
) -> Result<Vec<TileOutcome>> {
    let grid = build_tile_grid(raster.width(), raster.height(), cfg.source_mpp)?;
    let jobs = jobs.max(1);
    let chunk = grid.positions.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<TileOutcome>>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .positions
            .chunks(chunk)
            .map(|part| {
                let grid = &grid;
                s.spawn(move || {
                    part.iter()
                        .map(|&pos| {
                            let patch = extract_patch(raster, grid, pos, cfg.source_mpp)?;
                            let out = process_patch(&patch, cfg)?;
                            let record = TileRecord {
                                slide_id: slide_id.to_string(),
                                x: patch.grid_pos.0,
                                y: patch.grid_pos.1,
                                reject_reason: out.as_ref().err().copied(),
                            };
                            Ok((record, out.ok()))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("tile worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(grid.positions.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

pub fn write_tile_manifest(path: &Path, records: &[TileRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slide_id", "x", "y", "rejected", "reject_reason"])?;
    for r in records {
        w.write_record([
            r.slide_id.clone(),
            r.x.to_string(),
            r.y.to_string(),
            u8::from(r.reject_reason.is_some()).to_string(),
            r.reject_reason.map_or_else(String::new, |x| x.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub slides: usize,
    pub tiles: usize,
    pub kept: usize,
    pub manifest: PathBuf,
}

fn raster_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Processes every PNG/PPM raster in `input` (slide id = file stem). Kept
/// tiles go to `out/tiles/<slide>/<x>_<y>.png`, the manifest to
/// `out/tile_manifest.csv`.
pub fn preprocess_dir(input: &Path, out: &Path, cfg: &PreprocessConfig, jobs: usize) -> Result<PreprocessSummary> {
    let files = raster_files(input)?;
    if files.is_empty() {
        return Err(Error::Invalid(format!("no PNG or PPM rasters in {}", input.display())));
    }
    let mut records = Vec::new();
    let mut kept = 0;
    for f in &files {
        let slide = f.file_stem().and_then(|s| s.to_str()).unwrap_or("slide").to_string();
        let raster = image::open(f)?.to_rgb8();
        let tile_dir = out.join("tiles").join(&slide);
        for (rec, img) in preprocess_raster(&slide, &raster, cfg, jobs)? {
            if let Some(img) = img {
                std::fs::create_dir_all(&tile_dir).map_err(|e| Error::io(&tile_dir, e))?;
                img.save(tile_dir.join(format!("{}_{}.png", rec.x, rec.y)))?;
                kept += 1;
            }
            records.push(rec);
        }
    }
    let manifest = out.join("tile_manifest.csv");
    write_tile_manifest(&manifest, &records)?;
    Ok(PreprocessSummary {
        slides: files.len(),
        tiles: records.len(),
        kept,
        manifest,
    })
}
