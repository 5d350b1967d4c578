use image::{imageops, GrayImage, Luma, RgbImage};
use imageproc::filter::gaussian_blur_f32;
use imageproc::region_labelling::{connected_components, Connectivity};

#[derive(Debug, Clone, PartialEq)]
pub struct CannyConfig {
    pub sigma: f32,
    /// Hysteresis thresholds on the Sobel magnitude of 8-bit input.
    pub low: f32,
    pub high: f32,
    /// Components shorter than this many pixels are not counted.
    pub min_segment_len: usize,
    /// Patches with at most this many segments are rejected.
    pub max_rejected_segments: usize,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 50.0,
            high: 150.0,
            min_segment_len: 10,
            max_rejected_segments: 2,
        }
    }
}

fn sobel(img: &GrayImage) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |x: i64, y: i64| -> f32 {
        f32::from(img.get_pixel(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32)[0])
    };
    let mut gx = Vec::with_capacity((w * h) as usize);
    let mut gy = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            gx.push(
                at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                    - at(x - 1, y - 1)
                    - 2.0 * at(x - 1, y)
                    - at(x - 1, y + 1),
            );
            gy.push(
                at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                    - at(x - 1, y - 1)
                    - 2.0 * at(x, y - 1)
                    - at(x + 1, y - 1),
            );
        }
    }
    (gx, gy)
}

/// Binary edge map (255 = edge): Gaussian blur, Sobel, non-maximum
/// suppression along the quantized gradient direction, then hysteresis.
pub fn canny_edges(gray: &GrayImage, cfg: &CannyConfig) -> GrayImage {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let blurred = if cfg.sigma > 0.0 {
        gaussian_blur_f32(gray, cfg.sigma)
    } else {
        gray.clone()
    };
    let (gx, gy) = sobel(&blurred);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let mut thin = vec![0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (a, b) = if !(22.5..157.5).contains(&angle) {
                (i - 1, i + 1)
            } else if angle < 67.5 {
                (i - w - 1, i + w + 1)
            } else if angle < 112.5 {
                (i - w, i + w)
            } else {
                (i - w + 1, i + w - 1)
            };
            if mag[i] >= mag[a] && mag[i] >= mag[b] {
                thin[i] = mag[i];
            }
        }
    }

    let mut out = GrayImage::new(w as u32, h as u32);
    let mut stack = Vec::new();
    for start in 0..w * h {
        if thin[start] < cfg.high || out.as_raw()[start] != 0 {
            continue;
        }
        stack.push(start);
        out.as_mut()[start] = 255;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if thin[j] >= cfg.low && out.as_raw()[j] == 0 {
                        out.as_mut()[j] = 255;
                        stack.push(j);
                    }
                }
            }
        }
    }
    out
}

/// Number of 8-connected edge components with at least `min_len` pixels.
pub fn count_segments(edges: &GrayImage, min_len: usize) -> usize {
    let labels = connected_components(edges, Connectivity::Eight, Luma([0u8]));
    let mut sizes = std::collections::HashMap::new();
    for l in labels.pixels().map(|p| p[0]).filter(|&l| l > 0) {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    sizes.values().filter(|&&s| s >= min_len).count()
}

pub fn edge_segments(pixels: &RgbImage, cfg: &CannyConfig) -> usize {
    let gray = imageops::grayscale(pixels);
    count_segments(&canny_edges(&gray, cfg), cfg.min_segment_len)
}

/// True when the patch shows too few edges (blank background or blur).
pub fn reject_patch(pixels: &RgbImage, cfg: &CannyConfig) -> bool {
    edge_segments(pixels, cfg) <= cfg.max_rejected_segments
}
