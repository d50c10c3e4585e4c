//! Seeded synthetic depth videos with ground truth: a square object sliding
//! across a planar background, with optional dropouts, edge jitter, a far
//! region and a region outside sensor range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_io::{DepthFrame, Grid, GtFrame, GtLabel, VideoSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.height && col >= self.x && col < self.x + self.width
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.width <= width && self.y + self.height <= height
    }
}

/// Background patch at a different distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FarRegion {
    pub rect: Rect,
    pub depth_mm: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub bg_depth_mm: u16,
    pub object_depth_mm: u16,
    pub object_size_px: usize,
    /// Horizontal displacement per frame; the object wraps around.
    pub velocity_px_per_frame: i64,
    /// Per-pixel probability of a dropout to 0.
    pub absent_rate: f64,
    /// Half-width of the band around the object boundary whose pixels are
    /// randomly assigned object or background depth.
    pub edge_noise_px: usize,
    pub out_of_range_rect: Option<Rect>,
    pub far_region: Option<FarRegion>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".into(),
            width: 64,
            height: 64,
            frame_count: 120,
            bg_depth_mm: 2000,
            object_depth_mm: 1200,
            object_size_px: 12,
            velocity_px_per_frame: 1,
            absent_rate: 0.02,
            edge_noise_px: 0,
            out_of_range_rect: None,
            far_region: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return bad("width, height and frame_count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.absent_rate) {
            return bad(format!("absent_rate must lie in [0, 1), got {}", self.absent_rate));
        }
        if self.object_size_px == 0
            || self.object_size_px > self.width
            || self.object_size_px > self.height
        {
            return bad(format!(
                "object of {} px does not fit a {}x{} frame",
                self.object_size_px, self.width, self.height
            ));
        }
        if self.bg_depth_mm == 0 || self.object_depth_mm == 0 {
            return bad("depths must be nonzero".into());
        }
        if let Some(r) = self.out_of_range_rect {
            if !r.fits(self.width, self.height) {
                return bad("out_of_range_rect exceeds the frame".into());
            }
        }
        if let Some(f) = self.far_region {
            if !f.rect.fits(self.width, self.height) || f.depth_mm == 0 {
                return bad("far_region exceeds the frame or has zero depth".into());
            }
        }
        Ok(())
    }

    /// Left column of the object in frame `k`.
    pub fn object_x(&self, k: usize) -> usize {
        let start = (self.width - self.object_size_px) as i64 / 2;
        (start + self.velocity_px_per_frame * k as i64).rem_euclid(self.width as i64) as usize
    }

    pub fn object_y(&self) -> usize {
        (self.height - self.object_size_px) / 2
    }
}

/// Object 60 mm in front of a 2000 mm wall, with a 4500 mm region setting
/// the normalization range.
pub fn camouflage_config() -> SynthConfig {
    SynthConfig {
        name: "camouflage".into(),
        object_depth_mm: 1940,
        far_region: Some(FarRegion {
            rect: Rect {
                x: 0,
                y: 0,
                width: 64,
                height: 10,
            },
            depth_mm: 4500,
        }),
        ..SynthConfig::default()
    }
}

/// Wide depth range (a distant region far behind the wall) and frequent
/// dropouts.
pub fn wide_range_config() -> SynthConfig {
    SynthConfig {
        name: "wide_range".into(),
        object_depth_mm: 1500,
        absent_rate: 0.15,
        far_region: Some(FarRegion {
            rect: Rect {
                x: 0,
                y: 0,
                width: 64,
                height: 10,
            },
            depth_mm: 8000,
        }),
        ..SynthConfig::default()
    }
}

/// Signed distance information of a pixel relative to the object square.
struct Placement {
    x: usize,
    y: usize,
    size: usize,
    width: usize,
}

impl Placement {
    /// Chebyshev distance to the square for outside pixels (0 inside), and
    /// for inside pixels the distance to the nearest edge pixel (0 on the
    /// edge).
    fn locate(&self, row: usize, col: usize) -> (bool, usize) {
        let u = (col + self.width - self.x) % self.width;
        let v = row as i64 - self.y as i64;
        let s = self.size as i64;
        let col_in = u < self.size;
        let row_in = (0..s).contains(&v);
        if col_in && row_in {
            let u = u as i64;
            let d = u.min(s - 1 - u).min(v).min(s - 1 - v);
            return (true, d as usize);
        }
        let dx = if col_in {
            0
        } else {
            (u - self.size + 1).min(self.width - u)
        };
        let dy = if row_in {
            0
        } else if v < 0 {
            (-v) as usize
        } else {
            (v - s + 1) as usize
        };
        (false, dx.max(dy))
    }
}

/// One frame and its ground truth.
pub fn generate_frame(cfg: &SynthConfig, k: usize) -> (DepthFrame, GtFrame) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);
    let place = Placement {
        x: cfg.object_x(k),
        y: cfg.object_y(),
        size: cfg.object_size_px,
        width: cfg.width,
    };
    let e = cfg.edge_noise_px;
    let ring = e.max(1);
    let n = cfg.width * cfg.height;
    let mut depth = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let wall = match cfg.far_region {
                Some(f) if f.rect.contains(row, col) => f.depth_mm,
                _ => cfg.bg_depth_mm,
            };
            let (inside, d) = place.locate(row, col);
            let jitter = e > 0 && if inside { d < e } else { d <= e };
            let object = if jitter { rng.random_bool(0.5) } else { inside };
            let mut z = if object { cfg.object_depth_mm } else { wall };
            let label = if jitter || (!inside && d <= ring) {
                GtLabel::Unknown
            } else if inside {
                GtLabel::Foreground
            } else {
                GtLabel::Background
            };
            if cfg.absent_rate > 0.0 && rng.random_bool(cfg.absent_rate) {
                z = 0;
            }
            if cfg.out_of_range_rect.is_some_and(|r| r.contains(row, col)) {
                z = 0;
            }
            depth.push(z);
            gt.push(label);
        }
    }
    (
        Grid {
            width: cfg.width,
            height: cfg.height,
            data: depth,
        },
        Grid {
            width: cfg.width,
            height: cfg.height,
            data: gt,
        },
    )
}

pub fn generate(cfg: &SynthConfig) -> Result<VideoSequence> {
    cfg.validate()?;
    let (frames, gt): (Vec<_>, Vec<_>) = (0..cfg.frame_count)
        .into_par_iter()
        .map(|k| generate_frame(cfg, k))
        .unzip();
    VideoSequence::new(cfg.name.clone(), frames, Some(gt), None)
}
