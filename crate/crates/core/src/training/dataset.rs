//! Training datasets: synthetic translating textures with closed-form
//! ground truth at any time, and directories of frame sequences.
//!
//! The synthetic dataset is the only honest way to score arbitrary-time
//! synthesis without true high-speed video: each sequence is a
//! band-limited texture (a sum of random sinusoids) translating at a
//! constant velocity, so the frame at *any* `t` is available exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{read_image, Frame};
use crate::{Error, Result};

/// Time positions are the grid `k / (frames - 1)`; off-grid times are
/// only valid for synthetic sequences.
const GRID_TOL: f64 = 1e-9;

/// One sinusoidal component of a synthetic texture.
#[derive(Debug, Clone)]
struct Wave {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: f64,
}

/// Band-limited random texture translating at constant velocity.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    size: usize,
    vx: f64,
    vy: f64,
    waves: Vec<Wave>,
}

impl SyntheticSequence {
    pub fn generate(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let n_waves = 8;
        let mut waves: Vec<Wave> = (0..n_waves)
            .map(|_| {
                // wavelengths between ~8 and ~48 pixels
                let mag = rng.gen_range(std::f64::consts::TAU / 48.0..std::f64::consts::TAU / 8.0);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                Wave {
                    ky: mag * angle.sin(),
                    kx: mag * angle.cos(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: rng.gen_range(0.2..1.0),
                }
            })
            .collect();
        let total: f64 = waves.iter().map(|w| w.amp).sum();
        let target = rng.gen_range(0.3..0.42);
        for w in &mut waves {
            w.amp *= target / total;
        }
        let speed = rng.gen_range(0.5..3.0);
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            size,
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
            waves,
        }
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.vx, self.vy)
    }

    /// Closed-form texture value at real coordinates and time; channels
    /// differ by a fixed phase shift.
    pub fn value_at(&self, c: usize, y: f64, x: f64, t: f64) -> f64 {
        let sy = y - self.vy * t;
        let sx = x - self.vx * t;
        let mut v = 0.5;
        for w in &self.waves {
            v += w.amp * (w.ky * sy + w.kx * sx + w.phase + c as f64 * 0.7).sin();
        }
        v
    }

    pub fn frame_at(&self, t: f64) -> Frame {
        Frame::from_fn(self.size, self.size, |c, y, x| {
            self.value_at(c, y as f64, x as f64, t) as f32
        })
    }
}

/// A training sequence: synthetic (any `t`) or loaded frames (grid `t`).
#[derive(Debug, Clone)]
pub enum Sequence {
    Synthetic(SyntheticSequence),
    Frames(Vec<Frame>),
}

impl Sequence {
    pub fn hr_size(&self) -> (usize, usize) {
        match self {
            Sequence::Synthetic(s) => (s.size, s.size),
            Sequence::Frames(f) => (f[0].height(), f[0].width()),
        }
    }

    /// Number of stored grid frames (9 unconstrained, 3 fixed;
    /// synthetic sequences expose the 9-frame grid).
    pub fn frame_count(&self) -> usize {
        match self {
            Sequence::Synthetic(_) => 9,
            Sequence::Frames(f) => f.len(),
        }
    }

    /// Frame at time `t in [0, 1]`. Synthetic sequences evaluate any
    /// `t` exactly; frame sequences require `t` on their grid.
    pub fn frame_at_time(&self, t: f64) -> Option<Frame> {
        match self {
            Sequence::Synthetic(s) => Some(s.frame_at(t)),
            Sequence::Frames(frames) => {
                let steps = (frames.len() - 1) as f64;
                let pos = t * steps;
                let idx = pos.round();
                if (pos - idx).abs() > GRID_TOL {
                    return None;
                }
                frames.get(idx as usize).cloned()
            }
        }
    }
}

/// Builds `n_sequences` synthetic sequences of `hr_size`² frames.
/// Scoring at arbitrary `t` requires at least ~96 px of context.
pub fn make_synthetic_dataset(n_sequences: usize, hr_size: usize, seed: u64) -> Result<Vec<Sequence>> {
    if hr_size < 96 {
        return Err(Error::Usage(format!(
            "synthetic dataset frames must be at least 96 px, got {hr_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_sequences)
        .map(|_| Sequence::Synthetic(SyntheticSequence::generate(hr_size, &mut rng)))
        .collect())
}

/// Loads a directory dataset laid out as
/// `<root>/<seq_id>/frame_0.png .. frame_{n-1}.png` with n = 9 or 3.
pub fn load_directory_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut seq_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    let mut sequences = Vec::new();
    for dir in seq_dirs {
        let mut frames = Vec::new();
        for k in 0.. {
            let path = dir.join(format!("frame_{k}.png"));
            if !path.exists() {
                break;
            }
            frames.push(read_image(&path)?);
        }
        if frames.len() != 9 && frames.len() != 3 {
            return Err(Error::Format(format!(
                "{}: expected 9 or 3 frames, found {}",
                dir.display(),
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::Format(format!(
                "{}: frames have inconsistent sizes",
                dir.display()
            )));
        }
        sequences.push(Sequence::Frames(frames));
    }
    if sequences.is_empty() {
        return Err(Error::Usage(format!(
            "no sequence directories found under {}",
            root.display()
        )));
    }
    Ok(sequences)
}
