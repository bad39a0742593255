//! Seeded synthetic workloads and teachers.
//!
//! The smooth workload places a strong, spatially smooth signal over a
//! foreground region and leaves the rest of each frame as a weak, incoherent
//! background. The teacher confidence is a linear read-out of the features
//! (plus optional noise), so it is high over the foreground and low over the
//! background. The high-frequency workload replaces the smooth foreground
//! with thin stripes a few tokens wide.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layout::{LayoutDescriptor, PatchGrid, TokenSequence};
use crate::rng::Rng;
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Smooth,
    HighFrequency,
}

impl std::str::FromStr for WorkloadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(Self::Smooth),
            "high-frequency" | "highfreq" => Ok(Self::HighFrequency),
            _ => Err(crate::Error::Parameter(format!("unknown workload {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub grid: PatchGrid,
    pub channels: usize,
    pub special_per_frame: usize,
    /// Amplitude of the foreground signal.
    pub signal: f32,
    /// Standard deviation of the per-token background noise.
    pub noise: f32,
    /// Standard deviation of the noise added to the teacher read-out.
    pub teacher_noise: f32,
}

impl Workload {
    pub fn smooth(grid: PatchGrid, channels: usize, special_per_frame: usize) -> Self {
        Self {
            kind: WorkloadKind::Smooth,
            grid,
            channels,
            special_per_frame,
            signal: 1.0,
            noise: 0.15,
            teacher_noise: 0.0,
        }
    }

    /// Direction the teacher reads confidence from.
    pub fn teacher_direction(&self) -> Vec<f32> {
        let mut w = vec![0.0; self.channels];
        w[0] = 1.0;
        w
    }

    pub fn layout(&self, frames: usize, group_size: usize) -> Result<LayoutDescriptor> {
        LayoutDescriptor::new(frames, self.special_per_frame, self.grid.patches(), group_size)
    }

    /// Draws `batch` samples of `frames` frames. Returns the tokens and the
    /// teacher confidence per image patch, `(batch, image_tokens)`.
    pub fn sample(
        &self,
        batch: usize,
        frames: usize,
        group_size: usize,
        rng: &mut Rng,
    ) -> Result<(TokenSequence, DenseTensor)> {
        let layout = self.layout(frames, group_size)?;
        let c = self.channels;
        let (h, w) = (self.grid.height, self.grid.width);
        let dir = self.teacher_direction();
        let mut tokens = Vec::with_capacity(batch * layout.total_tokens() * c);
        let mut teacher = Vec::with_capacity(batch * layout.image_tokens());
        for _ in 0..batch {
            // one set of special tokens per sample, shared by its frames
            let specials: Vec<f32> = rng.normal_vec(self.special_per_frame * c, 1.0);
            for _ in 0..frames {
                tokens.extend_from_slice(&specials);
                let support = self.support(rng);
                let texture = Field::random(rng, c, 3, 1.5);
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
                        let amp = self.signal * support.amplitude(u, v, x, y);
                        let t = texture.eval(u, v);
                        let mut feat = vec![0.0f32; c];
                        for (ch, f) in feat.iter_mut().enumerate() {
                            // the signal points mostly along channel 0
                            let dirv = if ch == 0 { 1.0 } else { 0.35 * t[ch] };
                            *f = amp * dirv + self.noise * rng.normal();
                        }
                        let mut conf: f32 = feat.iter().zip(&dir).map(|(a, b)| a * b).sum();
                        if self.teacher_noise > 0.0 {
                            conf += self.teacher_noise * rng.normal();
                        }
                        teacher.push(conf);
                        tokens.extend(feat);
                    }
                }
            }
        }
        let seq = TokenSequence::new(layout, DenseTensor::new(vec![batch, layout.total_tokens(), c], tokens)?)?;
        let teacher = DenseTensor::new(vec![batch, layout.image_tokens()], teacher)?;
        Ok((seq, teacher))
    }

    fn support(&self, rng: &mut Rng) -> Support {
        match self.kind {
            WorkloadKind::Smooth => Support::Blob(Field::random(rng, 1, 4, 1.2)),
            WorkloadKind::HighFrequency => {
                Support::Stripes { period: 2 + rng.below(3), phase: rng.below(4), vertical: rng.below(2) == 0 }
            }
        }
    }
}

enum Support {
    Blob(Field),
    Stripes { period: usize, phase: usize, vertical: bool },
}

impl Support {
    /// Foreground amplitude in `[0, 1]`.
    fn amplitude(&self, u: f32, v: f32, x: usize, y: usize) -> f32 {
        match self {
            Support::Blob(f) => {
                let s = f.eval(u, v)[0];
                1.0 / (1.0 + (-4.0 * s).exp())
            }
            Support::Stripes { period, phase, vertical } => {
                let k = if *vertical { x } else { y };
                if (k + phase) % (2 * period) < *period {
                    1.0
                } else {
                    0.05
                }
            }
        }
    }
}

/// Sum of low-frequency plane waves per channel.
struct Field {
    waves: Vec<Vec<(f32, f32, f32, f32)>>,
}

impl Field {
    fn random(rng: &mut Rng, channels: usize, components: usize, max_freq: f32) -> Self {
        let waves = (0..channels)
            .map(|_| {
                (0..components)
                    .map(|_| {
                        (
                            rng.uniform_range(-max_freq, max_freq),
                            rng.uniform_range(-max_freq, max_freq),
                            rng.uniform_range(0.0, std::f32::consts::TAU),
                            rng.normal() / (components as f32).sqrt(),
                        )
                    })
                    .collect()
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, u: f32, v: f32) -> Vec<f32> {
        self.waves
            .iter()
            .map(|ws| {
                ws.iter().map(|&(fx, fy, ph, a)| a * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin()).sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let wl = Workload::smooth(PatchGrid::new(4, 8), 6, 1);
        let a = wl.sample(2, 2, 4, &mut Rng::new(3)).unwrap();
        let b = wl.sample(2, 2, 4, &mut Rng::new(3)).unwrap();
        let c = wl.sample(2, 2, 4, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
        assert_eq!(a.0.tokens().shape(), &[2, 2 * 33, 6]);
        assert_eq!(a.1.shape(), &[2, 64]);
    }

    #[test]
    fn teacher_reads_features() {
        let wl = Workload::smooth(PatchGrid::new(4, 4), 3, 2);
        let (seq, teacher) = wl.sample(1, 1, 4, &mut Rng::new(1)).unwrap();
        for p in 0..16 {
            assert_eq!(teacher.data()[p], seq.token(0, 2 + p)[0]);
        }
    }

    #[test]
    fn stripes_alternate() {
        let mut wl = Workload::smooth(PatchGrid::new(8, 8), 2, 0);
        wl.kind = WorkloadKind::HighFrequency;
        wl.noise = 0.0;
        let (_, teacher) = wl.sample(1, 1, 2, &mut Rng::new(2)).unwrap();
        let hi = teacher.data().iter().filter(|&&v| v > 0.5).count();
        assert!(hi > 8 && hi < 56);
    }
}
