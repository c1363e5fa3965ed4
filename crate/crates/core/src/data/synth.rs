//! Synthetic tasks, each aimed at one inductive bias.
//!
//! * `multiscale-motif`: class `c` plants one raised-cosine bump of width
//!   `MOTIF_WIDTH·(c+1)` at a uniform random position.
//! * `order-motif`: every sample holds a positive and a negative bump of the
//!   same width separated by a gap, placed near the center; the class is
//!   which one comes first.
//! * `longrange`: the first and last steps are `±amplitude` on every channel;
//!   class 0 when the two signs agree, class 1 otherwise.
//!
//! Motifs are added to every channel on top of Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

pub const MOTIF_WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    MultiscaleMotif,
    OrderMotif,
    Longrange,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::MultiscaleMotif => "multiscale-motif",
            SynthKind::OrderMotif => "order-motif",
            SynthKind::Longrange => "longrange",
        }
    }

    /// 1 for the motif tasks. `longrange` uses 0.1: at n=500 and unit noise
    /// the model fits the training noise before it finds the endpoint rule.
    pub fn default_noise(self) -> f64 {
        match self {
            SynthKind::Longrange => 0.1,
            _ => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [SynthKind::MultiscaleMotif, SynthKind::OrderMotif, SynthKind::Longrange]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown synthetic kind {s:?}")))
    }
}

fn default_amplitude() -> f64 {
    3.0
}

fn default_jitter() -> usize {
    16
}

fn default_gap() -> usize {
    MOTIF_WIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    pub seed: u64,
    /// Standard deviation of the background noise; see [`SynthKind::default_noise`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Steps between the two motifs of `order-motif`.
    #[serde(default = "default_gap")]
    pub gap: usize,
    /// The `order-motif` pair starts within `jitter` steps of the center;
    /// a jitter of `length` or more places it anywhere.
    #[serde(default = "default_jitter")]
    pub jitter: usize,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, channels: usize, length: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            channels,
            length,
            classes,
            seed,
            noise: None,
            amplitude: default_amplitude(),
            gap: default_gap(),
            jitter: default_jitter(),
        }
    }

    /// 500 samples of 3 channels by 256 steps; 3 classes for
    /// `multiscale-motif`, 2 otherwise.
    pub fn default_for(kind: SynthKind) -> Self {
        let classes = if kind == SynthKind::MultiscaleMotif { 3 } else { 2 };
        Self::new(kind, 500, 3, 256, classes, 0)
    }

    pub fn noise_level(&self) -> f64 {
        self.noise.unwrap_or_else(|| self.kind.default_noise())
    }

    /// Shortest series that can host this task's motifs.
    pub fn min_length(&self) -> usize {
        match self.kind {
            SynthKind::MultiscaleMotif => MOTIF_WIDTH * self.classes,
            SynthKind::OrderMotif => 2 * MOTIF_WIDTH + self.gap,
            SynthKind::Longrange => 2,
        }
    }
}

/// Raised-cosine bump sampled at `width` points, peak 1.
pub fn bump(width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let x = (i as f64 + 0.5) / width as f64;
            (std::f64::consts::PI * x).sin().powi(2)
        })
        .collect()
}

/// The labeling rule of `longrange`.
pub fn longrange_label(first: f64, last: f64) -> usize {
    usize::from((first >= 0.0) != (last >= 0.0))
}

pub fn synth_generate(spec: &SynthSpec) -> Result<TimeSeriesDataset> {
    let SynthSpec {
        kind,
        n,
        channels: m,
        length: l,
        classes,
        ..
    } = *spec;
    if n == 0 || m == 0 || l == 0 || classes == 0 {
        return Err(Error::config(format!("synthetic sizes must be positive: {spec:?}")));
    }
    let noise = spec.noise_level();
    if noise < 0.0 || !noise.is_finite() || !spec.amplitude.is_finite() {
        return Err(Error::config("noise and amplitude must be finite, noise non-negative"));
    }
    if matches!(kind, SynthKind::OrderMotif | SynthKind::Longrange) && classes != 2 {
        return Err(Error::config(format!(
            "{} has exactly 2 classes, got {classes}",
            kind.name()
        )));
    }
    if l < spec.min_length() {
        return Err(Error::config(format!(
            "length {l} too short for {} (needs {})",
            kind.name(),
            spec.min_length()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(n * m * l);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let mut signal = vec![0.0; l];
        match kind {
            SynthKind::MultiscaleMotif => {
                let shape = bump(MOTIF_WIDTH * (y + 1));
                let at = rng.gen_range(0..=l - shape.len());
                for (j, v) in shape.iter().enumerate() {
                    signal[at + j] = spec.amplitude * v;
                }
            }
            SynthKind::OrderMotif => {
                let shape = bump(MOTIF_WIDTH);
                let span = 2 * MOTIF_WIDTH + spec.gap;
                let center = (l - span) / 2;
                let at = rng.gen_range(center.saturating_sub(spec.jitter)..=(center + spec.jitter).min(l - span));
                let (first, second) = if y == 0 { (1.0, -1.0) } else { (-1.0, 1.0) };
                for (j, v) in shape.iter().enumerate() {
                    signal[at + j] = first * spec.amplitude * v;
                    signal[at + MOTIF_WIDTH + spec.gap + j] = second * spec.amplitude * v;
                }
            }
            SynthKind::Longrange => {
                let head = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let tail = if y == 0 { head } else { -head };
                signal[0] = head;
                signal[l - 1] = tail;
            }
        }
        for _ in 0..m {
            for (t, s) in signal.iter().enumerate() {
                let endpoint = kind == SynthKind::Longrange && (t == 0 || t == l - 1);
                let v = if endpoint {
                    s * spec.amplitude
                } else {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s + noise * z
                };
                values.push(v);
            }
        }
        labels.push(y);
    }
    let names = (0..classes).map(|c| c.to_string()).collect();
    TimeSeriesDataset::new(kind.name(), (n, m, l), values, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::new(SynthKind::MultiscaleMotif, 10, 2, 64, 3, 7);
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SynthSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(synth_generate(&spec).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn order_motif_balanced() {
        for n in [9, 10, 101] {
            let ds = synth_generate(&SynthSpec::new(SynthKind::OrderMotif, n, 1, 64, 2, 1)).unwrap();
            let c = ds.class_counts();
            assert!(c[0].abs_diff(c[1]) <= 1);
        }
        assert!(synth_generate(&SynthSpec::new(SynthKind::OrderMotif, 4, 1, 64, 3, 1)).is_err());
    }

    #[test]
    fn order_motif_placement() {
        let mut spec = SynthSpec::new(SynthKind::OrderMotif, 50, 1, 128, 2, 5);
        spec.noise = Some(0.0);
        spec.jitter = 4;
        let ds = synth_generate(&spec).unwrap();
        let center = (128 - 24) / 2;
        for i in 0..ds.len() {
            let x = ds.channel(i, 0);
            let start = x.iter().position(|v| v.abs() > 0.0).unwrap();
            assert!(start.abs_diff(center) <= 4);
            let sign = if ds.labels()[i] == 0 { 1.0 } else { -1.0 };
            assert!(x[start] * sign > 0.0 && x[start + 24 - 1] * sign < 0.0);
        }
    }

    #[test]
    fn longrange_rule() {
        assert_eq!(longrange_label(1.0, 1.0), 0);
        assert_eq!(longrange_label(-1.0, -1.0), 0);
        assert_eq!(longrange_label(1.0, -1.0), 1);
        let ds = synth_generate(&SynthSpec::new(SynthKind::Longrange, 40, 3, 32, 2, 3)).unwrap();
        for i in 0..ds.len() {
            for c in 0..3 {
                let ch = ds.channel(i, c);
                assert_eq!(longrange_label(ch[0], ch[31]), ds.labels()[i]);
                assert_eq!(ch[0].abs(), 3.0);
            }
        }
    }

    #[test]
    fn too_short_rejected() {
        let spec = SynthSpec::new(SynthKind::MultiscaleMotif, 4, 1, 20, 3, 0);
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
        let spec = SynthSpec::new(SynthKind::OrderMotif, 4, 1, 23, 2, 0);
        assert!(synth_generate(&spec).is_err());
    }

    /// Nearest template over all placements, zero noise.
    #[test]
    fn multiscale_separable_by_template_matching() {
        let mut spec = SynthSpec::new(SynthKind::MultiscaleMotif, 60, 2, 48, 4, 11);
        spec.noise = Some(0.0);
        let ds = synth_generate(&spec).unwrap();
        for i in 0..ds.len() {
            let x = ds.channel(i, 0);
            let best = (0..4)
                .map(|c| {
                    let t = bump(MOTIF_WIDTH * (c + 1));
                    let dist = (0..=48 - t.len())
                        .map(|at| {
                            (0..48)
                                .map(|j| {
                                    let tv = if (at..at + t.len()).contains(&j) {
                                        3.0 * t[j - at]
                                    } else {
                                        0.0
                                    };
                                    (x[j] - tv).powi(2)
                                })
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min);
                    (c, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(best, ds.labels()[i]);
        }
    }
}
