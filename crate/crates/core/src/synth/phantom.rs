//! The analytic anatomy behind each phantom patient.
//!
//! A patient is an ellipsoidal "bone" with nested shell structures, a few
//! smooth low-frequency intensity modes (patient-specific nuisance texture),
//! and one localized lesion site per diagnostic label. All quantities are
//! functions of canonical coordinates in [-1, 1]^3, so every orientation
//! samples the same anatomy with its own slice axis — mirroring anisotropic
//! multi-plane acquisition.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::volume::Orientation;

use super::PhantomSpec;

/// Intensity offsets cycled over shell classes.
const SHELL_OFFSETS: [f64; 8] = [0.35, -0.18, 0.22, -0.28, 0.15, -0.12, 0.18, -0.2];

/// Lesion visibility in its preferred plane vs the other two.
pub const PREFERRED_VISIBILITY: f64 = 1.0;
pub const OFF_PLANE_VISIBILITY: f64 = 0.35;

#[derive(Clone, Debug)]
struct Mode {
    amp: f64,
    freq: [f64; 3],
    phase: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Lesion {
    pub site: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct PhantomModel {
    center: [f64; 3],
    radii: [f64; 3],
    shell_cuts: Vec<f64>,
    modes: Vec<Mode>,
    pub lesions: Vec<Lesion>,
    pub labels: Vec<u8>,
}

impl PhantomModel {
    /// All draws come from the supplied per-patient stream, in fixed order.
    pub fn from_stream(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> PhantomModel {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let center = [u(-0.12, 0.12), u(-0.12, 0.12), u(-0.12, 0.12)];
        let radii = [0.80 * (1.0 + u(-0.08, 0.08)), 0.85 * (1.0 + u(-0.08, 0.08)), 0.85 * (1.0 + u(-0.08, 0.08))];
        let s = spec.n_structures;
        let shell_cuts: Vec<f64> = if s == 1 {
            vec![0.88]
        } else {
            (0..s).map(|i| 0.30 + (0.88 - 0.30) * i as f64 / (s - 1) as f64).collect()
        };
        let mut modes = Vec::with_capacity(3);
        for _ in 0..3 {
            modes.push(Mode {
                amp: u(0.05, 0.13),
                freq: [u(0.5, 2.0).round().max(1.0), u(0.5, 2.0).round().max(1.0), u(0.5, 2.0).round().max(1.0)],
                phase: [u(0.0, 2.0), u(0.0, 2.0), u(0.0, 2.0)],
            });
        }
        let k = spec.n_labels;
        let mut lesions = Vec::with_capacity(k);
        for i in 0..k {
            let theta = std::f64::consts::TAU * i as f64 / k as f64 + 0.6;
            let base = [
                0.45 * theta.cos(),
                0.45 * theta.sin(),
                0.35 * if i % 2 == 0 { 1.0 } else { -1.0 },
            ];
            lesions.push(Lesion {
                site: [base[0] + u(-0.06, 0.06), base[1] + u(-0.06, 0.06), base[2] + u(-0.06, 0.06)],
                sigma: 0.18 * (1.0 + u(-0.15, 0.15)),
            });
        }
        let labels: Vec<u8> = (0..k).map(|_| u8::from(rng.random::<f64>() < spec.label_prevalence)).collect();
        PhantomModel { center, radii, shell_cuts, modes, lesions, labels }
    }

    /// Normalised ellipsoidal radius of a canonical point.
    fn rho(&self, p: [f64; 3]) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.radii[i];
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Structure class at a point: 0 background, 1..=S from core outwards.
    pub fn structure_class(&self, p: [f64; 3]) -> u8 {
        let rho = self.rho(p);
        if rho >= *self.shell_cuts.last().unwrap() {
            return 0;
        }
        let inner = self.shell_cuts.iter().take_while(|c| **c < rho).count();
        (inner + 1) as u8
    }

    /// The plane in which lesion `k` is fully visible.
    pub fn preferred_orientation(label: usize) -> Orientation {
        Orientation::ALL[label % 3]
    }

    pub fn lesion_visibility(label: usize, orientation: Orientation) -> f64 {
        if Self::preferred_orientation(label) == orientation {
            PREFERRED_VISIBILITY
        } else {
            OFF_PLANE_VISIBILITY
        }
    }

    fn lesion_dist(&self, label: usize, p: [f64; 3]) -> f64 {
        let l = &self.lesions[label];
        let mut acc = 0.0;
        for i in 0..3 {
            let d = p[i] - l.site[i];
            acc += d * d;
        }
        acc.sqrt()
    }

    /// True within one sigma of the lesion site (the oracle's region map).
    pub fn in_lesion_region(&self, label: usize, p: [f64; 3]) -> bool {
        self.lesion_dist(label, p) <= self.lesions[label].sigma
    }

    /// Noise-free anatomy intensity at a canonical point, as imaged in the
    /// given plane (lesions are attenuated off their preferred plane).
    pub fn intensity(&self, p: [f64; 3], orientation: Orientation, effect: f64) -> f64 {
        let rho = self.rho(p);
        let mut v = (1.0 - 0.6 * rho).max(0.0);
        let class = self.structure_class(p);
        if class > 0 {
            v += SHELL_OFFSETS[(class as usize - 1) % SHELL_OFFSETS.len()];
        }
        for m in &self.modes {
            let mut term = m.amp;
            for i in 0..3 {
                term *= (std::f64::consts::PI * (m.freq[i] * p[i] + m.phase[i])).cos();
            }
            v += term;
        }
        for (k, lesion) in self.lesions.iter().enumerate() {
            if self.labels[k] == 0 {
                continue;
            }
            let d = self.lesion_dist(k, p);
            if d <= 2.5 * lesion.sigma {
                let a = effect * Self::lesion_visibility(k, orientation);
                v += a * (-(d * d) / (lesion.sigma * lesion.sigma)).exp();
            }
        }
        v
    }
}

/// Canonical coordinates of a grid position: the slice axis is mapped onto a
/// different canonical axis per plane.
pub fn canonical_coords(orientation: Orientation, u_slice: f64, u_row: f64, u_col: f64) -> [f64; 3] {
    match orientation {
        Orientation::Sagittal => [u_slice, u_row, u_col],
        Orientation::Coronal => [u_row, u_slice, u_col],
        Orientation::Axial => [u_row, u_col, u_slice],
    }
}

/// Normalised coordinate of index `i` on an axis of length `n`.
pub fn axis_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * (i as f64 + 0.5) / n as f64
}
