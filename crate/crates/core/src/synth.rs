//! Parametric layered phantoms of the optic nerve head with controllable
//! neural (RNFL) and connective tissue (cup, lamina) changes.
//!
//! Anatomy is built in a frame whose z=0 plane holds the BMO circle and whose
//! origin is the BMO center, then tilted and placed at the volume center
//! before voxelization. Outside the BMO the layers stack from the inner
//! limiting membrane down: RNFL, GCL+IPL, other retina, RPE (centered on
//! z=0), choroid, sclera. Inside the BMO a canal of prelaminar tissue runs
//! from the cupped inner surface down to the lamina.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{self, LabelVolume, Point3};
use crate::seed;

/// Layer thicknesses in µm, anterior to posterior outside the BMO.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layers {
    pub rnfl: f64,
    pub gcl_ipl: f64,
    pub other_retina: f64,
    pub rpe: f64,
    pub choroid: f64,
    pub sclera: f64,
}

impl Layers {
    fn as_array(&self) -> [f64; 6] {
        [
            self.rnfl,
            self.gcl_ipl,
            self.other_retina,
            self.rpe,
            self.choroid,
            self.sclera,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub bmo_radius: f64,
    pub layers: Layers,
    pub cup_depth: f64,
    /// Depth of the anterior lamina surface below the BMO plane.
    pub lc_depth: f64,
    pub lc_thickness: f64,
    pub tilt: f64,
    /// Direction in the xy plane of the tilt axis, radians from +x.
    pub tilt_azimuth: f64,
    /// Peak surface displacement in µm.
    pub noise_amplitude: f64,
    pub seed: u64,
    pub diagnosis_label: u8,
}

/// Number of landmark points recorded on the BMO circle.
pub const BMO_POINT_COUNT: usize = 72;
/// Cup width relative to the BMO radius.
const CUP_SIGMA: f64 = 0.35;
const MAX_TILT: f64 = 80.0 * core::f64::consts::PI / 180.0;
/// Sinusoid count per noise field.
const NOISE_TERMS: usize = 3;

pub const HEALTHY_LAYERS: Layers = Layers {
    rnfl: 100.0,
    gcl_ipl: 80.0,
    other_retina: 150.0,
    rpe: 30.0,
    choroid: 200.0,
    sclera: 300.0,
};
pub const HEALTHY_CUP_DEPTH: f64 = 250.0;
pub const HEALTHY_LC_DEPTH: f64 = 400.0;
pub const HEALTHY_LC_THICKNESS: f64 = 150.0;
pub const HEALTHY_BMO_RADIUS: f64 = 850.0;

impl PhantomSpec {
    /// Untilted, noise-free healthy eye on a 72×72 grid of A-scans.
    pub fn healthy() -> Self {
        let mut spec = PhantomSpec {
            dims: [72, 72, 2],
            spacing: [45.0, 45.0, 10.0],
            bmo_radius: HEALTHY_BMO_RADIUS,
            layers: HEALTHY_LAYERS,
            cup_depth: HEALTHY_CUP_DEPTH,
            lc_depth: HEALTHY_LC_DEPTH,
            lc_thickness: HEALTHY_LC_THICKNESS,
            tilt: 0.0,
            tilt_azimuth: 0.0,
            noise_amplitude: 0.0,
            seed: 0,
            diagnosis_label: 0,
        };
        spec.fit_depth();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Spec(format!("phantom {what}")));
        if self.dims.iter().any(|&d| d < 2) {
            return bad("needs at least 2 voxels per axis");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive");
        }
        if self.layers.as_array().iter().any(|&t| !(t > 0.0)) {
            return bad("layer thicknesses must be positive");
        }
        if !(self.bmo_radius > 0.0) {
            return bad("BMO radius must be positive");
        }
        if !(self.cup_depth >= 0.0) || !(self.lc_thickness > 0.0) || !(self.lc_depth > 0.0) {
            return bad("cup depth must be ≥ 0 and lamina depth and thickness > 0");
        }
        if !(self.noise_amplitude >= 0.0) || !(self.tilt.abs() < MAX_TILT) {
            return bad("noise amplitude must be ≥ 0 and |tilt| below 80°");
        }
        if self.diagnosis_label > 1 {
            return bad("diagnosis label must be 0 or 1");
        }
        Ok(())
    }

    /// Half diagonal of the volume footprint, the largest lateral distance
    /// of any column from the BMO center.
    fn half_diagonal(&self) -> f64 {
        let [nx, ny, _] = self.dims;
        let [sx, sy, _] = self.spacing;
        let (hx, hy) = ((nx - 1) as f64 * sx / 2.0, (ny - 1) as f64 * sy / 2.0);
        (hx * hx + hy * hy).sqrt()
    }

    /// Clearance kept above the inner surface and below the deepest tissue.
    fn margin(&self) -> f64 {
        self.half_diagonal() * self.tilt.tan().abs() + 3.0 * self.spacing[2] + self.noise_amplitude
    }

    /// Volume-frame position of the BMO center.
    pub fn bmo_center(&self) -> Point3 {
        let [nx, ny, _] = self.dims;
        let [sx, sy, _] = self.spacing;
        let l = &self.layers;
        let depth_above = l.rpe / 2.0 + l.other_retina + l.gcl_ipl + l.rnfl;
        [
            (nx - 1) as f64 * sx / 2.0,
            (ny - 1) as f64 * sy / 2.0,
            depth_above / self.tilt.cos() + self.margin(),
        ]
    }

    /// Sets the axial voxel count to the smallest that holds every layer.
    pub fn fit_depth(&mut self) {
        let l = &self.layers;
        let below = (l.rpe / 2.0 + l.choroid + l.sclera).max(self.lc_depth + self.lc_thickness);
        let bottom = self.bmo_center()[2] + below / self.tilt.cos() + self.margin();
        self.dims[2] = (bottom / self.spacing[2]).ceil() as usize + 1;
    }

    /// Rotation from the anatomical frame to the volume frame.
    pub fn tilt_rotation(&self) -> Matrix3<f64> {
        let axis = Vector3::new(self.tilt_azimuth.cos(), self.tilt_azimuth.sin(), 0.0);
        *Rotation3::from_axis_angle(&Unit::new_normalize(axis), self.tilt).matrix()
    }

    /// The exact BMO circle in the volume frame.
    pub fn bmo_circle(&self) -> Vec<Point3> {
        let r = self.tilt_rotation();
        let c = Vector3::from(self.bmo_center());
        (0..BMO_POINT_COUNT)
            .map(|i| {
                let a = 2.0 * core::f64::consts::PI * i as f64 / BMO_POINT_COUNT as f64;
                let q = Vector3::new(self.bmo_radius * a.cos(), self.bmo_radius * a.sin(), 0.0);
                (c + r * q).into()
            })
            .collect()
    }
}

/// Smooth seeded displacement field over the volume's (x, y) extent with
/// `|n| ≤ amplitude` everywhere.
struct NoiseField {
    terms: [(f64, f64, f64, f64); NOISE_TERMS],
}

impl NoiseField {
    fn new(seed: u64, surface: u64, amplitude: f64, extent: f64) -> Self {
        let mut rng = seed::rng(seed, &[0x5eed, surface]);
        let mut terms = [(0.0, 0.0, 0.0, 0.0); NOISE_TERMS];
        let weights = [0.5, 0.3, 0.2];
        for (t, w) in terms.iter_mut().zip(weights) {
            let cycles: f64 = rng.random_range(0.5..2.0);
            let dir: f64 = rng.random_range(0.0..core::f64::consts::TAU);
            let k = core::f64::consts::TAU * cycles / extent;
            *t = (amplitude * w, k * dir.cos(), k * dir.sin(), rng.random_range(0.0..core::f64::consts::TAU));
        }
        NoiseField { terms }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, kx, ky, ph)| a * (kx * x + ky * y + ph).sin())
            .sum()
    }
}

/// Voxelizes a phantom. Each voxel takes the tissue at its center.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabelVolume> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let [sx, sy, sz] = spec.spacing;
    let l = spec.layers;
    let extent = (nx as f64 * sx).max(ny as f64 * sy);
    let amp = spec.noise_amplitude;
    let fields: Vec<NoiseField> = (0..8)
        .map(|s| NoiseField::new(spec.seed, s, amp, extent))
        .collect();
    // nominal surfaces below the BMO plane, anterior first
    let ilm = -(l.rpe / 2.0 + l.other_retina + l.gcl_ipl + l.rnfl);
    let nominal = [
        ilm,
        ilm + l.rnfl,
        ilm + l.rnfl + l.gcl_ipl,
        -l.rpe / 2.0,
        l.rpe / 2.0,
        l.rpe / 2.0 + l.choroid,
        l.rpe / 2.0 + l.choroid + l.sclera,
    ];
    let thickness = l.as_array();
    let min_gap = sz;
    let r_inv = spec.tilt_rotation().transpose();
    let c = Vector3::from(spec.bmo_center());
    let r2 = spec.bmo_radius * spec.bmo_radius;
    let cup_s2 = 2.0 * (CUP_SIGMA * spec.bmo_radius).powi(2);
    let mut labels = vec![0u8; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            let (px, py) = (x as f64 * sx, y as f64 * sy);
            let mut surf = [0.0; 7];
            for (i, s) in surf.iter_mut().enumerate() {
                *s = nominal[i] + fields[i].at(px, py);
            }
            enforce_order(&mut surf, &thickness, min_gap);
            let lc_top = spec.lc_depth + fields[7].at(px, py);
            let lc_bottom = lc_top + spec.lc_thickness;
            let col = &mut labels[(x * ny + y) * nz..(x * ny + y + 1) * nz];
            for (z, out) in col.iter_mut().enumerate() {
                let q = r_inv * (Vector3::new(px, py, z as f64 * sz) - c);
                let rho2 = q.x * q.x + q.y * q.y;
                *out = if rho2 < r2 {
                    let cupped = surf[0] + spec.cup_depth * (-rho2 / cup_s2).exp();
                    let inner = cupped.min(lc_top - min_gap);
                    if q.z < inner {
                        geometry::BACKGROUND
                    } else if q.z < lc_top {
                        geometry::RNFL
                    } else if q.z < lc_bottom {
                        geometry::LAMINA
                    } else {
                        geometry::BACKGROUND
                    }
                } else {
                    match surf.iter().position(|&s| q.z < s) {
                        Some(i) => i as u8,
                        None => geometry::BACKGROUND,
                    }
                };
            }
            if col[0] != geometry::BACKGROUND || col[nz - 1] != geometry::BACKGROUND {
                return Err(Error::Spec(format!(
                    "phantom layers exceed the volume depth of {} µm at column ({x}, {y})",
                    nz as f64 * sz
                )));
            }
        }
    }
    LabelVolume::new(spec.dims, spec.spacing, labels, Some(spec.bmo_circle()))
}

/// Keeps every layer at least `min(min_gap, nominal thickness)` thick.
fn enforce_order(surf: &mut [f64; 7], thickness: &[f64; 6], min_gap: f64) {
    for i in 1..7 {
        let floor = surf[i - 1] + min_gap.min(thickness[i - 1]);
        if surf[i] < floor {
            surf[i] = floor;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EffectProfile {
    /// RNFL −40%.
    RnflThinning,
    /// Lamina depth +60% and cup depth +80%, RNFL unchanged.
    LcOnly,
    /// Both of the above.
    Combined,
}

impl EffectProfile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rnfl" | "rnfl_thinning" => Some(EffectProfile::RnflThinning),
            "lc" | "lc_only" => Some(EffectProfile::LcOnly),
            "combined" => Some(EffectProfile::Combined),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EffectProfile::RnflThinning => "rnfl",
            EffectProfile::LcOnly => "lc",
            EffectProfile::Combined => "combined",
        }
    }

    /// Mean relative change of the RNFL thickness in glaucoma.
    fn rnfl_change(self) -> f64 {
        match self {
            EffectProfile::LcOnly => 0.0,
            _ => -0.4,
        }
    }

    /// Mean relative changes of the lamina depth and the cup depth.
    fn lc_changes(self) -> (f64, f64) {
        match self {
            EffectProfile::RnflThinning => (0.0, 0.0),
            _ => (0.6, 0.8),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationOptions {
    /// Probability that a subject has a second scan.
    pub second_scan_prob: f64,
    /// Relative spread of every drawn parameter around its healthy mean.
    pub relative_sd: f64,
    /// Standard deviation of the tilt, radians.
    pub tilt_sd: f64,
    pub noise_amplitude: f64,
    /// A-scan grid; the axial voxel count is fitted per phantom.
    pub columns: [usize; 2],
    pub spacing: [f64; 3],
    /// Half width of the per-subject disease severity, a factor on the
    /// profile's mean changes spread evenly over `1 ± severity_spread`.
    pub severity_spread: f64,
}

impl Default for PopulationOptions {
    fn default() -> Self {
        let h = PhantomSpec::healthy();
        PopulationOptions {
            second_scan_prob: 0.0,
            relative_sd: 0.15,
            tilt_sd: 3f64.to_radians(),
            noise_amplitude: 5.0,
            columns: [h.dims[0], h.dims[1]],
            spacing: h.spacing,
            severity_spread: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationMember {
    pub spec: PhantomSpec,
    pub subject_id: String,
    /// 0 for a subject's first scan, 1 for the second.
    pub scan_index: u8,
}

const BMO_RADIUS_RANGE: (f64, f64) = (600.0, 1050.0);
/// Drawn quantities are kept above this fraction of their mean.
const FLOOR_FRACTION: f64 = 0.3;

/// `n` standard normal draws shifted and scaled to sample mean 0 and
/// sample standard deviation 1, so class means match the profile means.
fn standardized_normals(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; n];
    }
    z.iter().map(|v| (v - mean) / sd).collect()
}

/// `n` severities evenly covering `1 ± spread` in random order, with mean
/// exactly 1.
fn even_spread(n: usize, spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + spread * (2.0 * (i as f64 + 0.5) / n as f64 - 1.0))
        .collect();
    v.shuffle(rng);
    v
}

/// Draws `n_subjects` subjects, `round(n·glaucoma_fraction)` of them with
/// glaucoma. Parameters are drawn per class and standardized. Each glaucoma
/// subject scales the profile's changes by a neural (RNFL) and an
/// independent connective tissue (lamina, cup) severity of mean 1, so class
/// means equal the profile means before flooring. A second scan (probability
/// `second_scan_prob`) repeats the subject's anatomy with fresh surface
/// noise and tilt.
pub fn sample_population(
    n_subjects: usize,
    glaucoma_fraction: f64,
    profile: EffectProfile,
    seed: u64,
    opts: &PopulationOptions,
) -> Result<Vec<PopulationMember>> {
    if !(0.0..=1.0).contains(&glaucoma_fraction) {
        return Err(Error::Spec(format!(
            "glaucoma fraction {glaucoma_fraction} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&opts.second_scan_prob) {
        return Err(Error::Spec(format!(
            "second scan probability {} outside [0, 1]",
            opts.second_scan_prob
        )));
    }
    if !(0.0..=1.0).contains(&opts.severity_spread) {
        return Err(Error::Spec(format!(
            "severity spread {} outside [0, 1]",
            opts.severity_spread
        )));
    }
    let n_glaucoma = (n_subjects as f64 * glaucoma_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n_subjects).map(|i| (i < n_glaucoma) as u8).collect();
    labels.shuffle(&mut seed::rng(seed, &[0x1abe1]));

    // Parameter order: 6 layers, cup depth, lc depth, lc thickness, BMO radius.
    const PARAMS: usize = 10;
    let mut healthy = [0.0; PARAMS];
    healthy[..6].copy_from_slice(&HEALTHY_LAYERS.as_array());
    healthy[6] = HEALTHY_CUP_DEPTH;
    healthy[7] = HEALTHY_LC_DEPTH;
    healthy[8] = HEALTHY_LC_THICKNESS;
    healthy[9] = HEALTHY_BMO_RADIUS;
    let (lc_change, cup_change) = profile.lc_changes();
    let mut change = [0.0; PARAMS];
    change[0] = profile.rnfl_change();
    change[6] = cup_change;
    change[7] = lc_change;
    // neural and connective tissue severities are independent
    let family = |p: usize| usize::from(p != 0);

    let mut draws = vec![[0.0; PARAMS]; n_subjects];
    for class in 0..2u8 {
        let members: Vec<usize> = (0..n_subjects).filter(|&i| labels[i] == class).collect();
        let severity: [Vec<f64>; 2] = core::array::from_fn(|f| {
            if class == 0 {
                return vec![0.0; members.len()];
            }
            let mut rng = seed::rng(seed, &[0x5e7e, f as u64]);
            even_spread(members.len(), opts.severity_spread, &mut rng)
        });
        for p in 0..PARAMS {
            let mut rng = seed::rng(seed, &[0xd4a3, class as u64, p as u64]);
            let z = standardized_normals(members.len(), &mut rng);
            let sd = opts.relative_sd * healthy[p];
            for (k, (&i, z)) in members.iter().zip(z).enumerate() {
                let mean = healthy[p] * (1.0 + change[p] * severity[family(p)][k]);
                let class_mean = healthy[p] * (1.0 + change[p] * class as f64);
                draws[i][p] = (mean + sd * z).max(FLOOR_FRACTION * class_mean);
            }
        }
    }

    let tilt = Normal::new(0.0, opts.tilt_sd).map_err(|e| Error::Spec(format!("tilt sd: {e}")))?;
    let mut out = Vec::new();
    for (i, (d, &label)) in draws.iter().zip(&labels).enumerate() {
        let subject_id = format!("S{:04}", i + 1);
        let mut rng = seed::rng(seed, &[0x5cab, i as u64]);
        let scans = if rng.random_bool(opts.second_scan_prob) { 2 } else { 1 };
        for scan in 0..scans {
            let mut spec = PhantomSpec {
                dims: [opts.columns[0], opts.columns[1], 2],
                spacing: opts.spacing,
                bmo_radius: d[9].clamp(BMO_RADIUS_RANGE.0, BMO_RADIUS_RANGE.1),
                layers: Layers {
                    rnfl: d[0],
                    gcl_ipl: d[1],
                    other_retina: d[2],
                    rpe: d[3],
                    choroid: d[4],
                    sclera: d[5],
                },
                cup_depth: d[6],
                lc_depth: d[7],
                lc_thickness: d[8],
                tilt: tilt.sample(&mut rng),
                tilt_azimuth: rng.random_range(0.0..core::f64::consts::TAU),
                noise_amplitude: opts.noise_amplitude,
                seed: seed::derive(seed, &[0x5ca4, i as u64, scan]),
                diagnosis_label: label,
            };
            spec.fit_depth();
            out.push(PopulationMember {
                spec,
                subject_id: subject_id.clone(),
                scan_index: scan as u8,
            });
        }
    }
    Ok(out)
}
