//! Manifests resolved to aligned point clouds, on disk or in memory.

use std::fs;
use std::path::{Path, PathBuf};

use onh_core::geometry::{volume_to_cloud, LabelVolume, Point3, PointCloud};
use onh_core::rnfl::rnfl_thickness;
use onh_core::split::{DatasetManifest, ManifestRow};
use onh_core::synth::{generate_phantom, sample_population, EffectProfile, PopulationOptions};

use crate::error::{io_err, Error, Result};
use crate::tables::write_manifest;
use crate::volume::{read_volume, write_volume};

/// Scans of a manifest with their aligned clouds. `clouds[i]`, `bmo[i]`
/// and `spacing[i]` belong to manifest row `i`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clouds: Vec<PointCloud>,
    /// Aligned BMO points.
    pub bmo: Vec<Vec<Point3>>,
    pub spacing: Vec<[f64; 3]>,
}

impl Dataset {
    pub fn from_volumes(manifest: DatasetManifest, volumes: &[LabelVolume]) -> Result<Self> {
        let mut clouds = Vec::with_capacity(volumes.len());
        let mut bmo = Vec::with_capacity(volumes.len());
        let mut spacing = Vec::with_capacity(volumes.len());
        for (row, vol) in manifest.rows().iter().zip(volumes) {
            let (c, b) = volume_to_cloud(vol, &row.path, Some(row.label))
                .map_err(|e| context(&row.path, e))?;
            clouds.push(c);
            bmo.push(b);
            spacing.push(vol.spacing());
        }
        Ok(Dataset {
            manifest,
            clouds,
            bmo,
            spacing,
        })
    }

    /// Reads every volume of the manifest; relative paths are resolved
    /// against the manifest's directory.
    pub fn load(manifest_path: &Path, manifest: DatasetManifest) -> Result<Self> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut volumes = Vec::with_capacity(manifest.len());
        for row in manifest.rows() {
            volumes.push(read_volume(&resolve(base, &row.path))?);
        }
        Self::from_volumes(manifest, &volumes)
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Ring RNFL thickness of every scan.
    pub fn thickness(&self) -> Result<Vec<f64>> {
        self.clouds
            .iter()
            .zip(&self.bmo)
            .zip(&self.spacing)
            .map(|((c, b), s)| rnfl_thickness(c, b, *s).map_err(|e| context(&c.source_id, e)))
            .collect()
    }
}

fn context(path: &str, e: onh_core::Error) -> Error {
    Error::Core(match e {
        onh_core::Error::Landmark(m) => onh_core::Error::Landmark(format!("{path}: {m}")),
        onh_core::Error::Coverage(m) => onh_core::Error::Coverage(format!("{path}: {m}")),
        onh_core::Error::Data(m) => onh_core::Error::Data(format!("{path}: {m}")),
        other => other,
    })
}

pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// File name of a synthetic scan.
pub fn scan_file_name(subject_id: &str, scan_index: u8) -> String {
    format!("{subject_id}_{}.onhv", scan_index + 1)
}

/// A synthetic population as a manifest plus its volumes.
pub fn synthetic_volumes(
    n_subjects: usize,
    glaucoma_fraction: f64,
    profile: EffectProfile,
    seed: u64,
    opts: &PopulationOptions,
) -> Result<(DatasetManifest, Vec<LabelVolume>)> {
    let members = sample_population(n_subjects, glaucoma_fraction, profile, seed, opts)?;
    let mut rows = Vec::with_capacity(members.len());
    let mut volumes = Vec::with_capacity(members.len());
    for m in &members {
        volumes.push(generate_phantom(&m.spec)?);
        rows.push(ManifestRow {
            path: scan_file_name(&m.subject_id, m.scan_index),
            subject_id: m.subject_id.clone(),
            label: m.spec.diagnosis_label,
        });
    }
    Ok((DatasetManifest::new(rows)?, volumes))
}

/// Writes the population's volumes and `manifest.csv` into `dir`.
pub fn write_synthetic(
    dir: &Path,
    n_subjects: usize,
    glaucoma_fraction: f64,
    profile: EffectProfile,
    seed: u64,
    opts: &PopulationOptions,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, volumes) = synthetic_volumes(n_subjects, glaucoma_fraction, profile, seed, opts)?;
    for (row, vol) in manifest.rows().iter().zip(&volumes) {
        write_volume(&dir.join(&row.path), vol)?;
    }
    write_manifest(&dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
