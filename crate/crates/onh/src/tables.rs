//! CSV files: manifests, point clouds, training history, ROC curves and
//! cross-validation folds.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use onh_core::cv::CvReport;
use onh_core::geometry::{BoundaryPoint, PointCloud};
use onh_core::metrics::RocResult;
use onh_core::split::{DatasetManifest, ManifestRow};
use onh_core::train::EpochRecord;

use crate::error::{io_err, Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(csv::Reader::from_reader(f))
}

fn expect_header(r: &mut csv::Reader<File>, path: &Path, header: &[&str]) -> Result<()> {
    let got = r.headers()?;
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Csv(format!(
            "{}: header {:?}, expected {}",
            path.display(),
            got.iter().collect::<Vec<_>>(),
            header.join(",")
        )));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec[i].trim().parse().map_err(|_| {
        Error::Csv(format!("{}:{line}: bad value {:?}", path.display(), &rec[i]))
    })
}

pub const MANIFEST_HEADER: [&str; 3] = ["path", "subject_id", "label"];

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in m.rows() {
        w.write_record([r.path.as_str(), r.subject_id.as_str(), &r.label.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut r = reader(path)?;
    expect_header(&mut r, path, &MANIFEST_HEADER)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(ManifestRow {
            path: rec[0].to_string(),
            subject_id: rec[1].to_string(),
            label: field(&rec, 2, path)?,
        });
    }
    Ok(DatasetManifest::new(rows)?)
}

pub const CLOUD_HEADER: [&str; 4] = ["x_um", "y_um", "z_um", "class"];

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(CLOUD_HEADER)?;
    for p in &cloud.points {
        let [x, y, z] = p.position;
        w.write_record([x.to_string(), y.to_string(), z.to_string(), p.class.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_cloud(path: &Path, source_id: &str) -> Result<PointCloud> {
    let mut r = reader(path)?;
    expect_header(&mut r, path, &CLOUD_HEADER)?;
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        points.push(BoundaryPoint {
            position: [field(&rec, 0, path)?, field(&rec, 1, path)?, field(&rec, 2, path)?],
            class: field(&rec, 3, path)?,
        });
    }
    Ok(PointCloud {
        points,
        source_id: source_id.to_string(),
        label: None,
    })
}

pub const HISTORY_HEADER: [&str; 3] = ["epoch", "train_loss", "val_auc"];

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.train_loss.to_string(), h.val_auc.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

pub const ROC_HEADER: [&str; 3] = ["threshold", "fpr", "tpr"];

pub fn write_roc(path: &Path, roc: &RocResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(ROC_HEADER)?;
    for ((t, f), p) in roc.thresholds.iter().zip(&roc.fpr).zip(&roc.tpr) {
        w.write_record([t.to_string(), f.to_string(), p.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

pub const FOLDS_HEADER: [&str; 7] = [
    "fold",
    "auc",
    "best_epoch",
    "train_scans",
    "val_scans",
    "test_scans",
    "test_glaucoma",
];

/// One row per fold, then `mean` and `sd` rows.
pub fn write_folds(path: &Path, report: &CvReport, labels: &[u8]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(FOLDS_HEADER)?;
    for f in &report.folds {
        let glaucoma = f.test.iter().filter(|&&i| labels[i] == 1).count();
        w.write_record([
            f.fold.to_string(),
            f.roc.auc.to_string(),
            f.best_epoch.to_string(),
            f.train.len().to_string(),
            f.val.len().to_string(),
            f.test.len().to_string(),
            glaucoma.to_string(),
        ])?;
    }
    w.write_record(["mean", &report.mean_auc.to_string(), "", "", "", "", ""])?;
    w.write_record(["sd", &report.sd_auc.to_string(), "", "", "", "", ""])?;
    w.flush().map_err(io_err(path))
}

/// Plain text writer used for summaries.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_and_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(vec![
            ManifestRow { path: "a.onhv".into(), subject_id: "S1".into(), label: 0 },
            ManifestRow { path: "b,c.onhv".into(), subject_id: "S2".into(), label: 1 },
        ])
        .unwrap();
        let p = dir.path().join("m.csv");
        write_manifest(&p, &m).unwrap();
        assert_eq!(read_manifest(&p).unwrap().rows(), m.rows());

        let cloud = PointCloud {
            points: vec![
                BoundaryPoint { position: [0.1 + 0.2, -3.5, 1e-7], class: 1 },
                BoundaryPoint { position: [1.0, 2.0, 3.0], class: 8 },
            ],
            source_id: "c".into(),
            label: None,
        };
        let p = dir.path().join("c.csv");
        write_cloud(&p, &cloud).unwrap();
        assert_eq!(read_cloud(&p, "c").unwrap(), cloud);
    }

    #[test]
    fn bad_manifest_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "file,subject,label\na,S,0\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Csv(_))));
    }
}
