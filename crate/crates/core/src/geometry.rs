//! Label volumes to aligned, sampled, feature-encoded point clouds.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pointnet::BOUNDARY_CLASSES;
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Number of distinct voxel labels, background included.
pub const LABEL_COUNT: u8 = 8;

pub const BACKGROUND: u8 = 0;
pub const RNFL: u8 = 1;
pub const GCL_IPL: u8 = 2;
pub const OTHER_RETINA: u8 = 3;
pub const RPE: u8 = 4;
pub const CHOROID: u8 = 5;
pub const SCLERA: u8 = 6;
pub const LAMINA: u8 = 7;

/// Boundary class of the anterior RNFL surface. Posterior surfaces of label
/// `l` get class `l + 1`.
pub const ANTERIOR_RNFL: u8 = 1;
pub const POSTERIOR_RNFL: u8 = 2;

/// Default coordinate scale of [`encode_features`]: micrometers to millimeters.
pub const DEFAULT_SCALE_UM: f64 = 1000.0;
pub const DEFAULT_MAX_ANGLE: f64 = 15.0 * core::f64::consts::PI / 180.0;
pub const DEFAULT_MAX_SHIFT_MM: f64 = 0.2;

pub type Point3 = [f64; 3];

/// Voxel grid of tissue labels. Labels are stored z-fastest:
/// `labels[(x * ny + y) * nz + z]`. Voxel `(i, j, k)` is centered at
/// `(i·sx, j·sy, k·sz)` micrometers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
    bmo_points: Option<Vec<Point3>>,
}

impl LabelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        labels: Vec<u8>,
        bmo_points: Option<Vec<Point3>>,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "label volume",
                lhs: dims.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = labels.iter().position(|&l| l >= LABEL_COUNT) {
            return Err(Error::Data(format!("label {} at voxel {i} exceeds 7", labels[i])));
        }
        if let Some(b) = &bmo_points {
            check_landmarks(b)?;
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
            bmo_points,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn bmo_points(&self) -> Option<&[Point3]> {
        self.bmo_points.as_deref()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    /// The A-scan at `(x, y)`, anterior first.
    pub fn column(&self, x: usize, y: usize) -> &[u8] {
        let start = self.index(x, y, 0);
        &self.labels[start..start + self.dims[2]]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3 {
        [
            x as f64 * self.spacing[0],
            y as f64 * self.spacing[1],
            z as f64 * self.spacing[2],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPoint {
    pub position: Point3,
    /// 1 anterior RNFL, 2..=8 posterior surface of labels 1..=7.
    pub class: u8,
}

/// Boundary points in the BMO-centered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<BoundaryPoint>,
    pub source_id: String,
    pub label: Option<u8>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// All boundary voxels, column by column.
pub fn extract_boundaries(vol: &LabelVolume) -> Vec<BoundaryPoint> {
    let [nx, ny, _] = vol.dims;
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            let col = vol.column(x, y);
            for (z, pair) in col.windows(2).enumerate() {
                let (a, b) = (pair[0], pair[1]);
                if a == b {
                    continue;
                }
                if a != BACKGROUND {
                    out.push(BoundaryPoint {
                        position: vol.voxel_center(x, y, z),
                        class: a + 1,
                    });
                }
                if a == BACKGROUND && b == RNFL {
                    out.push(BoundaryPoint {
                        position: vol.voxel_center(x, y, z + 1),
                        class: ANTERIOR_RNFL,
                    });
                }
            }
        }
    }
    out
}

/// BMO landmarks: the stored points when present, otherwise the RPE
/// terminations bordering the opening in each B-scan.
pub fn estimate_bmo_points(vol: &LabelVolume) -> Result<Vec<Point3>> {
    if let Some(b) = &vol.bmo_points {
        return Ok(b.clone());
    }
    let [nx, ny, _] = vol.dims;
    let mut out = Vec::new();
    for y in 0..ny {
        // mean z of the RPE voxels per column, None where there is no RPE
        let rpe_z: Vec<Option<f64>> = (0..nx)
            .map(|x| {
                let (sum, n) = vol
                    .column(x, y)
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == RPE)
                    .fold((0usize, 0usize), |(s, n), (z, _)| (s + z, n + 1));
                (n > 0).then(|| sum as f64 / n as f64)
            })
            .collect();
        // widest interior gap bounded by RPE on both sides
        let mut best: Option<(usize, usize)> = None;
        let mut last_rpe: Option<usize> = None;
        for (x, z) in rpe_z.iter().enumerate() {
            if z.is_none() {
                continue;
            }
            if let Some(l) = last_rpe {
                if x > l + 1 && best.is_none_or(|(a, b)| x - l > b - a) {
                    best = Some((l, x));
                }
            }
            last_rpe = Some(x);
        }
        if let Some((l, r)) = best {
            for x in [l, r] {
                let z = rpe_z[x].unwrap();
                out.push([
                    x as f64 * vol.spacing[0],
                    y as f64 * vol.spacing[1],
                    z * vol.spacing[2],
                ]);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Landmark("no opening found in the RPE".into()));
    }
    check_landmarks(&out)?;
    Ok(out)
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p));
    sum / points.len() as f64
}

/// Centroid and eigen-decomposition of the centered second moment.
fn plane_fit(points: &[Point3]) -> (Vector3<f64>, SymmetricEigen<f64, nalgebra::U3>) {
    let c = centroid(points);
    let mut m = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        m += d * d.transpose();
    }
    (c, SymmetricEigen::new(m / points.len() as f64))
}

fn check_landmarks(points: &[Point3]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Landmark(format!(
            "need at least 3 BMO points, got {}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Landmark("non-finite BMO point".into()));
    }
    let (_, eig) = plane_fit(points);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    if ev[1] <= 1e-12 * ev[2].max(f64::MIN_POSITIVE) {
        return Err(Error::Landmark("BMO points are collinear".into()));
    }
    Ok(())
}

/// Rigid transform `p ↦ R·(p − c)` taking the BMO set to the z=0 plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub center: Point3,
    pub rotation: Matrix3<f64>,
}

impl Alignment {
    pub fn fit(bmo: &[Point3]) -> Result<Self> {
        check_landmarks(bmo)?;
        let (c, eig) = plane_fit(bmo);
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let mut n: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
        // keep the volume's posterior direction pointing to +z
        if n.z < 0.0 {
            n = -n;
        }
        let z = Vector3::z();
        let rotation = if (n - z).norm() < 1e-15 {
            Matrix3::identity()
        } else {
            let axis = n.cross(&z);
            let s = axis.norm();
            if s < 1e-15 {
                // only reachable for n ≈ −z, excluded by the sign choice
                Matrix3::identity()
            } else {
                let angle = s.atan2(n.dot(&z));
                *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
            }
        };
        Ok(Alignment {
            center: c.into(),
            rotation,
        })
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let v = self.rotation * (Vector3::from(p) - Vector3::from(self.center));
        v.into()
    }
}

/// Translates the BMO centroid to the origin and rotates its best-fit plane
/// normal onto +z.
pub fn align_to_bmo(points: &[BoundaryPoint], bmo: &[Point3]) -> Result<Vec<BoundaryPoint>> {
    let t = Alignment::fit(bmo)?;
    Ok(points
        .iter()
        .map(|p| BoundaryPoint {
            position: t.apply(p.position),
            class: p.class,
        })
        .collect())
}

/// Volume to aligned cloud: extract, locate BMO, align.
pub fn volume_to_cloud(
    vol: &LabelVolume,
    source_id: &str,
    label: Option<u8>,
) -> Result<(PointCloud, Vec<Point3>)> {
    let points = extract_boundaries(vol);
    let bmo = estimate_bmo_points(vol)?;
    let t = Alignment::fit(&bmo)?;
    let points = points
        .iter()
        .map(|p| BoundaryPoint {
            position: t.apply(p.position),
            class: p.class,
        })
        .collect();
    let bmo = bmo.iter().map(|&p| t.apply(p)).collect();
    Ok((
        PointCloud {
            points,
            source_id: source_id.into(),
            label,
        },
        bmo,
    ))
}

/// Uniform sample of `s` points without replacement, in sampled order.
pub fn subsample(cloud: &PointCloud, s: usize, seed: u64) -> Result<PointCloud> {
    let n = cloud.points.len();
    if n < s {
        return Err(Error::Data(format!(
            "cloud {} has {n} points, {} short of the requested {s}",
            cloud.source_id,
            s - n
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    let idx = rand::seq::index::sample(&mut rng, n, s);
    Ok(PointCloud {
        points: idx.iter().map(|i| cloud.points[i]).collect(),
        source_id: cloud.source_id.clone(),
        label: cloud.label,
    })
}

/// `[S×11]` rows of `[x/scale, y/scale, z/scale, onehot₈(class)]`.
pub fn encode_features<T: Real>(cloud: &PointCloud, scale: f64) -> Result<Tensor<T>> {
    let d = 3 + BOUNDARY_CLASSES;
    let mut data = vec![T::zero(); cloud.points.len() * d];
    for (row, p) in data.chunks_mut(d).zip(&cloud.points) {
        if !(1..=BOUNDARY_CLASSES as u8).contains(&p.class) {
            return Err(Error::Data(format!("boundary class {} outside 1..=8", p.class)));
        }
        for (o, &v) in row.iter_mut().zip(&p.position) {
            *o = T::lit(v / scale);
        }
        row[2 + p.class as usize] = T::one();
    }
    Tensor::new(&[cloud.points.len(), d], data)
}

/// Rotation about x, then y, then z.
pub fn rotation_xyz(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), az)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), ay)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), ax);
    *r.matrix()
}

/// Random rigid motion of the spatial columns of each cloud in a
/// `[B×S×D]` batch. Columns 3.. are copied untouched.
pub fn augment_rigid<T: Real>(
    batch: &Tensor<T>,
    seed: u64,
    max_angle: f64,
    max_shift: f64,
) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 3 || s[2] < 3 {
        return Err(Error::Dimension {
            op: "augment_rigid",
            lhs: s.to_vec(),
            rhs: vec![3],
        });
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut out = batch.clone();
    if max_angle == 0.0 && max_shift == 0.0 {
        return Ok(out);
    }
    let data = out.data_mut();
    for (i, cloud) in data.chunks_mut(n * d).enumerate().take(b) {
        let mut rng = seed::rng(seed, &[i as u64]);
        let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let (ax, ay, az) = (draw(max_angle), draw(max_angle), draw(max_angle));
        let t = Vector3::new(draw(max_shift), draw(max_shift), draw(max_shift));
        let r = rotation_xyz(ax, ay, az);
        for row in cloud.chunks_mut(d) {
            let p = Vector3::new(row[0].as_f64(), row[1].as_f64(), row[2].as_f64());
            let q = r * p + t;
            for (o, v) in row.iter_mut().zip(q.iter()) {
                *o = T::lit(*v);
            }
        }
    }
    Ok(out)
}
