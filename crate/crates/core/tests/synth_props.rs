use onh_core::geometry::{extract_boundaries, volume_to_cloud, PointCloud, ANTERIOR_RNFL};
use onh_core::rnfl::{baseline_auc, bmo_radius, rnfl_thickness, RING_FACTOR};
use onh_core::synth::{generate_phantom, sample_population, EffectProfile, PhantomSpec, PopulationOptions};
use onh_core::Error;

fn thickness_of(spec: &PhantomSpec) -> f64 {
    let vol = generate_phantom(spec).unwrap();
    let (cloud, bmo) = volume_to_cloud(&vol, "p", None).unwrap();
    rnfl_thickness(&cloud, &bmo, vol.spacing()).unwrap()
}

fn population_baseline(profile: EffectProfile) -> f64 {
    let opts = PopulationOptions {
        second_scan_prob: 0.6,
        ..PopulationOptions::default()
    };
    let pop = sample_population(120, 0.3, profile, 5, &opts).unwrap();
    let (mut t, mut labels) = (Vec::new(), Vec::new());
    for m in &pop {
        t.push(thickness_of(&m.spec));
        labels.push(m.spec.diagnosis_label);
    }
    baseline_auc(&t, &labels).unwrap().auc
}

#[test]
fn flat_noise_free_phantom_recovers_the_rnfl_thickness() {
    for t in [80.0, 100.0, 120.0] {
        let mut spec = PhantomSpec::healthy();
        spec.layers.rnfl = t;
        spec.fit_depth();
        let got = thickness_of(&spec);
        assert!((got - t).abs() <= spec.spacing[2], "T={t}: {got}");
    }
}

#[test]
fn tilted_phantom_recovers_the_thickness_after_alignment() {
    let mut spec = PhantomSpec::healthy();
    spec.tilt = 30f64.to_radians();
    spec.tilt_azimuth = 0.7;
    spec.fit_depth();
    let got = thickness_of(&spec);
    assert!((got - spec.layers.rnfl).abs() <= 2.0 * spec.spacing[2], "{got}");
}

#[test]
fn phantoms_are_deterministic_and_carry_every_boundary_class() {
    let mut spec = PhantomSpec::healthy();
    spec.noise_amplitude = 5.0;
    spec.tilt = 0.05;
    spec.seed = 77;
    spec.fit_depth();
    let a = generate_phantom(&spec).unwrap();
    assert_eq!(a, generate_phantom(&spec).unwrap());
    let mut seen = [false; 9];
    for p in extract_boundaries(&a) {
        seen[p.class as usize] = true;
    }
    assert!(seen[1..].iter().all(|&s| s), "{seen:?}");
}

#[test]
fn bmo_points_lie_on_the_circle() {
    let mut spec = PhantomSpec::healthy();
    spec.tilt = 0.2;
    spec.fit_depth();
    let vol = generate_phantom(&spec).unwrap();
    let c = spec.bmo_center();
    let half_voxel = spec.spacing[2] / 2.0;
    for p in vol.bmo_points().unwrap() {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        assert!((d - spec.bmo_radius).abs() <= half_voxel);
    }
}

#[test]
fn too_shallow_volume_is_a_spec_error() {
    let mut spec = PhantomSpec::healthy();
    spec.dims[2] = 40;
    assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
}

#[test]
fn missing_rnfl_at_the_ring_is_a_coverage_error() {
    let spec = PhantomSpec::healthy();
    let vol = generate_phantom(&spec).unwrap();
    let (cloud, bmo) = volume_to_cloud(&vol, "p", None).unwrap();
    let ring = RING_FACTOR * bmo_radius(&bmo);
    let stripped = PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| !(p.class == ANTERIOR_RNFL && (p.position[0].hypot(p.position[1]) - ring).abs() < 200.0))
            .copied()
            .collect(),
        ..cloud
    };
    assert!(matches!(
        rnfl_thickness(&stripped, &bmo, vol.spacing()),
        Err(Error::Coverage(_))
    ));
}

#[test]
fn population_counts_and_determinism() {
    let opts = PopulationOptions::default();
    let pop = sample_population(100, 0.5, EffectProfile::Combined, 3, &opts).unwrap();
    assert_eq!(pop.len(), 100);
    assert_eq!(pop.iter().filter(|m| m.spec.diagnosis_label == 1).count(), 50);
    assert_eq!(pop, sample_population(100, 0.5, EffectProfile::Combined, 3, &opts).unwrap());
    assert_ne!(pop, sample_population(100, 0.5, EffectProfile::Combined, 4, &opts).unwrap());
    assert!(sample_population(10, 1.5, EffectProfile::Combined, 3, &opts).is_err());

    let twice = PopulationOptions {
        second_scan_prob: 1.0,
        ..opts
    };
    let pop = sample_population(20, 0.5, EffectProfile::RnflThinning, 3, &twice).unwrap();
    assert_eq!(pop.len(), 40);
    for pair in pop.chunks(2) {
        assert_eq!(pair[0].subject_id, pair[1].subject_id);
        assert_eq!(pair[0].spec.layers, pair[1].spec.layers);
        assert_ne!(pair[0].spec.seed, pair[1].spec.seed);
    }
}

#[test]
fn lc_only_profile_leaves_rnfl_unchanged_on_average() {
    for seed in 0..20 {
        let pop = sample_population(100, 0.5, EffectProfile::LcOnly, seed, &PopulationOptions::default()).unwrap();
        let mean = |label: u8| {
            let v: Vec<f64> = pop
                .iter()
                .filter(|m| m.spec.diagnosis_label == label)
                .map(|m| m.spec.layers.rnfl)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (h, g) = (mean(0), mean(1));
        assert!((h - g).abs() < 0.02 * (h + g) / 2.0, "seed {seed}: {h} vs {g}");
    }
}

#[test]
fn baseline_separates_rnfl_thinning_but_not_lamina_changes() {
    let rnfl = population_baseline(EffectProfile::RnflThinning);
    let lc = population_baseline(EffectProfile::LcOnly);
    assert!(rnfl > 0.9, "{rnfl}");
    assert!(rnfl > lc, "{rnfl} vs {lc}");
}
