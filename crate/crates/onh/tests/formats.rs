use onh::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use onh::volume::{decode_volume, encode_volume};
use onh_core::geometry::{LabelVolume, Point3};
use onh_core::pointnet::{init_params, PointNetConfig};
use proptest::prelude::*;

fn volume() -> impl Strategy<Value = LabelVolume> {
    (1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(nx, ny, nz)| {
            (
                Just([nx, ny, nz]),
                prop::array::uniform3(1.0f32..50.0),
                prop::collection::vec(0u8..8, nx * ny * nz),
                prop::option::of(prop::collection::vec(prop::array::uniform3(-2000.0f32..2000.0), 3..20)),
            )
        })
        .prop_filter_map("collinear BMO points", |(dims, spacing, labels, bmo)| {
            // Values are f32-representable so the file round trip is exact.
            let spacing = spacing.map(f64::from);
            let bmo = bmo.map(|b| b.into_iter().map(|p| p.map(f64::from)).collect::<Vec<Point3>>());
            LabelVolume::new(dims, spacing, labels, bmo).ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn volume_round_trip_is_exact(vol in volume()) {
        let bytes = encode_volume(&vol);
        let back = decode_volume(&bytes).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        prop_assert_eq!(back.spacing(), vol.spacing());
        prop_assert_eq!(back.labels(), vol.labels());
        prop_assert_eq!(back.bmo_points(), vol.bmo_points());
        prop_assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn truncated_volumes_are_errors(vol in volume(), cut in 0.0f64..1.0) {
        let bytes = encode_volume(&vol);
        let n = (bytes.len() as f64 * cut) as usize;
        // The BMO block is an optional trailer, so cutting exactly before it leaves a valid file.
        let bare = LabelVolume::new(vol.dims(), vol.spacing(), vol.labels().to_vec(), None).unwrap();
        if vol.bmo_points().is_some() && n == encode_volume(&bare).len() {
            let back = decode_volume(&bytes[..n]).unwrap();
            prop_assert_eq!(back.bmo_points(), None);
            prop_assert_eq!(back.labels(), vol.labels());
        } else {
            prop_assert!(decode_volume(&bytes[..n]).is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), bits in prop::collection::vec(any::<u32>(), 64), scale in 1.0f64..5000.0) {
        let config = PointNetConfig::tiny();
        let mut params = init_params::<f32>(&config, seed).unwrap();
        // Overwrite a few values with arbitrary bit patterns, NaNs included.
        for ((_, t), chunk) in params.iter_mut().zip(bits.chunks(4)) {
            for (v, &b) in t.data_mut().iter_mut().zip(chunk) {
                *v = f32::from_bits(b);
            }
        }
        let ck = Checkpoint { config, params, scale_um: scale, sample_seed: seed };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(back.scale_um.to_bits(), scale.to_bits());
        prop_assert_eq!(back.sample_seed, seed);
        for ((na, a), (nb, b)) in ck.params.iter().zip(back.params.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_checkpoints_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let config = PointNetConfig::tiny();
        let ck = Checkpoint { params: init_params(&config, 1).unwrap(), config, scale_um: 1000.0, sample_seed: 2 };
        let mut bytes = encode_checkpoint(&ck).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        let _ = decode_checkpoint(&bytes);
        let _ = decode_checkpoint(&bytes[..i]);
    }
}
