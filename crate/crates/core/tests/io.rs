use wssamnet::io::synth::{synthesize_dataset, write_dataset, SyntheticSpec, MANIFEST_NAME};
use wssamnet::io::{load_manifest, read_field, read_landmarks, read_volume};
use wssamnet::volume::{map_landmark, warp_volume, DEFAULT_INVERSION_ITERS};

#[test]
fn written_dataset_reads_back() {
    let spec = SyntheticSpec { n_cases: 2, seed: 5, ..Default::default() };
    let cases = synthesize_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(&cases, dir.path()).unwrap();
    let records = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(records.len(), 2);
    for ((case, rec), w) in cases.iter().zip(&records).zip(&written) {
        assert_eq!(rec.case_id, case.case_id);
        assert_eq!(rec.case_id, w.case_id);
        assert_eq!(read_volume(&rec.fixed_path).unwrap().data(), case.fixed.data());
        assert_eq!(read_volume(&rec.moving_path).unwrap().data(), case.moving.data());
        assert_eq!(read_field(rec.truth_field_path.as_ref().unwrap()).unwrap(), case.truth_field);
        // landmark files carry six decimals
        for (path, want) in [(&rec.fixed_landmarks_path, &case.fixed_landmarks), (&rec.moving_landmarks_path, &case.moving_landmarks)] {
            let got = read_landmarks(path).unwrap();
            assert_eq!(got.ids(), want.ids());
            for ((_, a), (_, b)) in got.entries().iter().zip(want.entries()) {
                assert!((0..3).all(|k| (a.coords[k] - b.coords[k]).abs() <= 5e-7), "{a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn truth_field_explains_the_pair() {
    for seed in 0..3 {
        let spec = SyntheticSpec { seed, ..Default::default() };
        let case = &synthesize_dataset(&spec).unwrap()[0];
        let u = &case.truth_field;
        let fl = case.fixed_landmarks.to_voxel(&case.fixed);
        let ml = case.moving_landmarks.to_voxel(&case.moving);
        for ((id, pf), (id2, pm)) in fl.entries().iter().zip(ml.entries()) {
            assert_eq!(id, id2);
            let q = map_landmark(*pm, u, DEFAULT_INVERSION_ITERS).unwrap();
            let d = (0..3).map(|a| (q.coords[a] - pf.coords[a]).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.2, "seed {seed} landmark {id}: {d}");
        }
        let back = warp_volume(&case.moving, u).unwrap();
        let n = back.len() as f64;
        let mad = back.data().iter().zip(case.fixed.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let moved = case.moving.data().iter().zip(case.fixed.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        assert!(mad < 0.5 * moved, "seed {seed}: warped residual {mad} vs unregistered {moved}");
    }
}
