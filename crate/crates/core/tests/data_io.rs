use std::path::PathBuf;

use manifold_flow::data::{
    decode_field, encode_field, odf_profile, read_field, read_manifest, split_indices, synth_group_study, synth_paired, synth_spd_field,
    synth_texture_pair, symmetric_directions, window_covariance, write_field, write_manifest, GroupStudyConfig, ManifestEntry, PairedConfig,
    RawArray, Split,
};
use manifold_flow::data::Group;
use manifold_flow::linalg::{self, Mat};
use manifold_flow::{ChartKind, Error, Field, ManifoldKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spd_eigenvalues(p: &[f64]) -> Vec<f64> {
    linalg::sym_eigen(&Mat::from_vec(3, 3, p.to_vec())).unwrap().0
}

#[test]
fn field_round_trip_is_bitwise() {
    let f = synth_spd_field(3, &[3, 2, 2], 2, 0.4, 3).unwrap();
    let bytes = encode_field(&f);
    let back = decode_field(&bytes).unwrap();
    assert_eq!(back, f);
    assert_eq!(encode_field(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/f.mfld");
    write_field(&path, &f).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(read_field(&path).unwrap(), f);

    let arr = RawArray::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
    assert_eq!(RawArray::decode(&arr.encode()).unwrap(), arr);
    assert!(RawArray::decode(&bytes).is_err());
}

#[test]
fn damaged_field_files_are_rejected() {
    let f = Field::constant(ManifoldKind::positive_reals(), vec![2, 2], 1, &[2.0]).unwrap();
    let bytes = encode_field(&f);
    assert!(matches!(decode_field(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    assert!(matches!(decode_field(&bytes[..7]), Err(Error::Format { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(matches!(decode_field(&bad), Err(Error::Format { pos: 0, .. })));

    let mut version = bytes.clone();
    version[4] = 7;
    assert!(matches!(decode_field(&version), Err(Error::Version { found: 7, .. })));

    let mut negative = bytes.clone();
    let at = negative.len() - 8;
    negative[at..].copy_from_slice(&(-1.0f64).to_le_bytes());
    assert!(matches!(decode_field(&negative), Err(Error::InvalidPoint(_))));
}

#[test]
fn fully_smooth_spd_field_is_constant() {
    let f = synth_spd_field(4, &[3, 3], 1, 1.0, 3).unwrap();
    let first = f.point(0, 0).to_vec();
    for p in f.points() {
        for (a, b) in p.iter().zip(&first) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn spd_field_eigenvalues_are_bounded_and_seeds_differ() {
    for seed in 0..5 {
        let f = synth_spd_field(seed, &[4, 4, 4], 1, 0.3, 3).unwrap();
        for p in f.points() {
            for e in spd_eigenvalues(p) {
                assert!((0.1..=10.0).contains(&e), "{e}");
            }
        }
    }
    let (a, b) = (synth_spd_field(1, &[4, 4], 1, 0.3, 3).unwrap(), synth_spd_field(2, &[4, 4], 1, 0.3, 3).unwrap());
    assert_ne!(a, b);
    assert_eq!(a, synth_spd_field(1, &[4, 4], 1, 0.3, 3).unwrap());
    assert!(synth_spd_field(1, &[4, 4], 1, 1.5, 3).is_err());
}

#[test]
fn paired_targets_are_unit_nonnegative_profiles() {
    let cfg = PairedConfig { grid: vec![3, 3, 3], count: 4, noise: 0.0, ..PairedConfig::default() };
    let data = synth_paired(11, &cfg).unwrap();
    assert_eq!(data.len(), 4);
    for pair in &data.pairs {
        assert_eq!(pair.target.manifold().kind(), manifold_flow::geometry::Kind::Sphere(12));
        for p in pair.target.points() {
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn profile_is_scale_invariant_and_rotation_equivariant() {
    let dirs = symmetric_directions(12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spd = ManifoldKind::spd(3, ChartKind::MatrixLog).unwrap();
    for _ in 0..20 {
        let d = spd.random_point(&mut rng, 0.8);
        let base = odf_profile(&dirs, &d);
        let scaled: Vec<f64> = d.iter().map(|v| v * 3.7).collect();
        for (a, b) in base.iter().zip(odf_profile(&dirs, &scaled)) {
            assert!((a - b).abs() < 1e-12);
        }

        let axis: Vec<f64> = {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let angle: f64 = rng.random_range(0.0..3.0);
        let k = Mat::from_vec(3, 3, vec![0.0, -axis[2], axis[1], axis[2], 0.0, -axis[0], -axis[1], axis[0], 0.0]);
        let r = Mat::identity(3).add(&k.scale(angle.sin())).add(&k.matmul(&k).scale(1.0 - angle.cos()));
        let dm = Mat::from_vec(3, 3, d.clone());
        let rotated = r.matmul(&dm).matmul(&r.transpose()).into_data();
        let rdirs: Vec<[f64; 3]> = dirs
            .iter()
            .map(|u| {
                let mut o = [0.0; 3];
                for i in 0..3 {
                    o[i] = (0..3).map(|j| r[(i, j)] * u[j]).sum();
                }
                o
            })
            .collect();
        for (a, b) in base.iter().zip(odf_profile(&rdirs, &rotated)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn constant_texture_gives_regularizer_only() {
    let t = Field::constant(ManifoldKind::positive_reals(), vec![8, 8], 3, &[2.5]).unwrap();
    let cov = window_covariance(&t).unwrap();
    for p in cov.points() {
        let expect = [1e-4, 0.0, 0.0, 0.0, 1e-4, 0.0, 0.0, 0.0, 1e-4];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn window_covariance_matches_brute_force() {
    let data = synth_texture_pair(5, &[8, 9], 2).unwrap();
    assert_eq!(data.len(), 2);
    for pair in &data.pairs {
        let t = &pair.target;
        for r in 0..8i64 {
            for c in 0..9i64 {
                let mut samples: Vec<[f64; 3]> = Vec::new();
                for rr in r - 1..=r + 1 {
                    for cc in c - 1..=c + 1 {
                        if (0..8).contains(&rr) && (0..9).contains(&cc) {
                            let l = (rr * 9 + cc) as usize;
                            samples.push([t.point(l, 0)[0], t.point(l, 1)[0], t.point(l, 2)[0]]);
                        }
                    }
                }
                let k = samples.len() as f64;
                let got = pair.source.point((r * 9 + c) as usize, 0);
                for i in 0..3 {
                    for j in 0..3 {
                        let mi = samples.iter().map(|s| s[i]).sum::<f64>() / k;
                        let mj = samples.iter().map(|s| s[j]).sum::<f64>() / k;
                        let mut v = samples.iter().map(|s| (s[i] - mi) * (s[j] - mj)).sum::<f64>() / k;
                        if i == j {
                            v += 1e-4;
                        }
                        assert!((got[i * 3 + j] - v).abs() < 1e-12);
                    }
                }
            }
        }
    }
    assert!(synth_texture_pair(5, &[4, 9], 1).is_err());
}

#[test]
fn split_is_disjoint_exhaustive_and_deterministic() {
    let (train, test) = split_indices(1065, 0.8, 3).unwrap();
    assert_eq!((train.len(), test.len()), (852, 213));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1065).collect::<Vec<_>>());
    assert_eq!(split_indices(1065, 0.8, 3).unwrap(), (train.clone(), test));
    assert_ne!(split_indices(1065, 0.8, 4).unwrap().0, train);
    assert!(matches!(split_indices(1, 0.5, 0), Err(Error::EmptySplit(_))));
    assert!(matches!(split_indices(3, 0.01, 0), Err(Error::EmptySplit(_))));
}

#[test]
fn generators_are_deterministic() {
    let cfg = PairedConfig { grid: vec![2, 2, 2], count: 3, ..PairedConfig::default() };
    assert_eq!(synth_paired(9, &cfg).unwrap(), synth_paired(9, &cfg).unwrap());
    assert_ne!(synth_paired(9, &cfg).unwrap(), synth_paired(10, &cfg).unwrap());
    assert_eq!(synth_texture_pair(2, &[8, 8], 1).unwrap(), synth_texture_pair(2, &[8, 8], 1).unwrap());
    let gs = GroupStudyConfig { per_group: 3, ..GroupStudyConfig::default() };
    let a = synth_group_study(4, &cfg, &gs).unwrap();
    assert_eq!(a, synth_group_study(4, &cfg, &gs).unwrap());
    assert_eq!(a.dataset.pairs.iter().filter(|p| p.group == Some(Group::B)).count(), 3);
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    let entries = vec![
        ManifestEntry { source: PathBuf::from("s0.mfld"), target: PathBuf::from("t0.mfld"), group: Some(Group::A), split: Split::Train },
        ManifestEntry { source: PathBuf::from("s1.mfld"), target: PathBuf::from("t1.mfld"), group: None, split: Split::Test },
    ];
    write_manifest(&path, &entries).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].source, dir.path().join("s0.mfld"));
    assert_eq!((back[0].group, back[0].split), (Some(Group::A), Split::Train));
    assert_eq!((back[1].group, back[1].split), (None, Split::Test));

    std::fs::write(&path, "source\ttarget\tgroup\tsplit\na\tb\tC\ttrain\n").unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::Format { .. })));
}
