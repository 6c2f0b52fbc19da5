mod common;

use std::fs;

use hypernvd::dataio::*;
use hypernvd::diffcore::Tensor;
use hypernvd::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64) -> SynthSceneSpec {
    SynthSceneSpec::centred(32, 6, seed, (1.0, 0.5))
}

#[test]
fn tensor_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Tensor<f32> = common::uniform(&mut rng, &[3, 4, 5], -1e3, 1e3);
    save_tensor(dir.path().join("a.nvdt"), &a).unwrap();
    let back = read_tensor(dir.path().join("a.nvdt")).unwrap();
    assert_eq!(back, AnyTensor::F32(a.clone()));
    let b: Tensor<f64> = common::uniform(&mut rng, &[7], -1.0, 1.0);
    save_tensor(dir.path().join("b.nvdt"), &b).unwrap();
    assert_eq!(load_tensor::<f64>(dir.path().join("b.nvdt")).unwrap(), b);
    // f32 widens exactly.
    let wide: Tensor<f64> = load_tensor(dir.path().join("a.nvdt")).unwrap();
    assert!(wide.data().iter().zip(a.data()).all(|(&w, &n)| w == n as f64));
    let scalar = Tensor::<f32>::scalar(2.5);
    save_tensor(dir.path().join("s.nvdt"), &scalar).unwrap();
    assert_eq!(load_tensor::<f32>(dir.path().join("s.nvdt")).unwrap(), scalar);
}

#[test]
fn truncated_and_foreign_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f32>::filled([4, 4], 1.0);
    let bytes = encode_tensor(&t).unwrap();
    let path = dir.path().join("t.nvdt");
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match read_tensor(&path) {
        Err(Error::TensorFormat { reason, .. }) => assert!(reason.contains("size mismatch"), "{reason}"),
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"PNG\0");
    fs::write(&path, &bad).unwrap();
    match read_tensor(&path) {
        Err(Error::TensorFormat { reason, .. }) => assert!(reason.contains("NVDT"), "{reason}"),
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(decode_tensor(&bad, &path).is_err());
    let mut bad = bytes;
    bad[8] = 7;
    assert!(decode_tensor(&bad, &path).is_err());
    assert!(decode_tensor(b"NVD", &path).is_err());
    assert!(matches!(read_tensor(dir.path().join("missing.nvdt")), Err(Error::Io { .. })));
}

#[test]
fn synthetic_scene_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v1");
    let ds = synth_write(&scene(7), &out).unwrap();
    assert_eq!(ds.id, "v1");
    for name in ["frames.nvdt", "masks.nvdt", "flow_fwd.nvdt", "flow_bwd.nvdt", "frame_0000.png", "mask_0005.png", "scene.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let back = load_video_dataset(&out, 1.0).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn png_frames_match_tensor_frames_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let ds = synth_write(&scene(2), &out).unwrap();
    fs::remove_file(out.join("frames.nvdt")).unwrap();
    fs::remove_file(out.join("masks.nvdt")).unwrap();
    let png = load_video_dataset(&out, 1.0).unwrap();
    assert_eq!(png.frames.shape(), ds.frames.shape());
    let worst = png
        .frames
        .data()
        .iter()
        .chain(png.masks.data())
        .zip(ds.frames.data().iter().chain(ds.masks.data()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
}

#[test]
fn mismatched_dataset_shapes_rejected() {
    let ds = synth_generate(&scene(1)).unwrap();
    let bad_mask = Tensor::<f32>::zeros([6, 32, 31]);
    let err = VideoDataset::new("x", ds.frames.clone(), bad_mask, ds.flow_fwd.clone(), ds.flow_bwd.clone(), 1.0);
    assert!(matches!(err, Err(Error::Dataset(_))));
    let bright = Tensor::<f32>::filled([6, 32, 32, 3], 1.5);
    let err = VideoDataset::new("x", bright, ds.masks.clone(), ds.flow_fwd.clone(), ds.flow_bwd.clone(), 1.0);
    assert!(err.is_err());

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    ds.save(&out).unwrap();
    save_tensor(out.join("masks.nvdt"), &Tensor::<f32>::zeros([6, 16, 16])).unwrap();
    assert!(matches!(load_video_dataset(&out, 1.0), Err(Error::Dataset(_))));
    assert!(load_video_dataset(dir.path().join("nope"), 1.0).is_err());
}

#[test]
fn sprite_moves_rigidly_along_its_path() {
    let spec = scene(3);
    let ds = synth_generate(&spec).unwrap();
    let (h, w) = (ds.height(), ds.width());
    let mut areas = Vec::new();
    for t in 0..ds.frame_count() {
        let (mut sum, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..h {
            for c in 0..w {
                let m = ds.mask(t, r, c) as f64;
                sum += m;
                sx += m * c as f64;
                sy += m * r as f64;
            }
        }
        let (cx, cy) = spec.centre(t);
        assert!((sx / sum - cx).abs() < 0.5 && (sy / sum - cy).abs() < 0.5, "frame {t}");
        areas.push(sum);
    }
    assert!(areas.iter().all(|a| (a - areas[0]).abs() < 1e-3 * areas[0]), "{areas:?}");
}

#[test]
fn generated_flows_pass_the_gate() {
    for seed in 0..4 {
        let ds = synth_generate(&SynthSceneSpec::centred(64, 8, seed, (1.0, 0.5))).unwrap();
        let cov = gate_coverage(&ds);
        assert!(cov >= 0.99, "seed {seed}: {cov}");
    }
}

#[test]
fn scenes_are_seeded() {
    assert_eq!(synth_generate(&scene(5)).unwrap(), synth_generate(&scene(5)).unwrap());
    assert_ne!(synth_generate(&scene(5)).unwrap().frames, synth_generate(&scene(6)).unwrap().frames);
    let mut bad = scene(1);
    bad.velocity = (20.0, 0.0);
    assert!(synth_generate(&bad).is_err());
}

#[test]
fn batches_are_deterministic_and_in_range() {
    let ds = synth_generate(&scene(4)).unwrap();
    let a: PointBatch<f32> = sample_point_batch(&ds, 256, 8, 3, &mut iteration_rng(9, 3)).unwrap();
    let b: PointBatch<f32> = sample_point_batch(&ds, 256, 8, 3, &mut iteration_rng(9, 3)).unwrap();
    assert_eq!(a.coords, b.coords);
    assert_eq!(a.flow_coords, b.flow_coords);
    assert_eq!(a.patch_t2, b.patch_t2);
    let c: PointBatch<f32> = sample_point_batch(&ds, 256, 8, 3, &mut iteration_rng(9, 4)).unwrap();
    assert_ne!(a.coords, c.coords);
    for t in [&a.coords, &a.flow_coords, &a.patch_t1, &a.patch_t2] {
        assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }
    assert_eq!(a.coords.shape(), &[768, 3]);
    assert_eq!(a.flow_coords.shape(), &[512, 3]);
    assert_eq!(a.patch_t1.shape(), &[72, 3]);
    assert!(a.flow_gate.iter().zip(&a.flow_included).all(|(&g, &i)| !g || i));
}

#[test]
fn batch_samples_match_the_dataset() {
    let ds = synth_generate(&scene(8)).unwrap();
    let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
    let b: PointBatch<f64> = sample_point_batch(&ds, 64, 2, 3, &mut iteration_rng(1, 0)).unwrap();
    let n = b.n;
    for i in 0..n {
        let p = b.coords.row(i);
        let c = ((p[0] + 1.0) / 2.0 * (w - 1) as f64).round() as usize;
        let r = ((p[1] + 1.0) / 2.0 * (h - 1) as f64).round() as usize;
        assert_eq!(((p[2] + 1.0) / 2.0 * (f - 1) as f64).round() as usize, b.frames[i]);
        let rgb = ds.color(b.frames[i], r, c);
        for k in 0..3 {
            assert!((b.color.row(i)[k] - rgb[k] as f64).abs() < 1e-7);
        }
        assert_eq!(b.grad_valid[i], c + 1 < w && r + 1 < h);
        // Right neighbour is one pixel over (clamped at the border).
        let px = b.coords.row(n + i);
        assert!((px[0] - p[0] - if c + 1 < w { 2.0 / (w - 1) as f64 } else { 0.0 }).abs() < 1e-12);
    }
    // The two residual patches share pixel positions in distinct frames.
    for j in 0..9 {
        let (a, c) = (b.patch_t1.row(j), b.patch_t2.row(j));
        assert_eq!((a[0], a[1]), (c[0], c[1]));
        assert_ne!(a[2], c[2]);
    }
}

#[test]
fn frame_sampling_is_uniform() {
    let ds = synth_generate(&SynthSceneSpec::centred(16, 8, 1, (0.5, 0.25))).unwrap();
    let n = 100_000;
    let b: PointBatch<f32> = sample_point_batch(&ds, n, 1, 3, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut counts = [0usize; 8];
    for &t in &b.frames {
        counts[t] += 1;
    }
    let p = 1.0 / 8.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn sampling_errors() {
    let ds = synth_generate(&scene(1)).unwrap();
    assert!(sample_point_batch::<f32, _>(&ds, 0, 1, 3, &mut iteration_rng(0, 0)).is_err());
    assert!(sample_point_batch::<f32, _>(&ds, 4, 1, 33, &mut iteration_rng(0, 0)).is_err());
}

#[test]
fn iteration_streams_are_independent_of_history() {
    use rand::Rng;
    let a: u64 = iteration_rng(3, 17).random();
    let mut r = iteration_rng(3, 16);
    let _: u64 = r.random();
    let b: u64 = iteration_rng(3, 17).random();
    assert_eq!(a, b);
    assert_ne!(a, iteration_rng(3, 16).random::<u64>());
    assert_ne!(a, iteration_rng(4, 17).random::<u64>());
}

#[test]
fn png_io_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..5 * 4 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
    write_png(dir.path().join("x.png"), 5, 4, 3, &data).unwrap();
    let (w, h, c, back) = read_png(dir.path().join("x.png")).unwrap();
    assert_eq!((w, h, c), (5, 4, 3));
    assert!(back.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(write_png(dir.path().join("y.png"), 1, 1, 2, &[0.0f32, 0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_tensor_round_trips(dims in proptest::collection::vec(1usize..6, 0..4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tensor<f64> = common::uniform(&mut rng, &dims, -1e6, 1e6);
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(decode_tensor(&bytes, "mem".as_ref()).unwrap(), AnyTensor::F64(t));
    }

    #[test]
    fn masks_stay_in_unit_interval(seed in 0u64..200) {
        let ds = synth_generate(&SynthSceneSpec::centred(24, 3, seed, (1.0, -1.0))).unwrap();
        prop_assert!(ds.masks.data().iter().all(|m| (0.0..=1.0).contains(m)));
        prop_assert!(ds.masks.data().iter().any(|&m| m == 1.0));
    }
}
