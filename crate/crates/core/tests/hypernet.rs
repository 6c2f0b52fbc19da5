mod common;

use common::small_arch;
use hypernvd::dataio::{synth_generate, SynthSceneSpec, VideoDataset};
use hypernvd::diffcore::{ParamStore, Tape, Tensor};
use hypernvd::hypernet::*;
use hypernvd::model::NvdArch;
use hypernvd::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn built(arch: &NvdArch, mode: MrheMode, seed: u64) -> (HyperNet, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = HyperNet::build(arch, &HyperConfig::default(), mode, &mut store, &mut rng).unwrap();
    (net, store)
}

fn embedding(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::uniform(&mut rng, &[1, EMBED_DIM], -1.0, 1.0)
}

#[test]
fn zero_embedding_emits_final_biases() {
    let arch = small_arch();
    let (net, store) = built(&arch, MrheMode::Hyper, 1);
    let out = net.generate_store(&store, &Tensor::zeros([1, EMBED_DIM])).unwrap();
    let last = HyperConfig::default().hidden_layers;
    for spec in arch.tensors() {
        let bias = store.value(store.id(&format!("head.{}.fc{last}.bias", spec.name)).unwrap());
        let emitted = out.value(out.id(&spec.name).unwrap());
        assert_eq!(emitted.shape(), spec.shape.as_slice());
        assert_eq!(emitted.data(), bias.data(), "{}", spec.name);
    }
    // Hidden biases start at zero.
    for i in 0..last {
        let b = store.value(store.id(&format!("head.alpha.fc0.weight.fc{i}.bias")).unwrap());
        assert!(b.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn generation_is_deterministic_and_complete() {
    let arch = small_arch();
    let (net, store) = built(&arch, MrheMode::Hyper, 2);
    let e = embedding(3);
    let a = net.generate_store(&store, &e).unwrap();
    let b = net.generate_store(&store, &e).unwrap();
    for id in a.ids() {
        assert!(a.value(id).data().iter().zip(b.value(id).data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let enumerated: usize = arch
        .tensors()
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    assert_eq!(a.element_count(), enumerated);
    assert_eq!(a.element_count(), arch.param_count());
    let names: Vec<&str> = a.iter().map(|(_, n)| n.name).collect();
    let want: Vec<String> = arch.tensors().into_iter().map(|t| t.name).collect();
    assert_eq!(names, want);
    // A different embedding gives a different model.
    let c = net.generate_store(&store, &embedding(4)).unwrap();
    assert_ne!(a.value(a.ids().next().unwrap()), c.value(c.ids().next().unwrap()));
}

#[test]
fn one_head_per_tensor() {
    let arch = NvdArch::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = HyperNet::build(&arch, &HyperConfig::default(), MrheMode::Hyper, &mut store, &mut rng).unwrap();
    assert_eq!(net.head_count(), 88);
    assert_eq!(store.len(), 88 * 6);
    let w = store.value(store.id("head.bg.texture.grid.0.fc2.weight").unwrap());
    assert_eq!(w.shape(), &[128, 4096 * 2]);

    let small = small_arch();
    let (uni, ustore) = built(&small, MrheMode::Universal, 0);
    let tables = small.tensors().iter().filter(|t| t.is_hash_table()).count();
    assert_eq!(uni.head_count(), small.tensors().len() - tables);
    assert!(ustore.id("universal.bg.texture.grid.0").is_some());
    assert!(uni.head_params("bg.texture.grid.0").is_none());
    assert_eq!(uni.head_params("alpha.fc0.weight").unwrap().len(), 6);
}

#[test]
fn universal_tables_are_shared_across_videos() {
    let arch = small_arch();
    let (net, store) = built(&arch, MrheMode::Universal, 5);
    let a = net.generate_store(&store, &embedding(1)).unwrap();
    let b = net.generate_store(&store, &embedding(2)).unwrap();
    for spec in arch.tensors() {
        let (x, y) = (a.value(a.id(&spec.name).unwrap()), b.value(b.id(&spec.name).unwrap()));
        assert_eq!(spec.is_hash_table(), x == y, "{}", spec.name);
    }
}

#[test]
fn initial_output_resembles_a_standard_init() {
    let arch = small_arch();
    let (net, store) = built(&arch, MrheMode::Hyper, 6);
    let out = net.generate_store(&store, &embedding(7)).unwrap();
    for spec in arch.tensors() {
        let t = out.value(out.id(&spec.name).unwrap());
        let bound = match spec.role {
            hypernvd::model::TensorRole::HashTable => 1e-4,
            hypernvd::model::TensorRole::Weight { fan_in } | hypernvd::model::TensorRole::Bias { fan_in } => {
                1.0 / (fan_in as f64).sqrt()
            }
        };
        // The embedding contributes at most a few percent of the bound.
        assert!(t.max_abs() < bound + 0.05, "{}: {}", spec.name, t.max_abs());
        assert!(t.max_abs() > 0.0);
    }
}

#[test]
fn attach_recovers_the_layout() {
    let arch = small_arch();
    for mode in [MrheMode::Hyper, MrheMode::Universal] {
        let (net, store) = built(&arch, mode, 8);
        let again = HyperNet::attach(&arch, &HyperConfig::default(), mode, &store).unwrap();
        let e = embedding(9);
        let a = net.generate_store(&store, &e).unwrap();
        let b = again.generate_store(&store, &e).unwrap();
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
        }
    }
    let (_, store) = built(&arch, MrheMode::Hyper, 8);
    match HyperNet::attach(&arch, &HyperConfig::default(), MrheMode::Universal, &store) {
        Err(Error::ParamMismatch { missing, extra }) => {
            assert!(missing.iter().all(|n| n.starts_with("universal.")));
            assert!(!extra.is_empty());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn embedding_shape_is_checked() {
    let arch = small_arch();
    let (net, store) = built(&arch, MrheMode::Hyper, 10);
    assert!(net.generate_store(&store, &Tensor::zeros([1, 767])).is_err());
    assert!(validate_embedding(&Tensor::<f64>::zeros([768])).is_ok());
    assert!(validate_embedding(&Tensor::<f64>::zeros([769])).is_err());
    assert!(validate_embedding(&Tensor::<f64>::filled([768], f64::NAN)).is_err());
}

#[test]
fn gradients_reach_heads_and_embedding() {
    let arch = small_arch();
    let (net, mut store) = built(&arch, MrheMode::Hyper, 11);
    let eid = store.insert("embedding.v", embedding(12), true).unwrap();
    let (view, mut sink) = store.split();
    let mut tape = Tape::new(view);
    let e = tape.param(eid);
    let vars = net.generate(&mut tape, e).unwrap();
    let parts: Vec<_> = vars
        .iter()
        .map(|&v| {
            let s = tape.square(v).unwrap();
            (tape.sum(s).unwrap(), 1.0)
        })
        .collect();
    let total = tape.combine(&parts).unwrap();
    tape.backward(total, &mut sink).unwrap();
    for (_, node) in store.iter() {
        if node.name.ends_with(".fc2.weight") || node.name.ends_with(".fc2.bias") || node.name == "embedding.v" {
            assert!(node.grad.data().iter().any(|&g| g != 0.0), "{}", node.name);
        }
    }
}

#[test]
fn hash_parameter_classification() {
    assert!(HyperNet::is_hash_param("head.bg.texture.grid.3.fc0.weight"));
    assert!(HyperNet::is_hash_param("universal.fg.residual.grid.0"));
    assert!(!HyperNet::is_hash_param("head.bg.texture.fc0.weight"));
    assert!(!HyperNet::is_hash_param("embedding.v1"));
}

#[test]
fn rank_one_features_compress_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let col: Tensor<f64> = common::uniform(&mut rng, &[EMBED_DIM], -1.0, 1.0);
    let p = 64;
    let data: Vec<f64> = (0..EMBED_DIM).flat_map(|i| vec![col.data()[i]; p]).collect();
    let features = Tensor::new([EMBED_DIM, p], data).unwrap();
    let out = compress_embedding(&features, 2000, 1e-2, &mut rng).unwrap();
    assert_eq!(out.embedding.len(), EMBED_DIM);
    assert!(out.final_l1 < 1e-3, "{}", out.final_l1);
    assert!(out.final_l1 < out.initial_l1);
}

#[test]
fn compressed_length_is_fixed_and_training_does_not_diverge() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for p in [1, 5, 33] {
        let features: Tensor<f64> = common::uniform(&mut rng, &[EMBED_DIM, p], -1.0, 1.0);
        let out = compress_embedding(&features, 150, 1e-2, &mut rng).unwrap();
        assert_eq!(out.embedding.shape(), &[EMBED_DIM]);
        assert!(out.final_l1 <= out.initial_l1, "P={p}: {} > {}", out.final_l1, out.initial_l1);
    }
    assert!(compress_embedding(&Tensor::zeros([767, 4]), 10, 1e-2, &mut rng).is_err());
    assert!(compress_embedding(&Tensor::zeros([768, 0]), 10, 1e-2, &mut rng).is_err());
}

fn reversed(ds: &VideoDataset) -> VideoDataset {
    let (f, plane) = (ds.frame_count(), ds.height() * ds.width());
    let rev = |t: &Tensor<f32>, ch: usize| {
        let mut out = Vec::with_capacity(t.len());
        for k in (0..f).rev() {
            out.extend_from_slice(&t.data()[k * plane * ch..(k + 1) * plane * ch]);
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    };
    VideoDataset::new(
        "rev",
        rev(&ds.frames, 3),
        rev(&ds.masks, 1),
        rev(&ds.flow_bwd, 2),
        rev(&ds.flow_fwd, 2),
        1.0,
    )
    .unwrap()
}

#[test]
fn descriptor_properties() {
    let ds = synth_generate(&SynthSceneSpec::centred(32, 8, 2, (1.0, 0.5))).unwrap();
    let a = descriptor_embedding(&ds).unwrap();
    assert_eq!(a.shape(), &[1, EMBED_DIM]);
    assert_eq!(a, descriptor_embedding(&ds).unwrap());
    let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    let r = descriptor_embedding(&reversed(&ds)).unwrap();
    let diff: f64 = a.data().iter().zip(r.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3, "{diff}");
    let other = descriptor_embedding(&synth_generate(&SynthSceneSpec::centred(32, 8, 3, (1.0, 0.5))).unwrap()).unwrap();
    assert_ne!(a, other);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn descriptor_is_unit_norm(seed in 0u64..100, frames in 1usize..10) {
        let ds = synth_generate(&SynthSceneSpec::centred(16, frames, seed, (0.5, 0.25))).unwrap();
        let e = descriptor_embedding(&ds).unwrap();
        let norm = e.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }
}
