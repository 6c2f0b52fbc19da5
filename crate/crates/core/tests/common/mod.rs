#![allow(dead_code)]

pub mod oracles;

use hypernvd::diffcore::{Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform<S: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Small architecture for tests that need many model evaluations.
pub fn small_arch() -> hypernvd::model::NvdArch {
    use hypernvd::mrhe::HashGridSpec;
    let grid = |dim: usize| HashGridSpec {
        levels: 3,
        base_resolution: 4,
        max_resolution: 16,
        table_size: 64,
        feature_dim: 2,
        input_dim: dim,
    };
    hypernvd::model::NvdArch {
        mapping_hidden: 8,
        texture_hidden: 8,
        residual_hidden: 8,
        alpha_hidden: 8,
        hidden_layers: 2,
        texture_grid: grid(2),
        residual_grid: grid(3),
        foreground_layers: 1,
    }
}

/// Flow terms `(flow_p, flow_alpha, gated pairs)` on a synthetic scene
/// translating by a whole number of pixels per frame, with the ideal
/// decomposition: background uv is the pixel position, foreground uv is the
/// position relative to the sprite path, and alpha is the thresholded mask.
pub fn ideal_translation_flow(size: usize, frames: usize, velocity: (i64, i64)) -> (f64, f64, usize) {
    use hypernvd::dataio::{synth_generate, SynthSceneSpec};
    use hypernvd::diffcore::Tape;
    use hypernvd::losses::flow_loss;

    let spec = SynthSceneSpec::centred(size, frames, 3, (velocity.0 as f64, velocity.1 as f64));
    let ds = synth_generate(&spec).unwrap();
    let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
    let norm = |x: f64, n: usize| 2.0 * x / (n - 1) as f64 - 1.0;
    let uv = |layer: usize, x: f64, y: f64, t: usize| -> [f64; 2] {
        let (ox, oy) = if layer == 1 {
            (velocity.0 as f64 * t as f64, velocity.1 as f64 * t as f64)
        } else {
            (0.0, 0.0)
        };
        [norm(x - ox, w), norm(y - oy, h)]
    };
    let alpha = |t: usize, r: usize, c: usize| if ds.mask(t, r, c) >= 0.5 { 1.0 } else { 0.0 };
    let (mut uv_p, mut uv_q) = (vec![Vec::new(), Vec::new()], vec![Vec::new(), Vec::new()]);
    let (mut ap, mut aq) = (Vec::new(), Vec::new());
    let plane = h * w;
    for t in 0..f {
        for r in 0..h {
            for c in 0..w {
                let i = t * plane + r * w + c;
                for fwd in [true, false] {
                    let (exists, gate, flow, tq) = if fwd {
                        (t + 1 < f, ds.w_fwd[i], &ds.flow_fwd, t + 1)
                    } else {
                        (t > 0, ds.w_bwd[i], &ds.flow_bwd, t.wrapping_sub(1))
                    };
                    if !exists || gate == 0 {
                        continue;
                    }
                    let (qx, qy) = (c as f64 + flow.data()[2 * i] as f64, r as f64 + flow.data()[2 * i + 1] as f64);
                    for l in 0..2 {
                        uv_p[l].extend(uv(l, c as f64, r as f64, t));
                        uv_q[l].extend(uv(l, qx, qy, tq));
                    }
                    ap.push(alpha(t, r, c));
                    aq.push(alpha(tq, qy as usize, qx as usize));
                }
            }
        }
    }
    let n = ap.len();
    let mut tape = Tape::<f64>::detached();
    let mut leaf = |v: Vec<f64>, cols: usize| tape.constant(Tensor::new([n, cols], v).unwrap()).unwrap();
    let p: Vec<_> = uv_p.into_iter().map(|v| leaf(v, 2)).collect();
    let q: Vec<_> = uv_q.into_iter().map(|v| leaf(v, 2)).collect();
    let (ap, aq) = (leaf(ap, 1), leaf(aq, 1));
    let (fp, fa) = flow_loss(&mut tape, &p, &q, ap, aq, vec![1.0 / n as f64; n]).unwrap();
    (tape.value(fp).item(), tape.value(fa).item(), n)
}
