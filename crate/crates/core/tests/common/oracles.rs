//! Independent loop-level reference implementations.

use hypernvd::diffcore::Real;

/// Table row of a grid cell using arbitrary-width integer arithmetic.
pub fn hash_big(cell: &[u64], table_size: usize) -> usize {
    let primes: [u128; 3] = [1, 2654435761, 805459861];
    let mut h: u128 = 0;
    for (d, &c) in cell.iter().enumerate() {
        h ^= c as u128 * primes[d];
    }
    (h % table_size as u128) as usize
}

/// Grid resolutions evaluated straight from `floor(n_min * (n_max / n_min)^(l / (L - 1)))`.
pub fn resolutions(levels: usize, n_min: usize, n_max: usize) -> Vec<usize> {
    (0..levels)
        .map(|l| {
            if levels == 1 {
                return n_min;
            }
            let r = n_min as f64 * (n_max as f64 / n_min as f64).powf(l as f64 / (levels - 1) as f64);
            (r + 1e-9).floor() as usize
        })
        .collect()
}

/// Hash-grid encoding of one point written with explicit loops.
pub fn encode_point<S: Real>(
    point: &[S],
    res: &[usize],
    tables: &[Vec<S>],
    table_size: usize,
    feat: usize,
) -> Vec<S> {
    let dim = point.len();
    let mut out = Vec::new();
    for (l, &n) in res.iter().enumerate() {
        let mut base = vec![0u64; dim];
        let mut t = vec![S::zero(); dim];
        for d in 0..dim {
            let pos = point[d] * S::from_usize(n).unwrap();
            let fl = pos.floor();
            base[d] = fl.to_u64().unwrap();
            t[d] = pos - fl;
        }
        let mut acc = vec![S::zero(); feat];
        for corner in 0..(1usize << dim) {
            let mut cell = base.clone();
            let mut w = S::one();
            for d in 0..dim {
                if corner & (1 << d) != 0 {
                    cell[d] += 1;
                    w = w * t[d];
                } else {
                    w = w * (S::one() - t[d]);
                }
            }
            let row = hash_big(&cell, table_size);
            for f in 0..feat {
                acc[f] = acc[f] + w * tables[l][row * feat + f];
            }
        }
        out.extend(acc);
    }
    out
}

/// `x W + b` for a row vector, with `W` stored `[fan_in, fan_out]` row-major.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

/// MLP given as `(weight, bias)` pairs, ReLU between layers, no output
/// activation.
pub fn mlp(x: &[f64], layers: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = affine(&h, w, b);
        if i + 1 < layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

/// Everything the model produces for one point, computed one scalar at a
/// time.
#[derive(Debug)]
pub struct PointOutputs {
    pub uv: Vec<[f64; 2]>,
    pub texture: Vec<[f64; 3]>,
    pub residual: Vec<f64>,
    pub alpha: Vec<f64>,
    pub color: [f64; 3],
}

pub fn model_point(arch: &hypernvd::model::NvdArch, store: &hypernvd::diffcore::ParamStore<f64>, p: [f64; 3]) -> PointOutputs {
    let get = |name: &str| store.value(store.id(name).unwrap()).data().to_vec();
    let net = |prefix: &str| -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..=arch.hidden_layers)
            .map(|i| (get(&format!("{prefix}.fc{i}.weight")), get(&format!("{prefix}.fc{i}.bias"))))
            .collect()
    };
    let grid = |prefix: &str, g: &hypernvd::mrhe::HashGridSpec, x: &[f64]| {
        let tables: Vec<Vec<f64>> = (0..g.levels).map(|l| get(&format!("{prefix}.grid.{l}"))).collect();
        encode_point(x, &resolutions(g.levels, g.base_resolution, g.max_resolution), &tables, g.table_size, g.feature_dim)
    };
    let mut out = PointOutputs {
        uv: Vec::new(),
        texture: Vec::new(),
        residual: Vec::new(),
        alpha: Vec::new(),
        color: [0.0; 3],
    };
    for l in 0..arch.layer_count() {
        let pre = arch.layer_prefix(l);
        let m = mlp(&p, &net(&format!("{pre}.mapping")));
        let uv = [m[0].tanh(), m[1].tanh()];
        let unit_uv = [(uv[0] + 1.0) / 2.0, (uv[1] + 1.0) / 2.0];
        let feats = grid(&format!("{pre}.texture"), &arch.texture_grid, &unit_uv);
        let t = mlp(&feats, &net(&format!("{pre}.texture")));
        let c = [(t[0].tanh() + 1.0) / 2.0, (t[1].tanh() + 1.0) / 2.0, (t[2].tanh() + 1.0) / 2.0];
        let unit_p: Vec<f64> = p.iter().map(|x| (x + 1.0) / 2.0).collect();
        let feats = grid(&format!("{pre}.residual"), &arch.residual_grid, &unit_p);
        let r = 1.0 + mlp(&feats, &net(&format!("{pre}.residual")))[0].tanh();
        out.uv.push(uv);
        out.texture.push(c);
        out.residual.push(r);
    }
    out.alpha = mlp(&p, &net("alpha")).iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
    let lit = |l: usize| [0, 1, 2].map(|k| out.texture[l][k] * out.residual[l]);
    let mut c = lit(0);
    for f in 1..arch.layer_count() {
        let a = out.alpha[f - 1];
        let cf = lit(f);
        for k in 0..3 {
            c[k] = (1.0 - a) * c[k] + a * cf[k];
        }
    }
    out.color = c;
    out
}

/// Texture colour of `layer` at an atlas coordinate `uv` in `[-1, 1]^2`.
pub fn texture_point(arch: &hypernvd::model::NvdArch, store: &hypernvd::diffcore::ParamStore<f64>, layer: usize, uv: [f64; 2]) -> [f64; 3] {
    let get = |name: &str| store.value(store.id(name).unwrap()).data().to_vec();
    let pre = format!("{}.texture", arch.layer_prefix(layer));
    let g = &arch.texture_grid;
    let tables: Vec<Vec<f64>> = (0..g.levels).map(|l| get(&format!("{pre}.grid.{l}"))).collect();
    let unit = [(uv[0] + 1.0) / 2.0, (uv[1] + 1.0) / 2.0];
    let feats = encode_point(&unit, &resolutions(g.levels, g.base_resolution, g.max_resolution), &tables, g.table_size, g.feature_dim);
    let net: Vec<(Vec<f64>, Vec<f64>)> = (0..=arch.hidden_layers)
        .map(|i| (get(&format!("{pre}.fc{i}.weight")), get(&format!("{pre}.fc{i}.bias"))))
        .collect();
    let t = mlp(&feats, &net);
    [0, 1, 2].map(|k| (t[k].tanh() + 1.0) / 2.0)
}
