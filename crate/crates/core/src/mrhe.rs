//! Multiresolution hash encoding of 2D and 3D coordinates.

use serde::{Deserialize, Serialize};

use crate::diffcore::{cst, CustomOp, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-dimension hash multipliers.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Coordinates may stray this far outside `[0, 1]` before being rejected.
pub const COORD_TOLERANCE: f64 = 1e-6;

/// Geometry of a hash grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridSpec {
    pub levels: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub table_size: usize,
    pub feature_dim: usize,
    pub input_dim: usize,
}

impl HashGridSpec {
    pub fn texture_default() -> Self {
        Self {
            levels: 8,
            base_resolution: 8,
            max_resolution: 128,
            table_size: 1 << 12,
            feature_dim: 2,
            input_dim: 2,
        }
    }

    pub fn residual_default() -> Self {
        Self {
            max_resolution: 64,
            input_dim: 3,
            ..Self::texture_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("hash grid: {m} ({self:?})")));
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if self.base_resolution < 2 {
            return bad("base resolution must be at least 2");
        }
        if self.max_resolution < self.base_resolution {
            return bad("max resolution below base resolution");
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 32 {
            return bad("table size must be a power of two no larger than 2^32");
        }
        if self.feature_dim < 1 {
            return bad("feature dim must be at least 1");
        }
        if !(2..=3).contains(&self.input_dim) {
            return bad("input dim must be 2 or 3");
        }
        Ok(())
    }

    /// Per-level growth factor `b`.
    pub fn growth_factor(&self) -> f64 {
        if self.levels < 2 {
            return 1.0;
        }
        (((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64).exp()
    }

    /// Grid resolution `floor(N_min * b^level)`.
    pub fn resolution(&self, level: usize) -> Result<usize> {
        if level >= self.levels {
            return Err(Error::invalid(format!(
                "level {level} out of range for {} levels",
                self.levels
            )));
        }
        let raw = self.base_resolution as f64 * self.growth_factor().powi(level as i32);
        // absorb the rounding of exp/ln so exact endpoints are not floored away
        let n = (raw * (1.0 + 1e-12)).floor() as usize;
        Ok(n.clamp(self.base_resolution, self.max_resolution))
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.resolution(l).expect("level in range")).collect()
    }

    /// Width `L * F` of the encoded feature vector.
    pub fn output_dim(&self) -> usize {
        self.levels * self.feature_dim
    }

    pub fn corners(&self) -> usize {
        1 << self.input_dim
    }

    /// Scalar entries over all level tables.
    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.feature_dim
    }
}

/// Table row of an integer grid cell: XOR of `cell[d] * HASH_PRIMES[d]`,
/// modulo the (power-of-two) table size.
pub fn hash_cell_index(cell: &[u64], table_size: usize) -> usize {
    let h = cell
        .iter()
        .zip(HASH_PRIMES)
        .fold(0u64, |acc, (&c, p)| acc ^ c.wrapping_mul(p));
    (h & (table_size as u64 - 1)) as usize
}

struct EncodeOp<S> {
    spec: HashGridSpec,
    resolutions: Vec<usize>,
    rows: Vec<u32>,
    frac: Vec<S>,
}

fn corner_weight<S: Real>(frac: &[S], corner: usize, skip: Option<usize>) -> S {
    let mut w = S::one();
    for (d, &f) in frac.iter().enumerate() {
        if Some(d) == skip {
            continue;
        }
        w *= if corner >> d & 1 == 1 { f } else { S::one() - f };
    }
    w
}

/// Encodes `points: [n, D]` (coordinates in `[0, 1]`) against `tables`, one
/// `[T, F]` table per level. Returns `[n, L * F]`, differentiable with
/// respect to both the tables and the points.
pub fn encode<S: Real>(tape: &mut Tape<'_, S>, spec: &HashGridSpec, tables: &[Var], points: Var) -> Result<Var> {
    spec.validate()?;
    if tables.len() != spec.levels {
        return Err(Error::invalid(format!(
            "hash grid expects {} tables, got {}",
            spec.levels,
            tables.len()
        )));
    }
    for &t in tables {
        let shape = tape.shape(t);
        if shape != [spec.table_size, spec.feature_dim] {
            return Err(Error::ShapeMismatch {
                op: "hash table",
                lhs: vec![spec.table_size, spec.feature_dim],
                rhs: shape.to_vec(),
            });
        }
    }
    let pts = tape.value(points);
    let dim = spec.input_dim;
    if pts.cols() != dim || pts.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: vec![pts.rows(), dim],
            rhs: pts.shape().to_vec(),
        });
    }
    let tol = cst::<S>(COORD_TOLERANCE);
    if let Some(bad) = pts.data().iter().find(|&&x| !(x >= -tol && x <= S::one() + tol)) {
        return Err(Error::invalid(format!("encode coordinate {bad} outside [0, 1]")));
    }
    let n = pts.rows();
    let (levels, feat, corners) = (spec.levels, spec.feature_dim, spec.corners());
    let resolutions = spec.resolutions();
    let mut rows = Vec::with_capacity(n * levels * corners);
    let mut frac = Vec::with_capacity(n * levels * dim);
    let mut out = vec![S::zero(); n * levels * feat];
    let mut cell = [0u64; 3];
    let mut fr = [S::zero(); 3];
    for i in 0..n {
        let p = pts.row(i);
        for (l, &res) in resolutions.iter().enumerate() {
            let scale = S::from_usize(res).unwrap();
            for d in 0..dim {
                let pos = p[d].max(S::zero()).min(S::one()) * scale;
                let c = pos.floor();
                cell[d] = c.to_u64().unwrap();
                fr[d] = pos - c;
            }
            frac.extend_from_slice(&fr[..dim]);
            let table = tape.value(tables[l]).data();
            let o = &mut out[(i * levels + l) * feat..(i * levels + l + 1) * feat];
            for c in 0..corners {
                let mut corner = [0u64; 3];
                for d in 0..dim {
                    corner[d] = cell[d] + (c as u64 >> d & 1);
                }
                let row = hash_cell_index(&corner[..dim], spec.table_size);
                rows.push(row as u32);
                let w = corner_weight(&fr[..dim], c, None);
                for (a, &t) in o.iter_mut().zip(&table[row * feat..(row + 1) * feat]) {
                    *a += w * t;
                }
            }
        }
    }
    let op = EncodeOp {
        spec: *spec,
        resolutions,
        rows,
        frac,
    };
    let mut inputs = vec![points];
    inputs.extend_from_slice(tables);
    tape.custom(&inputs, Tensor::new([n, levels * feat], out)?, Box::new(op))
}

impl<S: Real> CustomOp<S> for EncodeOp<S> {
    fn name(&self) -> &str {
        "hash encode"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad_output: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let spec = &self.spec;
        let (levels, feat, corners, dim) = (spec.levels, spec.feature_dim, spec.corners(), spec.input_dim);
        let n = inputs[0].rows();
        let g = grad_output.data();
        let mut table_grads: Vec<Option<Tensor<S>>> = (0..levels)
            .map(|l| needs[l + 1].then(|| Tensor::zeros([spec.table_size, feat])))
            .collect();
        let mut point_grad = needs[0].then(|| Tensor::zeros([n, dim]));
        for i in 0..n {
            for l in 0..levels {
                let go = &g[(i * levels + l) * feat..(i * levels + l + 1) * feat];
                let fr = &self.frac[(i * levels + l) * dim..(i * levels + l + 1) * dim];
                let base = (i * levels + l) * corners;
                for c in 0..corners {
                    let row = self.rows[base + c] as usize;
                    if let Some(tg) = table_grads[l].as_mut() {
                        let w = corner_weight(fr, c, None);
                        for (a, &b) in tg.data_mut()[row * feat..(row + 1) * feat].iter_mut().zip(go) {
                            *a += w * b;
                        }
                    }
                    if let Some(pg) = point_grad.as_mut() {
                        let table = inputs[l + 1].data();
                        let dot: S = table[row * feat..(row + 1) * feat]
                            .iter()
                            .zip(go)
                            .map(|(&t, &b)| t * b)
                            .sum();
                        let scale = S::from_usize(self.resolutions[l]).unwrap();
                        for d in 0..dim {
                            let sign = if c >> d & 1 == 1 { S::one() } else { -S::one() };
                            pg.data_mut()[i * dim + d] += scale * sign * corner_weight(fr, c, Some(d)) * dot;
                        }
                    }
                }
            }
        }
        let mut result = vec![point_grad];
        result.extend(table_grads);
        Ok(result)
    }
}
