//! Self-supervised training objective and the forward-backward flow gate.

use serde::{Deserialize, Serialize};

use crate::diffcore::{cst, CustomOp, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Reconstruction;

/// Term weights, schedules and numerical guards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: f64,
    pub grad: f64,
    pub flow_p: f64,
    pub flow_alpha: f64,
    pub sparsity: f64,
    pub res_smooth: f64,
    pub res_reg: f64,
    pub alpha_reg: f64,
    pub rigid: f64,
    pub alpha_boot: f64,
    /// Rigidity is active while `iteration < rigid_until`.
    pub rigid_until: u64,
    /// Bootstrapping is active while `iteration < bootstrap_until`.
    pub bootstrap_until: u64,
    pub ncc_patch: usize,
    pub ncc_eps: f64,
    pub log_eps: f64,
    pub rigid_delta: f64,
    pub flow_threshold: f64,
    /// Use `+NCC` instead of `1 - NCC` in the residual smoothness term.
    pub literal_ncc_sign: bool,
    /// Regularise `max alpha` with BCE against 1 instead of its self-entropy.
    pub alpha_reg_target_one: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 5.0,
            grad: 1.0,
            flow_p: 0.01,
            flow_alpha: 0.05,
            sparsity: 1.0,
            res_smooth: 0.1,
            res_reg: 0.5,
            alpha_reg: 0.1,
            rigid: 0.001,
            alpha_boot: 2.0,
            rigid_until: 5000,
            bootstrap_until: 10000,
            ncc_patch: 3,
            ncc_eps: 1e-4,
            log_eps: 1e-7,
            rigid_delta: 1e-6,
            flow_threshold: 1.0,
            literal_ncc_sign: false,
            alpha_reg_target_one: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.rgb,
            self.grad,
            self.flow_p,
            self.flow_alpha,
            self.sparsity,
            self.res_smooth,
            self.res_reg,
            self.alpha_reg,
            self.rigid,
            self.alpha_boot,
        ];
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.ncc_patch < 3 || self.ncc_patch % 2 == 0 {
            return Err(Error::Config("NCC patch size must be odd and at least 3".into()));
        }
        if !(self.ncc_eps > 0.0 && self.log_eps > 0.0 && self.log_eps < 0.5 && self.rigid_delta > 0.0) {
            return Err(Error::Config("numerical guards must be positive".into()));
        }
        Ok(())
    }

    /// Schedules rescaled from the reference 25,000-iteration run to
    /// `iterations` (5,000 and 10,000 become one and two fifths).
    pub fn scaled_to(mut self, iterations: u64) -> Self {
        self.rigid_until = iterations / 5;
        self.bootstrap_until = 2 * iterations / 5;
        self
    }

    pub fn rigid_active(&self, iteration: u64) -> bool {
        iteration < self.rigid_until
    }

    pub fn bootstrap_active(&self, iteration: u64) -> bool {
        iteration < self.bootstrap_until
    }
}

/// One itemised term of a [`LossReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Values of every active term and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Weighted sum recomputed from the itemised terms.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

fn mean_weights<S: Real>(mask: &[bool]) -> Vec<S> {
    let count = mask.iter().filter(|&&m| m).count();
    let w = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    mask.iter().map(|&m| if m { cst(w) } else { S::zero() }).collect()
}

fn squared_row_norm<S: Real>(tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    tape.row_sum(sq)
}

/// Mean over points of `|pred - gt|^2` (squared norm over channels).
pub fn rgb_loss<S: Real>(tape: &mut Tape<'_, S>, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let n = squared_row_norm(tape, d)?;
    tape.mean(n)
}

/// Forward-difference gradient matching. Each of the six colour arguments is
/// `[n, 3]`, evaluated at the anchors `p` and their right/down neighbours;
/// anchors with `valid[i] == false` are left out of the mean.
#[allow(clippy::too_many_arguments)]
pub fn grad_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    pred_p: Var,
    pred_x: Var,
    pred_y: Var,
    gt_p: Var,
    gt_x: Var,
    gt_y: Var,
    valid: &[bool],
) -> Result<Var> {
    let mut parts = Vec::new();
    for (pred_n, gt_n) in [(pred_x, gt_x), (pred_y, gt_y)] {
        let dh = tape.sub(pred_n, pred_p)?;
        let d = tape.sub(gt_n, gt_p)?;
        let e = tape.sub(dh, d)?;
        parts.push(squared_row_norm(tape, e)?);
    }
    let s = tape.add(parts[0], parts[1])?;
    tape.weighted_sum(s, mean_weights(valid))
}

/// Bilinear lookup of an `[H, W, C]` field at pixel position `(x, y)`,
/// clamping to the border.
pub fn bilinear<S: Real>(field: &[S], height: usize, width: usize, channels: usize, x: f64, y: f64) -> Vec<f64> {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize, k: usize| field[(r * width + c) * channels + k].to_f64_lossy();
    (0..channels)
        .map(|k| {
            let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
            let bottom = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
            top * (1.0 - fy) + bottom * fy
        })
        .collect()
}

/// Forward-backward consistency gate for one frame pair. `flow_fwd` maps
/// frame `t` to `t + 1` and `flow_bwd` maps `t + 1` back to `t`, both
/// `[H, W, 2]` in pixels. Returns `[H, W]` of 0/1.
pub fn flow_consistency_weights<S: Real>(
    flow_fwd: &[S],
    flow_bwd: &[S],
    height: usize,
    width: usize,
    threshold: f64,
) -> Vec<u8> {
    let mut out = vec![0u8; height * width];
    for r in 0..height {
        for c in 0..width {
            let i = (r * width + c) * 2;
            let (fx, fy) = (flow_fwd[i].to_f64_lossy(), flow_fwd[i + 1].to_f64_lossy());
            let (qx, qy) = (c as f64 + fx, r as f64 + fy);
            if !(0.0..=(width - 1) as f64).contains(&qx) || !(0.0..=(height - 1) as f64).contains(&qy) {
                continue;
            }
            let b = bilinear(flow_bwd, height, width, 2, qx, qy);
            let (ex, ey) = (fx + b[0], fy + b[1]);
            if (ex * ex + ey * ey).sqrt() < threshold {
                out[r * width + c] = 1;
            }
        }
    }
    out
}

/// Texture-space and opacity consistency along flow correspondences.
///
/// `uv_p[l]`, `uv_q[l]` are the layer-`l` mappings at the anchors and at
/// their flow targets; `weights[i]` already combines the gate `w`, the
/// inclusion flag and the `1 / included` normalisation. Returns the
/// unweighted `(flow_p, flow_alpha)` terms.
pub fn flow_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    uv_p: &[Var],
    uv_q: &[Var],
    alpha_p: Var,
    alpha_q: Var,
    weights: Vec<S>,
) -> Result<(Var, Var)> {
    let nf = tape.shape(alpha_p)[1];
    let mut visible_bg: Option<Var> = None;
    let mut per_point: Option<Var> = None;
    for f in 1..=nf {
        let a = tape.slice_cols(alpha_p, f - 1, 1)?;
        let d = tape.sub(uv_p[f], uv_q[f])?;
        let dist = tape.row_norm(d)?;
        let term = tape.mul(a, dist)?;
        per_point = Some(match per_point {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        let one_minus = tape.scale_shift(a, -S::one(), S::one())?;
        visible_bg = Some(match visible_bg {
            Some(v) => tape.mul(v, one_minus)?,
            None => one_minus,
        });
    }
    let d = tape.sub(uv_p[0], uv_q[0])?;
    let dist = tape.row_norm(d)?;
    let bg = tape.mul(visible_bg.expect("at least one foreground"), dist)?;
    let per_point = tape.add(per_point.expect("at least one foreground"), bg)?;
    let flow_p = tape.weighted_sum(per_point, weights.clone())?;

    let da = tape.sub(alpha_p, alpha_q)?;
    let da = tape.abs(da)?;
    let da = tape.row_sum(da)?;
    let flow_alpha = tape.weighted_sum(da, weights)?;
    Ok((flow_p, flow_alpha))
}

/// Mean over points of `|(1 - alpha_f) c_f|^2`, summed over foregrounds.
/// `texture` holds the pre-residual colour of every layer.
pub fn sparsity_loss<S: Real>(tape: &mut Tape<'_, S>, alpha: Var, texture: &[Var]) -> Result<Var> {
    let nf = tape.shape(alpha)[1];
    let mut terms = Vec::new();
    for f in 1..=nf {
        let a = tape.slice_cols(alpha, f - 1, 1)?;
        let inv = tape.scale_shift(a, -S::one(), S::one())?;
        let c = tape.mul_col(texture[f], inv)?;
        let n = squared_row_norm(tape, c)?;
        terms.push((tape.mean(n)?, S::one()));
    }
    tape.combine(&terms)
}

struct NccOp<S> {
    k2: usize,
    literal: bool,
    eps: S,
}

fn patch_stats<S: Real>(p: &[S]) -> (S, S) {
    let n = S::from_usize(p.len()).unwrap();
    let mean = p.iter().copied().sum::<S>() / n;
    let var = p.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    (mean, var)
}

impl<S: Real> NccOp<S> {
    fn forward(&self, a: &[S], b: &[S]) -> Vec<S> {
        a.chunks(self.k2)
            .zip(b.chunks(self.k2))
            .map(|(pa, pb)| {
                let (ma, va) = patch_stats(pa);
                let (mb, vb) = patch_stats(pb);
                let (sa, sb) = (va.sqrt(), vb.sqrt());
                let corr = if sa < self.eps || sb < self.eps {
                    S::zero()
                } else {
                    let n = S::from_usize(self.k2).unwrap();
                    let cov = pa.iter().zip(pb).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<S>() / n;
                    let ncc = cov / (sa * sb);
                    if self.literal {
                        ncc
                    } else {
                        S::one() - ncc
                    }
                };
                corr + vb
            })
            .collect()
    }
}

impl<S: Real> CustomOp<S> for NccOp<S> {
    fn name(&self) -> &str {
        "ncc smoothness"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad_output: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut ga = vec![S::zero(); a.len()];
        let mut gb = vec![S::zero(); b.len()];
        let n = S::from_usize(self.k2).unwrap();
        let two = S::one() + S::one();
        for (p, &g) in grad_output.data().iter().enumerate() {
            let r = p * self.k2..(p + 1) * self.k2;
            let (pa, pb) = (&a[r.clone()], &b[r.clone()]);
            let (ma, va) = patch_stats(pa);
            let (mb, vb) = patch_stats(pb);
            // variance term
            for (j, &y) in pb.iter().enumerate() {
                gb[r.start + j] += g * two * (y - mb) / n;
            }
            let (sa, sb) = (va.sqrt(), vb.sqrt());
            if sa < self.eps || sb < self.eps {
                continue;
            }
            let cov = pa.iter().zip(pb).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<S>() / n;
            let ncc = cov / (sa * sb);
            let sign = if self.literal { S::one() } else { -S::one() };
            // d ncc / d a_j = ((b_j - mb) / (sa sb) - ncc (a_j - ma) / va) / n
            for j in 0..self.k2 {
                let (da, db) = (pa[j] - ma, pb[j] - mb);
                ga[r.start + j] += g * sign * (db / (sa * sb) - ncc * da / va) / n;
                gb[r.start + j] += g * sign * (da / (sa * sb) - ncc * db / vb) / n;
            }
        }
        let shape = inputs[0].shape().to_vec();
        Ok(vec![
            needs[0].then(|| Tensor::new(shape.clone(), ga)).transpose()?,
            needs[1].then(|| Tensor::new(shape, gb)).transpose()?,
        ])
    }
}

/// Per-patch residual smoothness `(1 - NCC(r1, r2)) + var(r2)` (or
/// `NCC + var` with `literal_sign`), for patches of `k2` consecutive entries
/// of the `[P * k2, 1]` residual columns `r1` and `r2`. The correlation part
/// is dropped for patches whose standard deviation is below `eps`.
/// Returns `[P, 1]`.
pub fn ncc_smoothness<S: Real>(
    tape: &mut Tape<'_, S>,
    r1: Var,
    r2: Var,
    k2: usize,
    eps: f64,
    literal_sign: bool,
) -> Result<Var> {
    let (a, b) = (tape.value(r1), tape.value(r2));
    if a.len() != b.len() || a.len() % k2 != 0 || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "ncc",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let op = NccOp {
        k2,
        literal: literal_sign,
        eps: cst(eps),
    };
    let out = op.forward(a.data(), b.data());
    let p = out.len();
    tape.custom(&[r1, r2], Tensor::new([p, 1], out)?, Box::new(op))
}

/// Mean of `|r - 1|`.
pub fn residual_reg<S: Real>(tape: &mut Tape<'_, S>, r: Var) -> Result<Var> {
    let d = tape.scale_shift(r, S::one(), -S::one())?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `-[m ln a + (1 - m) ln(1 - a)]` elementwise, with `a` clamped to
/// `[eps, 1 - eps]`. `target` must have the shape of `a`.
fn bce<S: Real>(tape: &mut Tape<'_, S>, a: Var, target: Var, eps: f64) -> Result<Var> {
    let a = tape.clamp(a, cst(eps), cst(1.0 - eps))?;
    let la = tape.ln(a)?;
    let one_minus = tape.scale_shift(a, -S::one(), S::one())?;
    let lb = tape.ln(one_minus)?;
    let t_inv = tape.scale_shift(target, -S::one(), S::one())?;
    let x = tape.mul(target, la)?;
    let y = tape.mul(t_inv, lb)?;
    let s = tape.add(x, y)?;
    tape.scale_shift(s, -S::one(), S::zero())
}

fn max_alpha<S: Real>(tape: &mut Tape<'_, S>, alpha: Var) -> Result<Var> {
    if tape.shape(alpha)[1] == 1 {
        Ok(alpha)
    } else {
        tape.row_max(alpha)
    }
}

/// Unweighted alpha regulariser: mean binary self-entropy of `max_n alpha_n`,
/// or mean BCE of `max_n alpha_n` against 1 with `target_one`.
pub fn alpha_reg_loss<S: Real>(tape: &mut Tape<'_, S>, alpha: Var, eps: f64, target_one: bool) -> Result<Var> {
    let m = max_alpha(tape, alpha)?;
    let target = if target_one {
        tape.constant(Tensor::filled(tape.shape(m).to_vec(), S::one()))?
    } else {
        tape.clamp(m, cst(eps), cst(1.0 - eps))?
    };
    let h = bce(tape, m, target, eps)?;
    tape.mean(h)
}

/// Unweighted bootstrap term: mean BCE between `max_n alpha_n` and the
/// reference mask `mask: [n, 1]`.
pub fn alpha_bootstrap_loss<S: Real>(tape: &mut Tape<'_, S>, alpha: Var, mask: Var, eps: f64) -> Result<Var> {
    let m = max_alpha(tape, alpha)?;
    let b = bce(tape, m, mask, eps)?;
    tape.mean(b)
}

struct DirichletOp<S> {
    delta: S,
}

impl<S: Real> DirichletOp<S> {
    /// `(a, b, c, n, det)` for columns `jx`, `jy` of a 2x2 Jacobian, where
    /// `J^T J = [[a, b], [b, c]]` and `n = |J^T J|_F`.
    fn parts(jx: &[S], jy: &[S]) -> (S, S, S, S, S) {
        let a = jx[0] * jx[0] + jx[1] * jx[1];
        let b = jx[0] * jy[0] + jx[1] * jy[1];
        let c = jy[0] * jy[0] + jy[1] * jy[1];
        let two = S::one() + S::one();
        let n = (a * a + two * b * b + c * c).sqrt();
        let det = jx[0] * jy[1] - jy[0] * jx[1];
        (a, b, c, n, det)
    }

    fn value(&self, jx: &[S], jy: &[S]) -> S {
        let (_, _, _, n, det) = Self::parts(jx, jy);
        n * (S::one() + S::one() / (det * det).max(self.delta))
    }
}

impl<S: Real> CustomOp<S> for DirichletOp<S> {
    fn name(&self) -> &str {
        "symmetric dirichlet"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad_output: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (jx, jy) = (inputs[0].data(), inputs[1].data());
        let mut gx = vec![S::zero(); jx.len()];
        let mut gy = vec![S::zero(); jy.len()];
        let two = S::one() + S::one();
        for (i, &g) in grad_output.data().iter().enumerate() {
            let (x, y) = (&jx[2 * i..2 * i + 2], &jy[2 * i..2 * i + 2]);
            let (a, b, c, n, det) = Self::parts(x, y);
            let q = det * det;
            let floored = q <= self.delta;
            let inv = S::one() / q.max(self.delta);
            let dn = g * (S::one() + inv);
            if n > S::zero() {
                let (na, nb, nc) = (a / n, two * b / n, c / n);
                for k in 0..2 {
                    gx[2 * i + k] += dn * (na * two * x[k] + nb * y[k]);
                    gy[2 * i + k] += dn * (nc * two * y[k] + nb * x[k]);
                }
            }
            if !floored {
                let dq = -g * n * inv * inv;
                let dd = dq * two * det;
                gx[2 * i] += dd * y[1];
                gx[2 * i + 1] -= dd * y[0];
                gy[2 * i] -= dd * x[1];
                gy[2 * i + 1] += dd * x[0];
            }
        }
        let shape = inputs[0].shape().to_vec();
        Ok(vec![
            needs[0].then(|| Tensor::new(shape.clone(), gx)).transpose()?,
            needs[1].then(|| Tensor::new(shape, gy)).transpose()?,
        ])
    }
}

/// Symmetric Dirichlet energy `|J^T J|_F + |(J^T J)^-1|_F` per row of the
/// Jacobian columns `jx`, `jy: [n, 2]`. The inverse uses
/// `max(det(J^T J), delta)` so singular Jacobians stay finite. Returns
/// `[n, 1]`.
pub fn symmetric_dirichlet<S: Real>(tape: &mut Tape<'_, S>, jx: Var, jy: Var, delta: f64) -> Result<Var> {
    let (x, y) = (tape.value(jx), tape.value(jy));
    if x.shape() != y.shape() || x.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "rigidity",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let op = DirichletOp { delta: cst(delta) };
    let n = x.rows();
    let out: Vec<S> = (0..n).map(|i| op.value(x.row(i), y.row(i))).collect();
    tape.custom(&[jx, jy], Tensor::new([n, 1], out)?, Box::new(op))
}

/// Unweighted rigidity: mean over valid anchors of the summed per-layer
/// Dirichlet energies. Finite-difference Jacobians are scaled by
/// `((W - 1) / 2, (H - 1) / 2)` so an isometric pixel-to-texture map has
/// `J = I`.
#[allow(clippy::too_many_arguments)]
pub fn rigidity_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    uv_p: &[Var],
    uv_x: &[Var],
    uv_y: &[Var],
    width: usize,
    height: usize,
    delta: f64,
    valid: &[bool],
) -> Result<Var> {
    let sx = cst::<S>((width.max(2) - 1) as f64 / 2.0);
    let sy = cst::<S>((height.max(2) - 1) as f64 / 2.0);
    let mut total: Option<Var> = None;
    for l in 0..uv_p.len() {
        let dx = tape.sub(uv_x[l], uv_p[l])?;
        let jx = tape.scale_shift(dx, sx, S::zero())?;
        let dy = tape.sub(uv_y[l], uv_p[l])?;
        let jy = tape.scale_shift(dy, sy, S::zero())?;
        let d = symmetric_dirichlet(tape, jx, jy, delta)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    tape.weighted_sum(total.expect("at least one layer"), mean_weights(valid))
}

/// Everything the objective needs for one batch of `n` anchors.
pub struct LossInputs<'a> {
    /// Model evaluated at the stacked points `[p; p_x; p_y]` (`3n` rows).
    pub rec: &'a Reconstruction,
    /// Ground-truth colours at the stacked points, `[3n, 3]`.
    pub gt_color: Var,
    /// Reference masks at the stacked points, `[3n, 1]`.
    pub mask: Var,
    /// Anchors whose right and down neighbours are inside the frame.
    pub grad_valid: &'a [bool],
    /// Per layer mappings at the flow targets `[q_fwd; q_bwd]`, `[2n, 2]`.
    pub flow_uv: &'a [Var],
    /// Opacities at the flow targets, `[2n, N_f]`.
    pub flow_alpha: Var,
    /// Gate times inclusion, length `2n` (forward then backward).
    pub flow_gate: &'a [bool],
    /// Per layer residual patches at two frames, each `[P * k^2, 1]`.
    pub patches: &'a [(Var, Var)],
    pub width: usize,
    pub height: usize,
}

/// Weighted objective with its itemised report. Rigidity and bootstrapping
/// follow the schedules in `weights`.
pub fn total_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    weights: &LossWeights,
    iteration: u64,
    inp: &LossInputs<'_>,
) -> Result<(Var, LossReport)> {
    let n3 = tape.shape(inp.rec.color)[0];
    let n = n3 / 3;
    if n3 != 3 * n || inp.grad_valid.len() != n || inp.flow_gate.len() != 2 * n {
        return Err(Error::invalid("loss inputs disagree on the batch size"));
    }
    let layers = inp.rec.uv.len();
    let rows = |tape: &mut Tape<'_, S>, v: Var, k: usize| tape.slice_rows(v, k * n, n);

    let mut terms: Vec<(&str, f64, Var)> = Vec::new();
    let rgb = rgb_loss(tape, inp.rec.color, inp.gt_color)?;
    terms.push(("rgb", weights.rgb, rgb));

    let (cp, cx, cy) = (
        rows(tape, inp.rec.color, 0)?,
        rows(tape, inp.rec.color, 1)?,
        rows(tape, inp.rec.color, 2)?,
    );
    let (gp, gx, gy) = (
        rows(tape, inp.gt_color, 0)?,
        rows(tape, inp.gt_color, 1)?,
        rows(tape, inp.gt_color, 2)?,
    );
    let grad = grad_loss(tape, cp, cx, cy, gp, gx, gy, inp.grad_valid)?;
    terms.push(("grad", weights.grad, grad));

    let mut uv_p = Vec::new();
    let mut uv_x = Vec::new();
    let mut uv_y = Vec::new();
    let mut uv_pp = Vec::new();
    for l in 0..layers {
        let p = rows(tape, inp.rec.uv[l], 0)?;
        uv_x.push(rows(tape, inp.rec.uv[l], 1)?);
        uv_y.push(rows(tape, inp.rec.uv[l], 2)?);
        uv_pp.push(tape.concat_rows(&[p, p])?);
        uv_p.push(p);
    }
    let alpha_p = rows(tape, inp.rec.alpha, 0)?;
    let alpha_pp = tape.concat_rows(&[alpha_p, alpha_p])?;
    let (flow_p, flow_a) = flow_loss(
        tape,
        &uv_pp,
        inp.flow_uv,
        alpha_pp,
        inp.flow_alpha,
        mean_weights(inp.flow_gate),
    )?;
    terms.push(("flow_p", weights.flow_p, flow_p));
    terms.push(("flow_alpha", weights.flow_alpha, flow_a));

    let sparsity = sparsity_loss(tape, inp.rec.alpha, &inp.rec.texture)?;
    terms.push(("sparsity", weights.sparsity, sparsity));

    let k2 = weights.ncc_patch * weights.ncc_patch;
    let mut smooth = Vec::new();
    let mut reg = Vec::new();
    for l in 0..layers {
        let (r1, r2) = inp.patches[l];
        let s = ncc_smoothness(tape, r1, r2, k2, weights.ncc_eps, weights.literal_ncc_sign)?;
        smooth.push((tape.mean(s)?, S::one()));
        reg.push((residual_reg(tape, inp.rec.residual[l])?, S::one()));
    }
    let smooth = tape.combine(&smooth)?;
    let reg = tape.combine(&reg)?;
    terms.push(("res_smooth", weights.res_smooth, smooth));
    terms.push(("res_reg", weights.res_reg, reg));

    let areg = alpha_reg_loss(tape, inp.rec.alpha, weights.log_eps, weights.alpha_reg_target_one)?;
    terms.push(("alpha_reg", weights.alpha_reg, areg));

    if weights.rigid_active(iteration) {
        let r = rigidity_loss(
            tape,
            &uv_p,
            &uv_x,
            &uv_y,
            inp.width,
            inp.height,
            weights.rigid_delta,
            inp.grad_valid,
        )?;
        terms.push(("rigid", weights.rigid, r));
    }
    if weights.bootstrap_active(iteration) {
        let b = alpha_bootstrap_loss(tape, inp.rec.alpha, inp.mask, weights.log_eps)?;
        terms.push(("alpha_boot", weights.alpha_boot, b));
    }

    let combo: Vec<(Var, S)> = terms.iter().map(|&(_, w, v)| (v, cst(w))).collect();
    let total = tape.combine(&combo)?;
    let report = LossReport {
        iteration,
        terms: terms
            .iter()
            .map(|&(name, weight, v)| LossTerm {
                name: name.to_string(),
                weight,
                value: tape.value(v).item().to_f64_lossy(),
            })
            .collect(),
        total: tape.value(total).item().to_f64_lossy(),
    };
    Ok((total, report))
}
