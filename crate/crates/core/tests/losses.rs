mod common;

use std::f64::consts::{LN_2, SQRT_2};

use hypernvd::dataio::{iteration_rng, sample_point_batch, synth_generate, SynthSceneSpec};
use hypernvd::diffcore::{Tape, Tensor, Var};
use hypernvd::gradcheck::{check_inputs, FdConfig};
use hypernvd::losses::*;
use hypernvd::model::{init_params, NvdVars};
use hypernvd::trainer::batch_loss;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluates a scalar loss built from constant inputs.
fn scalar(inputs: &[Tensor<f64>], f: impl FnOnce(&mut Tape<'_, f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::<f64>::detached();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    common::uniform(rng, shape, lo, hi)
}

fn bce(a: f64, m: f64) -> f64 {
    let a = a.clamp(1e-7, 1.0 - 1e-7);
    -(m * a.ln() + (1.0 - m) * (1.0 - a).ln())
}

#[test]
fn rgb_examples_and_oracle() {
    let c = t(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    assert_eq!(scalar(&[c.clone(), c], |tp, v| rgb_loss(tp, v[0], v[1]).unwrap()), 0.0);
    let one = scalar(&[t(&[1, 3], vec![1.0, 0.0, 0.0]), t(&[1, 3], vec![0.0; 3])], |tp, v| {
        rgb_loss(tp, v[0], v[1]).unwrap()
    });
    assert_eq!(one, 1.0);
    assert_eq!(LossWeights::default().rgb * one, 5.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[17, 3], 0.0, 1.0), random(&mut rng, &[17, 3], 0.0, 1.0));
    let mut want = 0.0;
    for i in 0..17 {
        for k in 0..3 {
            want += (a.row(i)[k] - b.row(i)[k]).powi(2);
        }
    }
    want /= 17.0;
    let got = scalar(&[a, b], |tp, v| rgb_loss(tp, v[0], v[1]).unwrap());
    assert!((got - want).abs() < 1e-14);
}

fn grad_value(parts: [&Tensor<f64>; 6], valid: &[bool]) -> f64 {
    let inputs: Vec<Tensor<f64>> = parts.iter().map(|&x| x.clone()).collect();
    scalar(&inputs, |tp, v| grad_loss(tp, v[0], v[1], v[2], v[3], v[4], v[5], valid).unwrap())
}

#[test]
fn grad_examples_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 9;
    let g: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[n, 3], 0.0, 1.0)).collect();
    let valid = vec![true; n];
    assert_eq!(grad_value([&g[0], &g[1], &g[2], &g[0], &g[1], &g[2]], &valid), 0.0);
    let shifted: Vec<Tensor<f64>> = g
        .iter()
        .map(|x| t(&[n, 3], x.data().iter().map(|v| v + 0.3).collect()))
        .collect();
    assert!(grad_value([&shifted[0], &shifted[1], &shifted[2], &g[0], &g[1], &g[2]], &valid) < 1e-28);

    let p: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[n, 3], 0.0, 1.0)).collect();
    let mut valid = vec![true; n];
    valid[3] = false;
    let mut want = 0.0;
    for i in (0..n).filter(|&i| valid[i]) {
        for nb in [1, 2] {
            for k in 0..3 {
                let dh = p[nb].row(i)[k] - p[0].row(i)[k];
                let d = g[nb].row(i)[k] - g[0].row(i)[k];
                want += (dh - d).powi(2);
            }
        }
    }
    want /= (n - 1) as f64;
    let got = grad_value([&p[0], &p[1], &p[2], &g[0], &g[1], &g[2]], &valid);
    assert!((got - want).abs() < 1e-14);
}

/// Constant-flow field `[H, W, 2]`.
fn constant_flow(h: usize, w: usize, fx: f64, fy: f64) -> Vec<f64> {
    (0..h * w).flat_map(|_| [fx, fy]).collect()
}

#[test]
fn flow_gate_examples() {
    let (h, w) = (12, 10);
    let fwd = constant_flow(h, w, 1.5, -0.5);
    let exact = flow_consistency_weights(&fwd, &constant_flow(h, w, -1.5, 0.5), h, w, 1.0);
    for r in 0..h {
        for c in 0..w {
            let (qx, qy) = (c as f64 + 1.5, r as f64 - 0.5);
            let inside = (0.0..=(w - 1) as f64).contains(&qx) && (0.0..=(h - 1) as f64).contains(&qy);
            assert_eq!(exact[r * w + c], inside as u8);
        }
    }
    let off2 = flow_consistency_weights(&fwd, &constant_flow(h, w, -1.5 + 2.0, 0.5), h, w, 1.0);
    assert!(off2.iter().all(|&g| g == 0));
    let off_half = flow_consistency_weights(&fwd, &constant_flow(h, w, -1.5 + 0.5, 0.5), h, w, 1.0);
    assert_eq!(off_half, exact);
    // Exactly one pixel of cycle error is not "smaller than one pixel".
    let off1 = flow_consistency_weights(&fwd, &constant_flow(h, w, -0.5, 0.5), h, w, 1.0);
    assert!(off1.iter().all(|&g| g == 0));
}

fn flow_values(uv_p: &[Tensor<f64>], uv_q: &[Tensor<f64>], ap: &Tensor<f64>, aq: &Tensor<f64>, w: Vec<f64>) -> (f64, f64) {
    let mut tape = Tape::<f64>::detached();
    let p: Vec<Var> = uv_p.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let q: Vec<Var> = uv_q.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let ap = tape.constant(ap.clone()).unwrap();
    let aq = tape.constant(aq.clone()).unwrap();
    let (fp, fa) = flow_loss(&mut tape, &p, &q, ap, aq, w).unwrap();
    (tape.value(fp).item(), tape.value(fa).item())
}

#[test]
fn flow_loss_vanishes_without_gate_or_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 11;
    let uv_p: Vec<_> = (0..2).map(|_| random(&mut rng, &[n, 2], -1.0, 1.0)).collect();
    let uv_q: Vec<_> = (0..2).map(|_| random(&mut rng, &[n, 2], -1.0, 1.0)).collect();
    let (ap, aq) = (random(&mut rng, &[n, 1], 0.0, 1.0), random(&mut rng, &[n, 1], 0.0, 1.0));
    assert_eq!(flow_values(&uv_p, &uv_q, &ap, &aq, vec![0.0; n]), (0.0, 0.0));
    // Time-invariant mapping and zero flow: q = p, so every mapping agrees.
    let w = vec![1.0 / n as f64; n];
    assert_eq!(flow_values(&uv_p, &uv_p, &ap, &ap, w), (0.0, 0.0));
}

#[test]
fn flow_loss_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 13;
    let uv_p: Vec<_> = (0..3).map(|_| random(&mut rng, &[n, 2], -1.0, 1.0)).collect();
    let uv_q: Vec<_> = (0..3).map(|_| random(&mut rng, &[n, 2], -1.0, 1.0)).collect();
    let (ap, aq) = (random(&mut rng, &[n, 2], 0.0, 1.0), random(&mut rng, &[n, 2], 0.0, 1.0));
    let w: Vec<f64> = (0..n).map(|i| if i % 4 == 0 { 0.0 } else { 0.1 }).collect();
    let dist = |l: usize, i: usize| {
        let (a, b) = (uv_p[l].row(i), uv_q[l].row(i));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    let (mut fp, mut fa) = (0.0, 0.0);
    for i in 0..n {
        let a = ap.row(i);
        let per = a[0] * dist(1, i) + a[1] * dist(2, i) + (1.0 - a[0]) * (1.0 - a[1]) * dist(0, i);
        fp += w[i] * per;
        fa += w[i] * ((a[0] - aq.row(i)[0]).abs() + (a[1] - aq.row(i)[1]).abs());
    }
    let (gp, ga) = flow_values(&uv_p, &uv_q, &ap, &aq, w);
    assert!((gp - fp).abs() < 1e-14 && (ga - fa).abs() < 1e-14);
}

#[test]
fn sparsity_examples_and_oracle() {
    let fg = t(&[1, 3], vec![1.0, 1.0, 1.0]);
    let bg = t(&[1, 3], vec![0.2, 0.3, 0.4]);
    let run = |a: f64| {
        scalar(&[t(&[1, 1], vec![a]), bg.clone(), fg.clone()], |tp, v| {
            sparsity_loss(tp, v[0], &[v[1], v[2]]).unwrap()
        })
    };
    assert_eq!(run(1.0), 0.0);
    assert_eq!(run(0.0), 3.0);
    assert_eq!(LossWeights::default().sparsity * run(0.0), 3.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10;
    let a = random(&mut rng, &[n, 2], 0.0, 1.0);
    let c: Vec<_> = (0..3).map(|_| random(&mut rng, &[n, 3], 0.0, 1.0)).collect();
    let mut want = 0.0;
    for f in 1..=2 {
        for i in 0..n {
            let inv = 1.0 - a.row(i)[f - 1];
            want += c[f].row(i).iter().map(|x| (inv * x).powi(2)).sum::<f64>() / n as f64;
        }
    }
    let got = scalar(&[a, c[0].clone(), c[1].clone(), c[2].clone()], |tp, v| {
        sparsity_loss(tp, v[0], &[v[1], v[2], v[3]]).unwrap()
    });
    assert!((got - want).abs() < 1e-14);
}

fn smooth(r1: &Tensor<f64>, r2: &Tensor<f64>, literal: bool) -> f64 {
    scalar(&[r1.clone(), r2.clone()], |tp, v| {
        let s = ncc_smoothness(tp, v[0], v[1], 9, 1e-4, literal).unwrap();
        tp.mean(s).unwrap()
    })
}

#[test]
fn residual_examples() {
    let ones = t(&[18, 1], vec![1.0; 18]);
    assert_eq!(smooth(&ones, &ones, false), 0.0);
    assert_eq!(scalar(&[ones], |tp, v| residual_reg(tp, v[0]).unwrap()), 0.0);
    let r15 = t(&[18, 1], vec![1.5; 18]);
    assert_eq!(scalar(&[r15], |tp, v| residual_reg(tp, v[0]).unwrap()), 0.5);

    // Identical non-constant patches: NCC = 1, so only the variance remains.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random(&mut rng, &[18, 1], 0.5, 1.5);
    let var = |patch: &[f64]| {
        let m = patch.iter().sum::<f64>() / 9.0;
        patch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 9.0
    };
    let want = (var(&p.data()[..9]) + var(&p.data()[9..])) / 2.0;
    assert!((smooth(&p, &p, false) - want).abs() < 1e-12);
    assert!((smooth(&p, &p, true) - (1.0 + want)).abs() < 1e-12);
}

#[test]
fn ncc_oracle_on_random_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (random(&mut rng, &[27, 1], 0.0, 2.0), random(&mut rng, &[27, 1], 0.0, 2.0));
    let mut want = 0.0;
    for p in 0..3 {
        let (x, y) = (&a.data()[p * 9..p * 9 + 9], &b.data()[p * 9..p * 9 + 9]);
        let (mx, my) = (x.iter().sum::<f64>() / 9.0, y.iter().sum::<f64>() / 9.0);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for j in 0..9 {
            sxy += (x[j] - mx) * (y[j] - my);
            sxx += (x[j] - mx).powi(2);
            syy += (y[j] - my).powi(2);
        }
        let ncc = sxy / (sxx.sqrt() * syy.sqrt());
        want += (1.0 - ncc) + syy / 9.0;
    }
    want /= 3.0;
    assert!((smooth(&a, &b, false) - want).abs() < 1e-12);
}

#[test]
fn ncc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [random(&mut rng, &[18, 1], 0.5, 1.5), random(&mut rng, &[18, 1], 0.5, 1.5)];
    for literal in [false, true] {
        let report = check_inputs(&inputs, FdConfig::default(), |tp, v| {
            let s = ncc_smoothness(tp, v[0], v[1], 9, 1e-4, literal)?;
            tp.mean(s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

fn areg(a: f64, target_one: bool) -> f64 {
    scalar(&[t(&[1, 1], vec![a])], |tp, v| alpha_reg_loss(tp, v[0], 1e-7, target_one).unwrap())
}

#[test]
fn alpha_reg_examples_and_oracle() {
    assert!(areg(0.0, false) < 2e-6 && areg(1.0, false) < 2e-6);
    assert!((areg(0.5, false) - LN_2).abs() < 1e-12);
    assert!((LossWeights::default().alpha_reg * areg(0.5, false) - 0.1 * LN_2).abs() < 1e-12);
    assert!((areg(0.5, true) - LN_2).abs() < 1e-12);
    assert!(areg(1.0, true) < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[20, 2], 0.01, 0.99);
    let want: f64 = (0..20)
        .map(|i| {
            let m = a.row(i)[0].max(a.row(i)[1]);
            bce(m, m)
        })
        .sum::<f64>()
        / 20.0;
    let got = scalar(&[a], |tp, v| alpha_reg_loss(tp, v[0], 1e-7, false).unwrap());
    assert!((got - want).abs() < 1e-13);
}

#[test]
fn bootstrap_examples_and_oracle() {
    let boot = |a: f64, m: f64| {
        scalar(&[t(&[1, 1], vec![a]), t(&[1, 1], vec![m])], |tp, v| {
            alpha_bootstrap_loss(tp, v[0], v[1], 1e-7).unwrap()
        })
    };
    assert!(boot(1.0, 1.0) < 1e-6);
    assert!((boot(0.5, 1.0) - LN_2).abs() < 1e-12);
    assert!((LossWeights::default().alpha_boot * boot(0.5, 1.0) - 2.0 * LN_2).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&mut rng, &[15, 1], 0.0, 1.0);
    let m = random(&mut rng, &[15, 1], 0.0, 1.0);
    let want: f64 = (0..15).map(|i| bce(a.data()[i], m.data()[i])).sum::<f64>() / 15.0;
    let got = scalar(&[a, m], |tp, v| alpha_bootstrap_loss(tp, v[0], v[1], 1e-7).unwrap());
    assert!((got - want).abs() < 1e-13);
}

fn dirichlet(jx: [f64; 2], jy: [f64; 2]) -> f64 {
    scalar(&[t(&[1, 2], jx.to_vec()), t(&[1, 2], jy.to_vec())], |tp, v| {
        let d = symmetric_dirichlet(tp, v[0], v[1], 1e-6).unwrap();
        tp.sum(d).unwrap()
    })
}

/// `|JᵀJ|_F + |(JᵀJ)⁻¹|_F` by explicit 2x2 algebra.
fn dirichlet_oracle(jx: [f64; 2], jy: [f64; 2]) -> f64 {
    let (a, b, c) = (
        jx[0] * jx[0] + jx[1] * jx[1],
        jx[0] * jy[0] + jx[1] * jy[1],
        jy[0] * jy[0] + jy[1] * jy[1],
    );
    let det = a * c - b * b;
    let inv = [c / det, -b / det, -b / det, a / det];
    (a * a + 2.0 * b * b + c * c).sqrt() + inv.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn rigidity_closed_forms() {
    assert!((dirichlet([1.0, 0.0], [0.0, 1.0]) - 2.0 * SQRT_2).abs() < 1e-9);
    assert!((dirichlet([2.0, 0.0], [0.0, 2.0]) - 4.25 * SQRT_2).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let jx: [f64; 2] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let jy: [f64; 2] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let det = jx[0] * jy[1] - jy[0] * jx[1];
        if det.abs() < 0.05 {
            continue;
        }
        let want = dirichlet_oracle(jx, jy);
        assert!((dirichlet(jx, jy) - want).abs() < 1e-10 * want.max(1.0));
    }
    // Singular Jacobians stay finite.
    assert!(dirichlet([1.0, 0.0], [2.0, 0.0]).is_finite());
    assert!(dirichlet([0.0, 0.0], [0.0, 0.0]).is_finite());
}

#[test]
fn rigidity_of_isometric_mapping_is_two_root_two() {
    // uv = normalised pixel position: one pixel step moves uv by 2/(W-1).
    let (w, h) = (9, 7);
    let n = 5;
    let mut p = Vec::new();
    let mut px = Vec::new();
    let mut py = Vec::new();
    for i in 0..n {
        let (c, r) = (i as f64, (i % 3) as f64);
        let uv = |c: f64, r: f64| [2.0 * c / (w - 1) as f64 - 1.0, 2.0 * r / (h - 1) as f64 - 1.0];
        p.extend(uv(c, r));
        px.extend(uv(c + 1.0, r));
        py.extend(uv(c, r + 1.0));
    }
    let v = scalar(&[t(&[n, 2], p), t(&[n, 2], px), t(&[n, 2], py)], |tp, v| {
        rigidity_loss(tp, &[v[0]], &[v[1]], &[v[2]], w, h, 1e-6, &[true; 5]).unwrap()
    });
    assert!((v - 2.0 * SQRT_2).abs() < 1e-9);
}

#[test]
fn dirichlet_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random(&mut rng, &[6, 2], -1.5, 1.5), random(&mut rng, &[6, 2], -1.5, 1.5)];
    let report = check_inputs(&inputs, FdConfig::default(), |tp, v| {
        let d = symmetric_dirichlet(tp, v[0], v[1], 1e-6)?;
        tp.mean(d)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn bce_terms_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [random(&mut rng, &[8, 2], 0.05, 0.95), random(&mut rng, &[8, 1], 0.0, 1.0)];
    let report = check_inputs(&inputs, FdConfig::default(), |tp, v| {
        let a = alpha_reg_loss(tp, v[0], 1e-7, false)?;
        let first = tp.slice_cols(v[0], 0, 1)?;
        let b = alpha_bootstrap_loss(tp, first, v[1], 1e-7)?;
        tp.combine(&[(a, 1.0), (b, 1.0)])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

/// Report of `batch_loss` on a small synthetic scene.
fn scene_report(weights: &LossWeights, iteration: u64, seed: u64) -> LossReport {
    let arch = common::small_arch();
    let ds = synth_generate(&SynthSceneSpec::centred(16, 4, seed, (1.0, 0.5))).unwrap();
    let store = init_params::<f64, _>(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let batch = sample_point_batch(&ds, 32, 4, 3, &mut iteration_rng(seed, 0)).unwrap();
    let mut tape = Tape::new(store.view());
    let vars = NvdVars::from_store(&mut tape, &store, &arch).unwrap();
    let (total, report) = batch_loss(&mut tape, &arch, &vars, &batch, 16, 16, weights, iteration).unwrap();
    assert_eq!(tape.value(total).item(), report.total);
    report
}

#[test]
fn schedules_drop_terms() {
    let w = LossWeights::default();
    let early = scene_report(&w, 0, 1);
    let names: Vec<&str> = early.terms.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(
        names,
        ["rgb", "grad", "flow_p", "flow_alpha", "sparsity", "res_smooth", "res_reg", "alpha_reg", "rigid", "alpha_boot"]
    );
    let mid = scene_report(&w, 7000, 1);
    assert!(mid.term("rigid").is_none() && mid.term("alpha_boot").is_some());
    let late = scene_report(&w, 12_000, 1);
    assert!(late.term("rigid").is_none() && late.term("alpha_boot").is_none());
    let expected: f64 = early.terms.iter().filter(|t| t.name != "rigid" && t.name != "alpha_boot").map(|t| t.weight * t.value).sum();
    assert!((late.total - expected).abs() <= 1e-12 * expected.abs());
}

#[test]
fn zero_weights_give_zero_total() {
    let w = LossWeights {
        rgb: 0.0,
        grad: 0.0,
        flow_p: 0.0,
        flow_alpha: 0.0,
        sparsity: 0.0,
        res_smooth: 0.0,
        res_reg: 0.0,
        alpha_reg: 0.0,
        rigid: 0.0,
        alpha_boot: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(scene_report(&w, 0, 2).total, 0.0);
}

#[test]
fn schedule_scaling() {
    let w = LossWeights::default();
    assert!(w.rigid_active(4999) && !w.rigid_active(5000));
    assert!(w.bootstrap_active(9999) && !w.bootstrap_active(10_000));
    let s = w.scaled_to(5000);
    assert_eq!((s.rigid_until, s.bootstrap_until), (1000, 2000));
    let s = LossWeights::default().scaled_to(25_000);
    assert_eq!((s.rigid_until, s.bootstrap_until), (5000, 10_000));
}

#[test]
fn invalid_weights_rejected() {
    for w in [
        LossWeights { rgb: -1.0, ..LossWeights::default() },
        LossWeights { grad: f64::NAN, ..LossWeights::default() },
        LossWeights { ncc_patch: 4, ..LossWeights::default() },
        LossWeights { log_eps: 0.0, ..LossWeights::default() },
    ] {
        assert!(w.validate().is_err());
    }
    assert!(LossWeights::default().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn total_is_sum_of_itemised_terms(seed in 0u64..500, rgb in 0.0f64..10.0, flow in 0.0f64..1.0, iteration in 0u64..15_000) {
        let w = LossWeights { rgb, flow_p: flow, flow_alpha: flow / 2.0, ..LossWeights::default() };
        let r = scene_report(&w, iteration, seed);
        prop_assert!((r.total - r.weighted_sum()).abs() <= 1e-6 * r.total.abs().max(1e-12));
        prop_assert!(r.terms.iter().all(|t| t.value.is_finite() && t.value >= 0.0));
    }

    #[test]
    fn gate_is_binary_and_exact_for_inverse_flows(fx in -3.0f64..3.0, fy in -3.0f64..3.0) {
        let (h, w) = (8, 8);
        let g = flow_consistency_weights(&constant_flow(h, w, fx, fy), &constant_flow(h, w, -fx, -fy), h, w, 1.0);
        prop_assert!(g.iter().all(|&x| x <= 1));
        let inside = (0..h * w).filter(|i| {
            let (qx, qy) = ((i % w) as f64 + fx, (i / w) as f64 + fy);
            (0.0..=7.0).contains(&qx) && (0.0..=7.0).contains(&qy)
        }).count();
        prop_assert_eq!(g.iter().map(|&x| x as usize).sum::<usize>(), inside);
    }
}

#[test]
fn ideal_mapping_of_translating_scene_has_zero_flow_loss() {
    for v in [(2, 0), (1, 1), (-2, 1)] {
        let (fp, fa, pairs) = common::ideal_translation_flow(32, 5, v);
        assert!(pairs > 1000);
        assert!(fp.abs() <= 1e-9 && fa.abs() <= 1e-9, "{v:?}: {fp} {fa}");
    }
}
