//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{sample_point_batch, synth_generate, SynthSceneSpec};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::{init_params, NvdArch, NvdVars};
use crate::trainer::batch_loss;

/// Step and denominator floor of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub h: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`;
    /// the floor is raised when rounding in `f` would dominate it.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { h: 1e-5, floor: 1e-6 }
    }
}

/// Largest discrepancy found by a check.
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
    /// Entries left out because the function is not smooth within `h` of
    /// them (the estimates at `h` and `h/2` disagree).
    pub skipped: usize,
}

/// Relative disagreement between the `h` and `h/2` central differences above
/// which an entry is treated as sitting on a kink.
const KINK_TOLERANCE: f64 = 5e-5;

/// The denominator floor is raised to this multiple of the rounding error
/// of a central difference of `f`, `eps * |f| / h`.
const ROUNDOFF_MARGIN: f64 = 1e5;

fn effective_floor(cfg: FdConfig, f: f64) -> f64 {
    cfg.floor.max(ROUNDOFF_MARGIN * f64::EPSILON * f.abs() / cfg.h)
}

impl FdReport {
    pub fn passes(&self, tolerance: f64, max_skip_fraction: f64) -> bool {
        self.max_rel_error <= tolerance && (self.skipped as f64) <= max_skip_fraction * (self.entries + self.skipped) as f64
    }

    /// Records one entry from its central differences at `h` and `h/2`.
    fn record_pair(&mut self, analytic: f64, wide: f64, narrow: f64, floor: f64, what: impl FnOnce() -> String) {
        let scale = wide.abs().max(narrow.abs()).max(floor);
        if (wide - narrow).abs() > KINK_TOLERANCE * scale {
            self.skipped += 1;
            return;
        }
        self.record(analytic, wide, floor, what);
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64, what: impl FnOnce() -> String) {
        self.entries += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > self.max_rel_error || self.entries == 1 {
            self.max_rel_error = rel;
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", what());
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        self.entries += other.entries;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Checks gradients with respect to every entry of each input tensor.
///
/// `f` builds a scalar from leaves created in the given order.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], cfg: FdConfig, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::detached();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::detached();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward_leaves(out)?;
    let floor = effective_floor(cfg, tape.value(out).item());
    let mut report = FdReport::default();
    let mut work = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[k] = x0 + h;
                let plus = eval(&work)?;
                work[i].data_mut()[k] = x0 - h;
                let minus = eval(&work)?;
                work[i].data_mut()[k] = x0;
                Ok((plus - minus) / (2.0 * h))
            };
            let (wide, narrow) = (central(cfg.h)?, central(cfg.h / 2.0)?);
            report.record_pair(analytic[k], wide, narrow, floor, || format!("input {i}[{k}]"));
        }
    }
    Ok(report)
}

/// Checks parameter gradients on at most `per_tensor` randomly chosen entries
/// of every trainable parameter.
///
/// `f` must build the scalar from the parameters of the tape it is given.
pub fn check_params<F, R>(
    store: &mut ParamStore<f64>,
    cfg: FdConfig,
    per_tensor: usize,
    rng: &mut R,
    f: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
    R: Rng,
{
    store.zero_grads();
    let floor = {
        let (view, mut sink) = store.split();
        let mut tape = Tape::new(view);
        let out = f(&mut tape)?;
        tape.backward(out, &mut sink)?;
        effective_floor(cfg, tape.value(out).item())
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store.view());
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut report = FdReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let len = store.value(id).len();
        let picks = sample(rng, len, per_tensor.min(len)).into_vec();
        for k in picks {
            let analytic = store.grad(id).data()[k];
            let base = store.value(id).clone();
            let mut central = |h: f64| -> Result<f64> {
                let mut shifted = base.clone();
                shifted.data_mut()[k] = base.data()[k] + h;
                store.set_value(id, shifted.clone())?;
                let plus = eval(store)?;
                shifted.data_mut()[k] = base.data()[k] - h;
                store.set_value(id, shifted)?;
                let minus = eval(store)?;
                store.set_value(id, base.clone())?;
                Ok((plus - minus) / (2.0 * h))
            };
            let (wide, narrow) = (central(cfg.h)?, central(cfg.h / 2.0)?);
            let name = store.name(id).to_string();
            report.record_pair(analytic, wide, narrow, floor, || format!("{name}[{k}]"));
        }
    }
    Ok(report)
}

/// Relative tolerance of the loss suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Largest share of entries the suite may skip as kinks.
pub const SUITE_MAX_SKIP: f64 = 0.05;

/// Outcome of checking one loss term.
#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: String,
    pub report: FdReport,
}

impl TermCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(SUITE_TOLERANCE, SUITE_MAX_SKIP)
    }
}

/// Names of the objective's terms, in report order.
pub const LOSS_TERMS: [&str; 10] = [
    "rgb",
    "grad",
    "flow_p",
    "flow_alpha",
    "sparsity",
    "res_smooth",
    "res_reg",
    "alpha_reg",
    "rigid",
    "alpha_boot",
];

fn isolate(term: &str) -> LossWeights {
    let mut w = LossWeights {
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
    match term {
        "rgb" => w.rgb = 1.0,
        "grad" => w.grad = 1.0,
        "flow_p" => w.flow_p = 1.0,
        "flow_alpha" => w.flow_alpha = 1.0,
        "sparsity" => w.sparsity = 1.0,
        "res_smooth" => w.res_smooth = 1.0,
        "res_reg" => w.res_reg = 1.0,
        "alpha_reg" => w.alpha_reg = 1.0,
        "rigid" => w.rigid = 1.0,
        "alpha_boot" => w.alpha_boot = 1.0,
        _ => return LossWeights::default(),
    }
    w
}

/// Finite-difference check of every loss term (and the weighted total) with
/// respect to the parameters of a random 64-bit model on a small synthetic
/// scene. `per_tensor` entries are sampled from each parameter tensor.
pub fn loss_suite(seed: u64, per_tensor: usize, arch: &NvdArch) -> Result<Vec<TermCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SynthSceneSpec::centred(16, 4, seed, (1.0, 0.5));
    let ds = synth_generate(&scene)?;
    let batch = sample_point_batch::<f64, _>(&ds, 12, 4, 3, &mut rng)?;
    let mut store = init_params::<f64, _>(arch, &mut rng)?;
    let ids: Vec<ParamId> = arch.tensors().iter().map(|t| store.id(&t.name).expect("fresh store")).collect();
    let mut out = Vec::new();
    let names = LOSS_TERMS.iter().copied().chain(std::iter::once("total"));
    for term in names {
        let weights = isolate(term);
        let f = |tape: &mut Tape<'_, f64>| -> Result<Var> {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let vars = NvdVars::from_ordered(arch, &vars)?;
            let (loss, _) = batch_loss(tape, arch, &vars, &batch, ds.width(), ds.height(), &weights, 0)?;
            Ok(loss)
        };
        let report = check_params(&mut store, FdConfig::default(), per_tensor, &mut rng, f)?;
        out.push(TermCheck {
            term: term.to_string(),
            report,
        });
    }
    Ok(out)
}
