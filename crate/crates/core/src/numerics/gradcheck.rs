//! Central finite-difference verification of hand-written backward passes.

use super::param::Module;
use super::Tensor2;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Worst-case discrepancy found by a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = format!("{name}: analytic {analytic:.3e} vs numeric {numeric:.3e}");
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps round-off on
/// vanishing gradients from registering as relative error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Checks parameter gradients of `module`.
///
/// `eval(module, backward)` must compute a deterministic scalar loss; when
/// `backward` is true it must also accumulate parameter gradients into the
/// (already zeroed) module.
pub fn check_params<M, F>(module: &mut M, mut eval: F) -> GradReport
where
    M: Module,
    F: FnMut(&mut M, bool) -> f64,
{
    module.zero_grad();
    eval(module, true);
    let mut analytic = Vec::new();
    module.visit_params("", &mut |name, p| analytic.push((name.to_string(), p.grad.clone())));
    module.zero_grad();

    let mut report = GradReport::default();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        for (flat, &a) in grad.iter().enumerate() {
            let plus = perturb_and_eval(module, &mut eval, pi, flat, FD_STEP);
            let minus = perturb_and_eval(module, &mut eval, pi, flat, -FD_STEP);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(format!("{name}[{flat}]"), a, numeric);
        }
    }
    report
}

fn perturb_and_eval<M: Module, F: FnMut(&mut M, bool) -> f64>(
    module: &mut M,
    eval: &mut F,
    param_index: usize,
    flat: usize,
    h: f64,
) -> f64 {
    nudge(module, param_index, flat, h);
    let v = eval(module, false);
    nudge(module, param_index, flat, -h);
    v
}

fn nudge<M: Module>(module: &mut M, param_index: usize, flat: usize, h: f64) {
    let mut i = 0;
    module.visit_params("", &mut |_, p| {
        if i == param_index {
            let slot = p.value.iter_mut().nth(flat).expect("flat index in range");
            *slot += h;
        }
        i += 1;
    });
}

/// Checks an input gradient: `eval(x)` returns the loss, `analytic` is the
/// gradient the backward pass produced at `x`.
pub fn check_input<F: FnMut(&Tensor2) -> f64>(x: &Tensor2, analytic: &Tensor2, mut eval: F) -> GradReport {
    let mut report = GradReport::default();
    let mut probe = x.clone();
    for (idx, &a) in analytic.indexed_iter() {
        let orig = probe[idx];
        probe[idx] = orig + FD_STEP;
        let plus = eval(&probe);
        probe[idx] = orig - FD_STEP;
        let minus = eval(&probe);
        probe[idx] = orig;
        report.record(format!("input{idx:?}"), a, (plus - minus) / (2.0 * FD_STEP));
    }
    report
}
