use super::{Tape, Tensor};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the tape gradient of a scalar function against central
/// differences at `x0`. The relative error is
/// `|a - n| / max(1, |a|, |n|)` per coordinate; the report carries the worst.
pub fn grad_check<F>(f: F, x0: &[f64], shape: &[usize], h: f64) -> GradCheckReport
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let tape = Tape::new();
    let x = tape.var(x0.to_vec(), shape);
    let loss = f(&tape, &x);
    assert_eq!(loss.numel(), 1, "grad_check: function must return a scalar");
    loss.backward();
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x0.len()]);

    let eval = |pt: &[f64]| -> f64 {
        let t = Tape::no_grad();
        let xt = t.var(pt.to_vec(), shape);
        f(&t, &xt).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe);
        probe[i] = orig - h;
        let fm = eval(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}

/// Panic unless the analytic gradient matches central differences to `1e-4`.
pub fn assert_grad_ok<F>(name: &str, f: F, x0: &[f64], shape: &[usize])
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let r = grad_check(f, x0, shape, 1e-5);
    assert!(
        r.max_rel_err <= 1e-4,
        "{name}: gradient mismatch at index {} (analytic {}, numeric {}, rel err {:.3e})",
        r.worst_index,
        r.analytic,
        r.numeric,
        r.max_rel_err
    );
}
