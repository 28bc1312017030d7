use crate::{ParamStore, Result, Tape, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    /// Coordinates whose `±h` probe crossed a kink and were re-checked at a
    /// nearby point.
    pub nudged: usize,
}

// Offsets, in units of h, tried when a probe straddles a kink.
const NUDGES: [f64; 8] = [3.0, -3.0, 7.0, -7.0, 15.0, -15.0, 31.0, -31.0];

/// Checks every coordinate of every parameter in `store`.
///
/// `f` records a scalar loss on the provided tape; it must be deterministic
/// (any sampling noise frozen outside of it). The numeric derivative is
/// `(f(p + h) − f(p − h)) / 2h`, with the subtraction done by
/// [`Tape::difference`]. Relative error at a coordinate is
/// `|analytic − numeric| / max(1e-8, |analytic|)`.
///
/// When the two probes take different branches at a relu, min, max or clamp
/// the coordinate is moved a few multiples of `h` along its axis until all
/// three evaluation points agree, and both derivatives are taken there.
///
/// The store's gradients are left holding the analytic gradient on return.
pub fn finite_diff_check<F>(mut f: F, store: &mut ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let base = tape;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
        nudged: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let len = store.value(&name)?.len();
        for k in 0..len {
            let original = store.value(&name)?.data()[k];
            let (plus, minus, root) = probe(&mut f, store, &name, k, original, h)?;
            let mut analytic = store.grad(&name)?.data()[k];
            let mut numeric = plus.difference(&minus, root) / (2.0 * h);

            if !(plus.same_branches(&base) && minus.same_branches(&base)) {
                if let Some((a, n)) = nudge(&mut f, store, &name, k, original, h)? {
                    analytic = a;
                    numeric = n;
                    report.nudged += 1;
                }
            }

            let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore, name: &str, k: usize, v: f64) -> Result<()> {
    store.get_mut(name)?.value.data_mut()[k] = v;
    Ok(())
}

fn record<F>(f: &mut F, store: &ParamStore) -> Result<(Tape, Var)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok((tape, loss))
}

fn probe<F>(f: &mut F, store: &mut ParamStore, name: &str, k: usize, center: f64, h: f64) -> Result<(Tape, Tape, Var)>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    set(store, name, k, center + h)?;
    let plus = record(f, store);
    set(store, name, k, center - h)?;
    let minus = record(f, store);
    set(store, name, k, center)?;
    let (plus, root) = plus?;
    let (minus, _) = minus?;
    Ok((plus, minus, root))
}

// Analytic and numeric derivative at the first shifted center whose probes
// agree with it on every branch.
fn nudge<F>(f: &mut F, store: &mut ParamStore, name: &str, k: usize, original: f64, h: f64) -> Result<Option<(f64, f64)>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    for m in NUDGES {
        let center = original + m * h;
        let probed = probe(f, store, name, k, center, h);
        set(store, name, k, original)?;
        let (plus, minus, root) = probed?;
        let mut shifted = store.clone();
        set(&mut shifted, name, k, center)?;
        shifted.zero_grads();
        let (tape, loss) = record(f, &shifted)?;
        if !(plus.same_branches(&tape) && minus.same_branches(&tape)) {
            continue;
        }
        tape.backward(loss, &mut shifted)?;
        let analytic = shifted.grad(name)?.data()[k];
        let numeric = plus.difference(&minus, root) / (2.0 * h);
        return Ok(Some((analytic, numeric)));
    }
    Ok(None)
}
