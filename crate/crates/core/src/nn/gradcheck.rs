use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, NnError, ParameterStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub samples_per_param: Option<usize>,
    /// Lower bound of the relative-error denominator, so that gradients
    /// that are zero up to rounding compare on an absolute scale.
    pub denominator_floor: f64,
    /// The floor also rises to this many units of central-difference
    /// roundoff, `ε·|L| / h`. Below that level a difference quotient cannot
    /// resolve a gradient to a small relative error; `0` disables it.
    pub roundoff_units: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: Some(6),
            denominator_floor: 1e-6,
            roundoff_units: 1e5,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn exhaustive() -> Self {
        Self {
            samples_per_param: None,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    /// Parameters whose maximum relative error reaches `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.max_relative_error < tolerance))
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<48} n={:<4} rel={:.3e} abs={:.3e}",
                p.name, p.checked, p.max_relative_error, p.max_absolute_error
            )?;
        }
        Ok(())
    }
}

/// Gradient of the scalar built by `f` with respect to every parameter.
pub fn analytic_gradients<F>(store: &ParameterStore, f: &F) -> Result<Gradients, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let mut grads = store.zero_gradients();
    let mut tape = Tape::new(store);
    let root = f(&mut tape)?;
    tape.backward(root, &mut grads, 1.0)?;
    Ok(grads)
}

fn evaluate<F>(store: &ParameterStore, f: &F) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let mut tape = Tape::new(store);
    let root = f(&mut tape)?;
    Ok(tape.value(root).item())
}

/// Compares `analytic` against central finite differences of `f`.
///
/// Only parameters that receive a nonzero analytic or numeric gradient
/// somewhere in the sample are reported, so blocks that share a store with
/// unrelated weights are checked in isolation. Parameter values are
/// restored bit-exactly afterwards.
pub fn compare_gradients<F>(
    store: &mut ParameterStore,
    f: F,
    analytic: &Gradients,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let len = store.get(id).len();
        let picks: Vec<usize> = match cfg.samples_per_param {
            Some(s) if s < len => sample(&mut rng, len, s).into_vec(),
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: 0,
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
        };
        let mut touched = false;
        for idx in picks {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + cfg.step;
            let up = evaluate(store, &f);
            store.get_mut(id).data_mut()[idx] = orig - cfg.step;
            let down = evaluate(store, &f);
            store.get_mut(id).data_mut()[idx] = orig;
            let (up, down) = (up?, down?);
            let numeric = (up - down) / (2.0 * cfg.step);
            let roundoff = f64::EPSILON * up.abs().max(down.abs()) / cfg.step;
            let floor = cfg.denominator_floor.max(cfg.roundoff_units * roundoff);
            let a = analytic.get(id).data()[idx];
            touched |= a != 0.0 || numeric != 0.0;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            check.checked += 1;
            check.max_absolute_error = check.max_absolute_error.max(abs);
            check.max_relative_error = check.max_relative_error.max(rel);
        }
        if touched {
            report.params.push(check);
        }
    }
    Ok(report)
}

/// Analytic gradients of `f` checked against central differences.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_gradients(store, f, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Tensor};

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut store = ParameterStore::new(2);
        let w = store.register("w", 3, 2, Init::Xavier).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let probe = Tensor::from_rows(&[[0.3, 0.7]]).unwrap();
        let f = |tape: &mut Tape<'_>| {
            let xv = tape.input(x.clone());
            let y = tape.linear(xv, w, None)?;
            let y = tape.relu(y);
            tape.dot(y, probe.clone())
        };
        let mut grads = analytic_gradients(&store, &f).unwrap();
        let clean = compare_gradients(&mut store, f, &grads, &GradCheckConfig::exhaustive()).unwrap();
        assert!(clean.passes(1e-4), "{clean}");
        grads.get_mut(w).data_mut()[0] += 0.5;
        let bad = compare_gradients(&mut store, f, &grads, &GradCheckConfig::exhaustive()).unwrap();
        assert!(!bad.passes(1e-4));
        assert_eq!(bad.failures(1e-4)[0].name, "w");
    }

    #[test]
    fn parameters_are_restored() {
        let mut store = ParameterStore::new(2);
        let w = store.register("w", 2, 2, Init::Xavier).unwrap();
        let before = store.get(w).clone();
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        check_gradients(
            &mut store,
            |tape| {
                let xv = tape.input(x.clone());
                let y = tape.linear(xv, w, None)?;
                tape.dot(y, Tensor::from_rows(&[[1.0, 1.0]])?)
            },
            &GradCheckConfig::exhaustive(),
        )
        .unwrap();
        assert_eq!(store.get(w), &before);
    }
}
