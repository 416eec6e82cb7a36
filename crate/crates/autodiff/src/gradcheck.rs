//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to audit.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding compare on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, RELATIVE_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }

    fn observe(&mut self, input: usize, element: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error_floored(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = Some(Mismatch {
                input,
                element,
                analytic,
                numeric,
            });
        }
    }
}

/// Evaluates `build` on fresh leaves holding `inputs` and returns the scalar
/// value together with the analytic gradient of every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], build: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((value, per_input))
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.value(loss).item()
}

fn with_element(t: &Tensor, index: usize, value: f64) -> Tensor {
    let mut data = t.to_vec();
    data[index] = value;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Compares analytic gradients against central differences with step `step`.
///
/// `selection` lists `(input, element)` coordinates to probe; `None` probes
/// every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    selection: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(inputs, build, step, selection, |_| RELATIVE_FLOOR)
}

/// Like [`check_gradients`] with the floor scaled to the loss,
/// `RELATIVE_FLOOR * max(1, |loss|)`. Rounding in the forward pass grows with
/// the loss, so entries far below that floor are not resolvable by central
/// differences.
pub fn check_gradients_loss_scaled<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    selection: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(inputs, build, step, selection, |loss| RELATIVE_FLOOR * loss.abs().max(1.0))
}

fn check<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    selection: Option<&[(usize, usize)]>,
    floor: impl Fn(f64) -> f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (value, analytic) = analytic_gradients(inputs, &build)?;
    let floor = floor(value);
    let all: Vec<(usize, usize)>;
    let coords = match selection {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for &(i, e) in coords {
        let original = inputs[i].data()[e];
        probe[i] = with_element(&inputs[i], e, original + step);
        let plus = evaluate(&probe, &build)?;
        probe[i] = with_element(&inputs[i], e, original - step);
        let minus = evaluate(&probe, &build)?;
        probe[i] = inputs[i].clone();
        let numeric = (plus - minus) / (2.0 * step);
        report.observe(i, e, analytic[i].data()[e], numeric, floor);
    }
    Ok(report)
}

/// Directional check: compares `<grad, direction>` against the central
/// difference of the loss along `direction` (one tensor per input).
pub fn check_directional<F>(inputs: &[Tensor], direction: &[Tensor], build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(inputs, &build)?;
    let projected: f64 = analytic
        .iter()
        .zip(direction)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |sign: f64| -> Vec<Tensor> {
        inputs
            .iter()
            .zip(direction)
            .map(|(t, d)| {
                let data: Vec<f64> = t.data().iter().zip(d.data()).map(|(x, v)| x + sign * step * v).collect();
                Tensor::new(t.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    };
    let plus = evaluate(&shifted(1.0), &build)?;
    let minus = evaluate(&shifted(-1.0), &build)?;
    Ok(relative_error(projected, (plus - minus) / (2.0 * step)))
}
