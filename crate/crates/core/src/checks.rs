//! Structural self-checks: shape schedules, parameter parity, crop geometry
//! and gradient correctness.

use serde::Serialize;

use crate::error::Result;
use crate::models::{model_gradcheck, Model, ModelConfig, SpatialPooling};
use crate::pyramid::{contrast_factor, crop_sizes, extract_stack, Interpolation, NUM_SCALES};
use crate::stimulus::{Canvas, CANVAS_SIZE, INPUT_SIZE};
use crate::tensor::gradcheck::{layer_suite, FD_TOLERANCE};
use crate::tensor::Tensor;

/// Outcome of one check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Pooled map sizes after each block of the three DCNNs.
pub const DCNN_SCHEDULES: [(SpatialPooling, [usize; 4]); 3] = [
    (SpatialPooling::NoTotal, [60, 54, 48, 42]),
    (SpatialPooling::Progressive, [60, 27, 11, 1]),
    (SpatialPooling::AtEnd, [60, 54, 48, 1]),
];

/// Exponential crop side lengths on the 1920 px canvas.
pub const CROP_SIZES: [usize; NUM_SCALES] = [60, 85, 120, 170, 240, 339, 480, 679, 960, 1358, 1920];

fn fmt_sizes(s: &[usize]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

/// Built DCNNs report the expected pooled sizes, both statically and from a
/// forward pass.
pub fn shape_schedules() -> Result<Vec<Check>> {
    let x = Tensor::<f32>::zeros(&[1, 1, INPUT_SIZE, INPUT_SIZE]);
    DCNN_SCHEDULES
        .iter()
        .map(|(p, want)| {
            let m = Model::<f32>::build(&ModelConfig::dcnn(*p))?;
            let (_, trace) = m.forward(&x)?;
            let mut got = vec![INPUT_SIZE];
            got.extend(trace.pooled_sizes());
            let ok = got == want && m.pooled_sizes() == &want[1..];
            Ok(Check::new(
                format!("schedule dcnn-{}", p.name()),
                ok,
                format!("{} (expected {})", fmt_sizes(&got), fmt_sizes(want)),
            ))
        })
        .collect()
}

/// The 11-11-11-11-1 eccentricity model has exactly as many parameters as
/// the at-end DCNN, since all scales share the same filters.
pub fn parameter_parity() -> Result<Check> {
    let d = Model::<f32>::build(&ModelConfig::dcnn(SpatialPooling::AtEnd))?.count_params();
    let e = Model::<f32>::build(&ModelConfig::eccentricity(&[11, 11, 11, 11, 1], false))?.count_params();
    Ok(Check::new(
        "parameter parity",
        d == e,
        format!("dcnn-at_end {d}, ecc-11-11-11-11-1 {e}"),
    ))
}

/// Crop sizes, contrast divisors, and the shape of an extracted stack.
pub fn crop_geometry() -> Result<Vec<Check>> {
    let sizes = crop_sizes(NUM_SCALES, INPUT_SIZE, CANVAS_SIZE, Interpolation::Exponential)?;
    let divisors: Vec<f64> = (0..NUM_SCALES).map(|i| 1.0 / contrast_factor(i, NUM_SCALES)).collect();
    let div_ok = divisors
        .iter()
        .enumerate()
        .all(|(i, d)| (d - 2f64.sqrt().powi((NUM_SCALES - 1 - i) as i32)).abs() < 1e-9)
        && (divisors[0] - 32.0).abs() < 1e-9
        && (divisors[NUM_SCALES - 1] - 1.0).abs() < 1e-12;
    let stack = extract_stack(&Canvas::blank(CANVAS_SIZE), Interpolation::Exponential)?;
    let stack_ok = stack.len() == NUM_SCALES
        && stack
            .scales
            .iter()
            .all(|s| s.width() == INPUT_SIZE && s.height() == INPUT_SIZE);
    Ok(vec![
        Check::new("crop sizes", sizes == CROP_SIZES, fmt_sizes(&sizes)),
        Check::new(
            "contrast divisors",
            div_ok,
            format!("smallest crop / {:.3}, largest / {:.3}", divisors[0], divisors[NUM_SCALES - 1]),
        ),
        Check::new(
            "scale stack",
            stack_ok,
            format!("{} scales of {INPUT_SIZE}x{INPUT_SIZE}", stack.len()),
        ),
    ])
}

/// Every structural check.
pub fn selftest() -> Result<Vec<Check>> {
    let mut out = shape_schedules()?;
    out.push(parameter_parity()?);
    out.extend(crop_geometry()?);
    Ok(out)
}

fn small(mut c: ModelConfig, input: usize) -> ModelConfig {
    c.input_size = input;
    c.channels = 3;
    c.seed = 11;
    c
}

/// Finite-difference checks of every layer, then of whole reduced-size models
/// of each family.
pub fn gradcheck(seed: u64) -> Result<Vec<Check>> {
    let mut out: Vec<Check> = layer_suite(seed)?
        .into_iter()
        .map(|r| {
            Check::new(
                r.layer.clone(),
                r.passed(),
                format!("max rel. error {:.2e} over {} entries", r.max_rel_error, r.checked),
            )
        })
        .collect();
    for cfg in [
        // Progressive pooling needs a larger input to survive two stride-2 pools.
        small(ModelConfig::dcnn(SpatialPooling::Progressive), 36),
        small(ModelConfig::dcnn(SpatialPooling::NoTotal), 20),
        small(ModelConfig::dcnn(SpatialPooling::AtEnd), 20),
        small(ModelConfig::eccentricity(&[11, 7, 5, 3, 1], true), 20),
    ] {
        let (r, skipped) = model_gradcheck(&cfg, 20, seed)?;
        out.push(Check::new(
            r.layer.clone(),
            r.passed() && r.checked > 0,
            format!(
                "max rel. error {:.2e} over {} entries ({skipped} on kinks skipped), tolerance {FD_TOLERANCE:e}",
                r.max_rel_error, r.checked
            ),
        ));
    }
    Ok(out)
}
