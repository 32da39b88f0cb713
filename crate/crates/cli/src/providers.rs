//! Built-in field providers. Manufactured solutions are code, not parsed
//! expressions, so every closed-form derivative is exact; the random
//! provider draws its Fourier coefficients once from an explicit seed, so
//! one configuration always describes one continuous field, independent of
//! the grid it is later sampled on.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use dmk_core::{sig, FieldProvider64, Signature};

use crate::config::ProviderRef;
use crate::CliError;

/// Which field of the scenario a provider feeds. The slot fixes the
/// signature and the structural requirements (symmetry, invertibility).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Distortion,
    Deformation,
    Density,
    Velocity,
    Flow,
}

impl Slot {
    pub fn signature(self) -> Signature {
        match self {
            Slot::Distortion => sig::distortion(),
            Slot::Deformation => sig::real_ll(),
            Slot::Density | Slot::Flow => sig::real_ul(),
            Slot::Velocity => sig::real_u(),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Slot::Distortion => "distortion",
            Slot::Deformation => "deformation",
            Slot::Density => "density",
            Slot::Velocity => "velocity",
            Slot::Flow => "flow",
        }
    }
}

/// Builds a provider from the catalog. `lengths` are the box edges; wave
/// numbers are scaled to them so every manufactured field is periodic on
/// the configured box.
pub fn build(
    slot: Slot,
    reference: &ProviderRef,
    lengths: [f64; 3],
) -> Result<FieldProvider64, CliError> {
    match reference.name.as_str() {
        "flat" => {
            let _: NoParams = parse_params(&reference.name, &reference.params)?;
            Ok(flat(slot))
        }
        "sin-shear" => {
            let p: SinShearParams = parse_params(&reference.name, &reference.params)?;
            sin_shear(slot, p, lengths)
        }
        "contorsion-const" => {
            let p: ContorsionParams = parse_params(&reference.name, &reference.params)?;
            contorsion_const(slot, p)
        }
        "rotation" => {
            let p: RotationParams = parse_params(&reference.name, &reference.params)?;
            rotation(slot, p)
        }
        "driven-j" => {
            let p: DrivenFlowParams = parse_params(&reference.name, &reference.params)?;
            driven_flow(slot, p, lengths)
        }
        "seeded-random-smooth" => {
            let p: RandomSmoothParams = parse_params(&reference.name, &reference.params)?;
            random_smooth(slot, p, lengths)
        }
        other => Err(CliError::Config(format!(
            "unknown provider `{other}`; catalog: flat, sin-shear, contorsion-const, \
             rotation, driven-j, seeded-random-smooth"
        ))),
    }
}

fn parse_params<P: DeserializeOwned + Default>(
    name: &str,
    value: &serde_json::Value,
) -> Result<P, CliError> {
    if value.is_null() {
        return Ok(P::default());
    }
    serde_json::from_value(value.clone())
        .map_err(|e| CliError::Config(format!("provider `{name}` params: {e}")))
}

fn wrong_slot(name: &str, slot: Slot) -> CliError {
    CliError::Config(format!("provider `{name}` does not serve the {} slot", slot.label()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SinShearParams {
    amplitude: f64,
}

impl Default for SinShearParams {
    fn default() -> Self {
        Self { amplitude: 0.1 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ContorsionParams {
    strength: f64,
}

impl Default for ContorsionParams {
    fn default() -> Self {
        Self { strength: 1.0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RotationParams {
    omega: [f64; 3],
}

impl Default for RotationParams {
    fn default() -> Self {
        Self { omega: [0.0, 0.0, 0.1] }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DrivenFlowParams {
    amplitude: f64,
}

impl Default for DrivenFlowParams {
    fn default() -> Self {
        Self { amplitude: 0.05 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RandomSmoothParams {
    seed: u64,
    amplitude: f64,
    modes: usize,
}

impl Default for RandomSmoothParams {
    fn default() -> Self {
        Self { seed: 7, amplitude: 0.1, modes: 3 }
    }
}

/// Undisturbed medium: identity map fields, zero rate fields.
fn flat(slot: Slot) -> FieldProvider64 {
    let signature = slot.signature();
    let values = match slot {
        Slot::Distortion | Slot::Deformation => {
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        }
        Slot::Density | Slot::Flow => vec![0.0; 9],
        Slot::Velocity => vec![0.0; 3],
    };
    FieldProvider64::constant(signature, values).expect("catalog signature matches value count")
}

/// Single shear mode: distortion `I + a sin(k y3) B1 (x) r2` with
/// wavenumber `k = 2 pi / L3`, together with the closed forms it induces
/// for the deformation tensor and the density.
fn sin_shear(
    slot: Slot,
    p: SinShearParams,
    lengths: [f64; 3],
) -> Result<FieldProvider64, CliError> {
    let a = p.amplitude;
    let k = TAU / lengths[2];
    match slot {
        Slot::Distortion => Ok(FieldProvider64::new(
            sig::distortion(),
            move |y: [f64; 3], _, out: &mut [f64]| {
                out.fill(0.0);
                out[0] = 1.0;
                out[4] = 1.0;
                out[8] = 1.0;
                out[1] = a * (k * y[2]).sin();
            },
        )
        .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                out[1] = a * k * (k * y[2]).cos();
            }
        })),
        Slot::Deformation => Ok(FieldProvider64::new(
            sig::real_ll(),
            move |y: [f64; 3], _, out: &mut [f64]| {
                let s = a * (k * y[2]).sin();
                out.copy_from_slice(&[1.0, s, 0.0, s, 1.0 + s * s, 0.0, 0.0, 0.0, 1.0]);
            },
        )
        .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                let s = a * (k * y[2]).sin();
                let c = a * k * (k * y[2]).cos();
                out[1] = c;
                out[3] = c;
                out[4] = 2.0 * s * c;
            }
        })),
        Slot::Density => Ok(FieldProvider64::new(
            sig::real_ul(),
            move |y: [f64; 3], _, out: &mut [f64]| {
                out.fill(0.0);
                out[0] = -a * k * (k * y[2]).cos();
            },
        )
        .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
            out.fill(0.0);
            if axis == 2 {
                out[0] = a * k * k * (k * y[2]).sin();
            }
        })),
        _ => Err(wrong_slot("sin-shear", slot)),
    }
}

/// Deliberately non-realizable state: undeformed metric with a constant
/// density along the first diagonal entry. Its material connection is pure
/// contorsion with a known, resolution-independent curvature.
fn contorsion_const(slot: Slot, p: ContorsionParams) -> Result<FieldProvider64, CliError> {
    match slot {
        Slot::Deformation => Ok(flat(Slot::Deformation)),
        Slot::Density => {
            let mut values = vec![0.0; 9];
            values[0] = p.strength;
            Ok(FieldProvider64::constant(sig::real_ul(), values)
                .expect("nine entries for a rank-2 field"))
        }
        _ => Err(wrong_slot("contorsion-const", slot)),
    }
}

/// Rigid rotation `v = omega x y`. Not periodic, which is why drivers carry
/// analytic gradients instead of being differenced.
fn rotation(slot: Slot, p: RotationParams) -> Result<FieldProvider64, CliError> {
    if slot != Slot::Velocity {
        return Err(wrong_slot("rotation", slot));
    }
    let w = p.omega;
    Ok(FieldProvider64::new(sig::real_u(), move |y: [f64; 3], _, out: &mut [f64]| {
        out[0] = w[1] * y[2] - w[2] * y[1];
        out[1] = w[2] * y[0] - w[0] * y[2];
        out[2] = w[0] * y[1] - w[1] * y[0];
    })
    .with_gradient(move |_, _, axis: usize, out: &mut [f64]| {
        out.fill(0.0);
        match axis {
            0 => {
                out[1] = w[2];
                out[2] = -w[1];
            }
            1 => {
                out[0] = -w[2];
                out[2] = w[0];
            }
            _ => {
                out[0] = w[1];
                out[1] = -w[0];
            }
        }
    }))
}

/// Smooth periodic dislocation-flow pattern exercising diagonal and
/// off-diagonal couplings.
fn driven_flow(
    slot: Slot,
    p: DrivenFlowParams,
    lengths: [f64; 3],
) -> Result<FieldProvider64, CliError> {
    if slot != Slot::Flow {
        return Err(wrong_slot("driven-j", slot));
    }
    let a = p.amplitude;
    let k = [TAU / lengths[0], TAU / lengths[1], TAU / lengths[2]];
    Ok(FieldProvider64::new(sig::real_ul(), move |y: [f64; 3], _, out: &mut [f64]| {
        out.fill(0.0);
        out[0] = a * (k[0] * y[0]).sin();
        out[1] = a * (k[2] * y[2]).cos();
        out[4] = a * ((k[1] * y[1]).sin() + 0.5);
        out[6] = a * (k[1] * y[1]).cos();
        out[8] = a * (k[0] * y[0]).cos();
    })
    .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
        out.fill(0.0);
        match axis {
            0 => {
                out[0] = a * k[0] * (k[0] * y[0]).cos();
                out[8] = -a * k[0] * (k[0] * y[0]).sin();
            }
            1 => {
                out[4] = a * k[1] * (k[1] * y[1]).cos();
                out[6] = -a * k[1] * (k[1] * y[1]).sin();
            }
            _ => out[1] = -a * k[2] * (k[2] * y[2]).sin(),
        }
    }))
}

/// One Fourier mode of one component.
#[derive(Clone, Copy, Debug)]
struct Wave {
    /// Integer wave vector; the continuous wavenumber is `n_i 2 pi / L_i`.
    n: [i32; 3],
    amp: f64,
    phase: f64,
}

fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    // 53 high bits of a 64-bit draw, uniform on [0, 1).
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Draws `modes` waves whose amplitudes sum (in absolute value) to
/// `amplitude`, bounding the component by it everywhere.
fn draw_waves(rng: &mut ChaCha8Rng, modes: usize, amplitude: f64) -> Vec<Wave> {
    let mut waves = Vec::with_capacity(modes);
    for _ in 0..modes {
        let mut n = [0i32; 3];
        loop {
            for v in &mut n {
                *v = (rng.next_u32() % 5) as i32 - 2;
            }
            if n != [0, 0, 0] {
                break;
            }
        }
        let amp = 2.0 * unit_f64(rng) - 1.0;
        let phase = TAU * unit_f64(rng);
        waves.push(Wave { n, amp, phase });
    }
    let total: f64 = waves.iter().map(|w| w.amp.abs()).sum();
    if total > 0.0 {
        for w in &mut waves {
            w.amp *= amplitude / total;
        }
    }
    waves
}

fn wave_value(waves: &[Wave], k: [f64; 3], y: [f64; 3]) -> f64 {
    waves
        .iter()
        .map(|w| {
            let arg = w.n[0] as f64 * k[0] * y[0]
                + w.n[1] as f64 * k[1] * y[1]
                + w.n[2] as f64 * k[2] * y[2]
                + w.phase;
            w.amp * arg.cos()
        })
        .sum()
}

fn wave_gradient(waves: &[Wave], k: [f64; 3], y: [f64; 3], axis: usize) -> f64 {
    waves
        .iter()
        .map(|w| {
            let arg = w.n[0] as f64 * k[0] * y[0]
                + w.n[1] as f64 * k[1] * y[1]
                + w.n[2] as f64 * k[2] * y[2]
                + w.phase;
            -w.amp * w.n[axis] as f64 * k[axis] * arg.sin()
        })
        .sum()
}

/// Band-limited random smooth field with exact analytic gradients. The
/// coefficients depend only on the seed and parameters, never on the grid,
/// so refinement studies sample one and the same continuous field. Serves
/// every slot: map-like slots get `identity + field` (entrywise bound 0.25
/// enforced to keep the result invertible, and the deformation is drawn
/// symmetric), rate-like slots get the field itself.
fn random_smooth(
    slot: Slot,
    p: RandomSmoothParams,
    lengths: [f64; 3],
) -> Result<FieldProvider64, CliError> {
    if p.modes == 0 {
        return Err(CliError::Config(
            "provider `seeded-random-smooth`: `modes` must be positive".into(),
        ));
    }
    let map_like = matches!(slot, Slot::Distortion | Slot::Deformation);
    if map_like && !(p.amplitude.abs() <= 0.25) {
        return Err(CliError::Config(format!(
            "provider `seeded-random-smooth`: amplitude {} too large for an \
             invertible {} (limit 0.25)",
            p.amplitude,
            slot.label()
        )));
    }
    let signature = slot.signature();
    let ncomp = signature.component_count();
    let k = [TAU / lengths[0], TAU / lengths[1], TAU / lengths[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let mut waves: Vec<Vec<Wave>> = Vec::with_capacity(ncomp);
    if slot == Slot::Deformation {
        // Draw the upper triangle, mirror the rest: symmetric by
        // construction, positive definite by diagonal dominance.
        let mut table = vec![Vec::new(); 9];
        for p_idx in 0..3 {
            for q_idx in p_idx..3 {
                let w = draw_waves(&mut rng, p.modes, p.amplitude);
                table[p_idx * 3 + q_idx] = w.clone();
                table[q_idx * 3 + p_idx] = w;
            }
        }
        waves = table;
    } else {
        for _ in 0..ncomp {
            waves.push(draw_waves(&mut rng, p.modes, p.amplitude));
        }
    }

    let base: Vec<f64> = (0..ncomp)
        .map(|c| if map_like && c % 4 == 0 { 1.0 } else { 0.0 })
        .collect();
    let value_waves = waves.clone();
    let value_base = base.clone();
    Ok(FieldProvider64::new(signature, move |y: [f64; 3], _, out: &mut [f64]| {
        for (c, slotwaves) in value_waves.iter().enumerate() {
            out[c] = value_base[c] + wave_value(slotwaves, k, y);
        }
    })
    .with_gradient(move |y: [f64; 3], _, axis: usize, out: &mut [f64]| {
        for (c, slotwaves) in waves.iter().enumerate() {
            out[c] = wave_gradient(slotwaves, k, y, axis);
        }
    }))
}
