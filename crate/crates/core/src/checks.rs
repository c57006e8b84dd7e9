//! Finite-difference gradient suite over every differentiable operation,
//! the composite modules and the end-to-end pretraining loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, MaskedAutoencoder, TransformerBlock};
use crate::embedding::{LaConfig, LocalAttention, PatchEmbed};
use crate::error::Result;
use crate::geometry::{build_scale_pyramid, mask_and_backproject, PointCloud};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{finite_diff_check, GradCheckConfig, GradCheckReport, PoolMode, Tape, Tensor, Var};

/// Tolerance for single operations and small modules.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the full model loss.
pub const END_TO_END_TOL: f64 = 1e-3;
/// Parameter count above which the end-to-end check subsamples entries.
pub const FULL_CHECK_LIMIT: usize = 50_000;

pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

type Body = Box<dyn Fn(&mut Tape, &ParamSet, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    /// Inputs are drawn from `[lo, hi]`.
    range: (f64, f64),
    body: Body,
}

fn case(
    name: &'static str,
    inputs: &[&[usize]],
    range: (f64, f64),
    body: impl Fn(&mut Tape, &ParamSet, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name, inputs: inputs.iter().map(|s| s.to_vec()).collect(), range, body: Box::new(body) }
}

/// Contracts a non-scalar output with fixed random weights.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn op_cases() -> Vec<Case> {
    let pos = (0.5, 2.0);
    let sym = (-1.5, 1.5);
    vec![
        case("add (broadcast)", &[&[3, 4], &[4]], sym, |t, _, v| t.add(v[0], v[1])),
        case("sub (broadcast)", &[&[2, 3, 4], &[3, 1]], sym, |t, _, v| t.sub(v[0], v[1])),
        case("mul (broadcast)", &[&[3, 4], &[1, 4]], sym, |t, _, v| t.mul(v[0], v[1])),
        case("div", &[&[3, 4], &[3, 4]], pos, |t, _, v| t.div(v[0], v[1])),
        case("scale", &[&[5]], sym, |t, _, v| t.scale(v[0], -2.5)),
        case("matmul", &[&[3, 4], &[4, 2]], sym, |t, _, v| t.matmul(v[0], v[1])),
        case("transpose", &[&[3, 4]], sym, |t, _, v| t.transpose(v[0])),
        case("reshape", &[&[3, 4]], sym, |t, _, v| t.reshape(v[0], &[2, 6])),
        case("sum", &[&[3, 4]], sym, |t, _, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        }),
        case("mean", &[&[3, 4]], sym, |t, _, v| {
            let s = t.mean(v[0])?;
            t.mul(s, s)
        }),
        case("softmax axis 0", &[&[3, 4]], sym, |t, _, v| t.softmax(v[0], 0)),
        case("softmax axis 1", &[&[2, 3, 4]], sym, |t, _, v| t.softmax(v[0], 1)),
        case("max pool", &[&[3, 5, 2]], sym, |t, _, v| t.pool(v[0], 1, PoolMode::Max)),
        case("avg pool", &[&[3, 5, 2]], sym, |t, _, v| t.pool(v[0], 1, PoolMode::Avg)),
        case("sigmoid", &[&[3, 4]], sym, |t, _, v| t.sigmoid(v[0])),
        case("gelu", &[&[3, 4]], sym, |t, _, v| t.gelu(v[0])),
        case("relu", &[&[3, 4]], sym, |t, _, v| t.relu(v[0])),
        case("group norm", &[&[2, 8, 3], &[8], &[8]], sym, |t, _, v| t.group_norm(v[0], 1, 4, v[1], v[2], 1e-5)),
        case("layer norm", &[&[3, 6], &[6], &[6]], sym, |t, _, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("channel conv", &[&[2, 3, 7], &[3], &[1]], sym, |t, _, v| t.conv_channel(v[0], v[1], v[2], 2)),
        case("gather rows", &[&[4, 3]], sym, |t, _, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        case("concat rows", &[&[2, 3], &[1, 3]], sym, |t, _, v| t.concat_rows(&[v[0], v[1], v[0]])),
        case("slice cols", &[&[3, 5]], sym, |t, _, v| t.slice_cols(v[0], 1, 4)),
        case("concat cols", &[&[3, 2], &[3, 4]], sym, |t, _, v| t.concat_cols(&[v[0], v[1]])),
        case("interpolate rows", &[&[4, 3]], sym, |t, _, v| {
            t.interpolate_rows(v[0], &[0, 1, 3, 2, 2, 0], &[0.25, 0.75, 0.5, 0.5, 1.0, 0.0], 2)
        }),
        case("chamfer", &[&[5, 3], &[4, 3]], sym, |t, _, v| t.chamfer(v[0], v[1])),
        case("batched chamfer", &[&[2, 4, 3], &[2, 3, 3]], sym, |t, _, v| t.chamfer(v[0], v[1])),
        case("cross entropy", &[&[3, 4]], sym, |t, _, v| t.cross_entropy(v[0], &[1, 3, 0])),
    ]
}

fn run_case(c: &Case, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, shape) in c.inputs.iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(c.range.0..=c.range.1)).collect();
        params.add(format!("x{i}"), Tensor::new(shape, data)?)?;
    }
    let ids: Vec<_> = params.ids().collect();
    finite_diff_check(
        |tape, p| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
            let y = (c.body)(tape, p, &vars)?;
            if tape.shape(y).iter().product::<usize>() == 1 && tape.shape(y).len() <= 1 {
                Ok(y)
            } else {
                contract(tape, y, seed ^ 0x5eed)
            }
        },
        &mut params,
        cfg,
    )
}

fn module_params(seed: u64, build: impl FnOnce(&mut ParamBuilder) -> Result<()>) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut ParamBuilder { params: &mut params, rng: &mut rng })?;
    // give normalisation shifts and zero-initialised biases non-trivial values
    for id in params.ids().collect::<Vec<_>>() {
        let t = params.get_mut(id);
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok(params)
}

fn input(seed: u64, shape: &[usize]) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Small random cloud with `n` points in the unit cube.
pub fn random_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
        None,
    )
}

fn module_entries(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();

    let la_cfg = LaConfig { window: 3, groups: 2, use_avg: true, use_max: true };
    let mut la = None;
    let mut params = module_params(seed, |b| {
        la = Some(LocalAttention::new(b, "la", 4, la_cfg)?);
        Ok(())
    })?;
    let la = la.expect("built");
    let x = input(seed + 1, &[2, 5, 4])?;
    let report = finite_diff_check(
        |tape, p| {
            let xv = tape.constant(x.clone());
            let y = la.forward(tape, p, xv)?;
            contract(tape, y, seed + 2)
        },
        &mut params,
        cfg,
    )?;
    out.push(SuiteEntry { name: "local attention".into(), report });

    let mut embed = None;
    let mut params = module_params(seed + 3, |b| {
        embed = Some(PatchEmbed::new(b, "embed", 4, 4, la_cfg)?);
        Ok(())
    })?;
    let embed = embed.expect("built");
    let patches = input(seed + 4, &[3, 5, 3])?;
    let report = finite_diff_check(
        |tape, p| {
            let y = embed.tokenize(tape, p, &patches)?;
            contract(tape, y, seed + 5)
        },
        &mut params,
        cfg,
    )?;
    out.push(SuiteEntry { name: "patch embedding".into(), report });

    let mut block = None;
    let mut params = module_params(seed + 6, |b| {
        block = Some(TransformerBlock::new(b, "block", 4, 2, 2)?);
        Ok(())
    })?;
    let block = block.expect("built");
    let tokens = input(seed + 7, &[5, 4])?;
    let report = finite_diff_check(
        |tape, p| {
            let xv = tape.constant(tokens.clone());
            let y = block.forward(tape, p, xv)?;
            contract(tape, y, seed + 8)
        },
        &mut params,
        cfg,
    )?;
    out.push(SuiteEntry { name: "transformer block".into(), report });
    Ok(out)
}

/// End-to-end check of the masked reconstruction loss for `model_cfg`.
pub fn end_to_end_check(model_cfg: &BackboneConfig, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let (model, mut params) = MaskedAutoencoder::new(model_cfg.clone(), seed)?;
    let cloud = random_cloud(model_cfg.n_points, seed + 1)?.normalized();
    let pyramid = build_scale_pyramid(&cloud, &model_cfg.sizes, &model_cfg.ks)?;
    let plan = mask_and_backproject(&pyramid, model_cfg.mask_ratio, seed + 2)?;
    finite_diff_check(|tape, p| model.loss(tape, p, &pyramid, &plan), &mut params, cfg)
}

/// Every operation and module at [`OP_TOL`], then the loss of `model_cfg`
/// at [`END_TO_END_TOL`]. Models above [`FULL_CHECK_LIMIT`] scalars are
/// checked on a few evenly spaced entries per parameter.
pub fn gradient_suite(model_cfg: &BackboneConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    let op_cfg = GradCheckConfig { tol: OP_TOL, ..GradCheckConfig::default() };
    let mut out = Vec::new();
    for (i, c) in op_cases().iter().enumerate() {
        let report = run_case(c, seed.wrapping_add(i as u64 * 101), &op_cfg)?;
        out.push(SuiteEntry { name: c.name.to_string(), report });
    }
    out.extend(module_entries(&op_cfg, seed.wrapping_add(7_000))?);
    let (_, probe) = MaskedAutoencoder::new(model_cfg.clone(), 0)?;
    let max_entries = (probe.num_scalars() > FULL_CHECK_LIMIT).then_some(3);
    let e2e_cfg =
        GradCheckConfig { tol: END_TO_END_TOL, max_entries_per_param: max_entries, ..GradCheckConfig::default() };
    let report = end_to_end_check(model_cfg, &e2e_cfg, seed.wrapping_add(9_000))?;
    out.push(SuiteEntry { name: "end-to-end pretrain loss".into(), report });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let cfg = GradCheckConfig { tol: OP_TOL, ..GradCheckConfig::default() };
        for (i, c) in op_cases().iter().enumerate() {
            let r = run_case(c, 40 + i as u64, &cfg).unwrap();
            assert!(r.passed(), "{}: max rel err {}", c.name, r.max_rel_err());
            assert!(r.checked() > 0, "{} checked nothing", c.name);
        }
    }

    #[test]
    fn modules_pass() {
        let cfg = GradCheckConfig { tol: OP_TOL, ..GradCheckConfig::default() };
        for e in module_entries(&cfg, 5).unwrap() {
            assert!(e.report.passed(), "{}: max rel err {}", e.name, e.report.max_rel_err());
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // cross-check the checker: a function whose analytic gradient ignores
        // one term must fail
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::new(&[3], vec![0.3, -0.4, 0.9]).unwrap()).unwrap();
        let r = finite_diff_check(
            |tape, p| {
                let x = tape.param(p, id);
                let c = tape.constant(Tensor::new(&[3], p.get(id).data().to_vec())?);
                let y = tape.mul(x, c)?;
                tape.sum(y)
            },
            &mut params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
