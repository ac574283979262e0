//! Named verification fixtures, shared by `dks verify` and the FFI.

use std::fs;
use std::path::Path;

use crate::blocks::ForwardCtx;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{build_pair_set, knowledge_match, total_loss, LossWeights, Strategy};
use crate::model::{ModelSpec, MultiHeadModel};
use crate::params::{Owner, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::verify::{
    ds_vs_dks_loss_split, fixtures, grad_check, synergy_sweep, verify_synergy_decomposition,
    GradCheckOptions, GradCheckReport, PerturbationSpec, SynergyReport, DEFAULT_BAND,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Synergy,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grads" => Ok(Suite::Grads),
            "synergy" => Ok(Suite::Synergy),
            "all" => Ok(Suite::All),
            _ => Err(Error::config(format!(
                "unknown suite {s:?} (expected grads, synergy or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Image size of the cifar-mini audit model.
    pub image_size: usize,
    /// Caps the coordinates audited per parameter group.
    pub max_coords: Option<usize>,
    /// Monte-Carlo samples per sigma.
    pub n_samples: usize,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub min_slope: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            image_size: 8,
            max_coords: None,
            n_samples: 1_000_000,
            seed: 0,
            sigmas: vec![0.2, 0.1, 0.05],
            min_slope: 3.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOutcome {
    pub suite: &'static str,
    pub fixture: String,
    pub pass: bool,
    pub detail: String,
}

/// Gradient audit of the cifar-mini three-head model under the
/// bi-directional loss: a two-sample batch in 64-bit mode.
pub fn cifar_mini_audit(
    image_size: usize,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let model = MultiHeadModel::<f64>::build(&ModelSpec::cifar_mini(4, image_size), seed)?;
    let n = 2 * 3 * image_size * image_size;
    let x = Tensor::new(
        &[2, 3, image_size, image_size],
        (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
    )?;
    let labels = [1usize, 3];
    let pairs = build_pair_set(&model.head_ids(), Strategy::BiDirectional)?;
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let xv = g.input(x.clone(), false);
        let mut ctx = ForwardCtx::train(0.0, None);
        let logits = model.forward_all_with(s, g, xv, &mut ctx)?;
        Ok(total_loss(g, &labels, &logits, &LossWeights::default(), &pairs)?.0)
    };
    let opts = GradCheckOptions {
        max_coords,
        seed,
        ..Default::default()
    };
    grad_check(model.params(), &loss, &opts)
}

fn cube_audit() -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    s.add(
        "x",
        Tensor::scalar(2.0),
        ParamKind::Trainable,
        Owner::Backbone,
    )?;
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let x = g.param(s, s.find("x").expect("x"));
        let x2 = g.mul(x, x)?;
        let x3 = g.mul(x2, x)?;
        Ok(g.sum(x3))
    };
    grad_check(&s, &loss, &GradCheckOptions::default())
}

fn detached_teacher_audit() -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let t = Tensor::from_f64(&[2, 3], &[0.2, -0.4, 0.9, 1.5, 0.0, -0.7])?;
    let st = Tensor::from_f64(&[2, 3], &[0.5, 0.1, -0.3, -1.0, 0.4, 0.8])?;
    s.add("teacher", t, ParamKind::Trainable, Owner::Backbone)?;
    s.add("student", st, ParamKind::Trainable, Owner::Backbone)?;
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let t = g.param(s, s.find("teacher").expect("teacher"));
        let st = g.param(s, s.find("student").expect("student"));
        knowledge_match(g, t, st, 1.0)
    };
    grad_check(&s, &loss, &GradCheckOptions::default())
}

fn write(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn grad_outcome(name: &str, r: &GradCheckReport) -> FixtureOutcome {
    let coords: usize = r.groups.iter().map(|g| g.coords).sum();
    FixtureOutcome {
        suite: "grads",
        fixture: name.into(),
        pass: r.pass(),
        detail: format!(
            "{} groups, {coords} coordinates, max rel error {:.3e} (tolerance {:.0e})",
            r.groups.len(),
            r.max_rel_error(),
            r.tolerance
        ),
    }
}

/// Runs the gradient fixtures; with `dir`, writes one CSV per fixture.
pub fn run_grads(opts: &SuiteOptions, dir: Option<&Path>) -> Result<Vec<FixtureOutcome>> {
    let runs = [
        ("cube", cube_audit()?),
        ("detached-teacher", detached_teacher_audit()?),
        (
            "cifar-mini-dks",
            cifar_mini_audit(opts.image_size, opts.max_coords, opts.seed)?,
        ),
    ];
    let mut out = Vec::new();
    for (name, r) in &runs {
        write(dir, &format!("grads_{name}.csv"), &r.to_csv())?;
        out.push(grad_outcome(name, r));
    }
    Ok(out)
}

fn synergy_outcome(name: &str, r: &SynergyReport) -> FixtureOutcome {
    FixtureOutcome {
        suite: "synergy",
        fixture: name.into(),
        pass: r.pass,
        detail: format!(
            "lhs {:.6} +- {:.1e} = {:.6} + {:.6}, residual {:.3e} (band {:.3e})",
            r.lhs, r.lhs_ci, r.consistency_term, r.mismatch_term, r.residual, r.tolerance
        ),
    }
}

/// Runs the perturbation fixtures; with `dir`, writes `synergy.csv` and
/// `synergy_slope.csv`.
pub fn run_synergy(opts: &SuiteOptions, dir: Option<&Path>) -> Result<Vec<FixtureOutcome>> {
    let spec = |sigma| PerturbationSpec {
        sigma,
        n_samples: opts.n_samples,
        seed: opts.seed,
    };
    let mut csv = String::from(SynergyReport::CSV_HEADER);
    csv.push('\n');
    let mut out = Vec::new();

    let linear =
        verify_synergy_decomposition(&fixtures::linear(), &[3.0], &spec(0.1), DEFAULT_BAND)?;
    let closed = (linear.lhs - 4.505).abs() <= linear.lhs_ci;
    csv += &(linear.csv_row("linear") + "\n");
    let mut o = synergy_outcome("linear", &linear);
    o.pass &= closed;
    out.push(o);

    let ident = verify_synergy_decomposition(
        &fixtures::identical_tanh(),
        &[0.1, 0.2, 0.3],
        &spec(0.3),
        DEFAULT_BAND,
    )?;
    csv += &(ident.csv_row("identical") + "\n");
    let mut o = synergy_outcome("identical", &ident);
    o.pass &= ident.lhs == 0.0 && ident.consistency_term == 0.0 && ident.mismatch_term == 0.0;
    out.push(o);

    let split = ds_vs_dks_loss_split(&fixtures::linear(), &[3.0], &[0.0], &spec(0.1))?;
    out.push(FixtureOutcome {
        suite: "synergy",
        fixture: "loss-split".into(),
        pass: split.pass,
        detail: format!(
            "L_dks {:.6} = L_ds {:.6} + synergy {:.6} (gap {:.1e})",
            split.l_dks, split.l_ds, split.synergy, split.gap
        ),
    });

    let sweep = synergy_sweep(
        &fixtures::cubic(),
        &[1.0],
        &opts.sigmas,
        opts.n_samples,
        opts.seed,
        DEFAULT_BAND,
        opts.min_slope,
    )?;
    let mut slope_csv = String::from("sigma,abs_residual,lhs_ci\n");
    for r in &sweep.rows {
        csv += &(r.csv_row("cubic") + "\n");
        slope_csv += &format!("{},{},{}\n", r.sigma, r.residual.abs(), r.lhs_ci);
    }
    slope_csv += &format!("# slope {} (min {})\n", sweep.slope, sweep.min_slope);
    out.push(FixtureOutcome {
        suite: "synergy",
        fixture: "cubic-slope".into(),
        pass: sweep.pass,
        detail: format!(
            "log-log slope of |residual| {:.3} (min {})",
            sweep.slope, sweep.min_slope
        ),
    });

    write(dir, "synergy.csv", &csv)?;
    write(dir, "synergy_slope.csv", &slope_csv)?;
    Ok(out)
}

pub fn run(suite: Suite, opts: &SuiteOptions, dir: Option<&Path>) -> Result<Vec<FixtureOutcome>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grads | Suite::All) {
        out.extend(run_grads(opts, dir)?);
    }
    if matches!(suite, Suite::Synergy | Suite::All) {
        out.extend(run_synergy(opts, dir)?);
    }
    Ok(out)
}

/// `Ok` when every fixture passed, else a verification error naming them.
pub fn require_pass(outcomes: &[FixtureOutcome]) -> Result<()> {
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}/{}", o.suite, o.fixture))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "failing fixtures: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fixtures_pass() {
        let c = cube_audit().unwrap();
        assert!(c.pass());
        let d = detached_teacher_audit().unwrap();
        assert!(d.pass());
    }

    #[test]
    fn suite_names() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!(matches!("gradz".parse::<Suite>(), Err(Error::Config(_))));
    }

    #[test]
    fn failures_are_named() {
        let o = vec![FixtureOutcome {
            suite: "synergy",
            fixture: "cubic-slope".into(),
            pass: false,
            detail: String::new(),
        }];
        let e = require_pass(&o).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("synergy/cubic-slope"));
    }
}
