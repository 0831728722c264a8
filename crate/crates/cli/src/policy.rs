//! Policy selection strings: `expert`, `noisy:EPS`, `step_failure:P`,
//! `uniform` and `cloner:PATH` (a cloner saved by `gcent run --save-policy`).

use std::fs;

use anyhow::{bail, Context, Result};
use gcent_core::policies::{ClonerModel, PolicyModel};

pub fn parse_policy(s: &str) -> Result<PolicyModel> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let prob = |what: &str| -> Result<f64> {
        let p: f64 = arg.parse().with_context(|| format!("{what}: not a number: `{arg}`"))?;
        if !(0.0..=1.0).contains(&p) {
            bail!("{what} must lie in [0, 1]");
        }
        Ok(p)
    };
    Ok(match kind {
        "expert" if arg.is_empty() => PolicyModel::ScriptedExpert,
        "uniform" if arg.is_empty() => PolicyModel::Uniform,
        "noisy" => PolicyModel::NoisyExpert { epsilon: prob("epsilon")? },
        "step_failure" => PolicyModel::StepFailure { fail_prob: prob("fail_prob")? },
        "cloner" if !arg.is_empty() => {
            let text = fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
            let model: ClonerModel = serde_json::from_str(&text).with_context(|| format!("parsing {arg}"))?;
            PolicyModel::Cloner(model)
        }
        _ => bail!("unknown policy `{s}`; expected expert, noisy:EPS, step_failure:P, uniform or cloner:PATH"),
    })
}
