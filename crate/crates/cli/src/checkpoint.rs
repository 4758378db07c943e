//! Checkpoint directories: one PTensor file per parameter and moment plus
//! a `meta.txt` of `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bittrace_core::nn::Trainer;
use bittrace_core::PTensor;

use crate::error::{CliError, Result};

pub fn save(tr: &Trainer, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let opt = tr.optimizer();
    let groups = [
        ("param", tr.model().param_values()),
        ("m", opt.first_moments().to_vec()),
        ("v", opt.second_moments().to_vec()),
    ];
    for (prefix, tensors) in &groups {
        for (i, t) in tensors.iter().enumerate() {
            let path = dir.join(format!("{prefix}_{i}.ptsr"));
            t.save(&path).map_err(|e| match e {
                bittrace_core::Error::Io(io) => CliError::io(&path, io),
                other => other.into(),
            })?;
        }
    }
    let cfg = opt.config();
    let mut meta = format!(
        "precision={}\nparams={}\nstep={}\nadam_t={}\nskipped_steps={}\nlr={}\nbeta1={}\nbeta2={}\neps={}\nguard={}\n",
        tr.model().precision(),
        tr.model().params().len(),
        tr.steps(),
        opt.step_count(),
        opt.skipped_steps(),
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        tr.config().guard,
    );
    for (k, v) in extra {
        meta.push_str(&format!("{k}={v}\n"));
    }
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| CliError::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CliError::format(&path, format!("malformed line `{l}`")))
        })
        .collect()
}

/// Restores parameters, moments and counters saved by [`save`] into a
/// trainer built with the same architecture.
pub fn load(tr: &mut Trainer, dir: &Path) -> Result<()> {
    let meta = read_meta(dir)?;
    let meta_path = dir.join("meta.txt");
    let num = |key: &str| -> Result<u64> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::format(&meta_path, format!("missing or invalid `{key}`")))
    };
    let n = num("params")? as usize;
    if n != tr.model().params().len() {
        return Err(CliError::format(
            &meta_path,
            format!("checkpoint has {n} parameters, model has {}", tr.model().params().len()),
        ));
    }
    let read_group = |prefix: &str| -> Result<Vec<PTensor>> {
        (0..n)
            .map(|i| {
                let path = dir.join(format!("{prefix}_{i}.ptsr"));
                PTensor::load(&path).map_err(|e| match e {
                    bittrace_core::Error::Io(io) => CliError::io(&path, io),
                    other => CliError::format(&path, other.to_string()),
                })
            })
            .collect()
    };
    let (params, m, v) = (read_group("param")?, read_group("m")?, read_group("v")?);
    tr.model_mut().set_param_values(params)?;
    tr.optimizer_mut()
        .restore(m, v, num("adam_t")?, num("skipped_steps")?)?;
    if !tr.config().carry_bits {
        tr.optimizer_mut().reanchor();
    }
    tr.set_steps(num("step")?);
    Ok(())
}
