//! Adapter plug-in files (`DPFA`): the spec and θ of an augmented model,
//! plus any base parameters the method trained, tied to the exact base
//! model by a payload fingerprint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{attach, Method, PeftModel, PeftSpec, Placement};
use crate::checkpoint::{decode, encode, fingerprint};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::param::Parameter;

pub const PLUGIN_MAGIC: [u8; 4] = *b"DPFA";

#[derive(Debug, Serialize, Deserialize)]
struct PluginMeta {
    method: String,
    r: usize,
    n: usize,
    k: usize,
    placement: Option<Placement>,
    base_fingerprint: u64,
    /// Base parameters stored after θ because the method trains them.
    overrides: Vec<String>,
}

pub fn plugin_bytes(pm: &PeftModel) -> Result<Vec<u8>> {
    let overrides: Vec<&Parameter> = pm.base.params.iter().filter(|p| p.trainable).collect();
    let meta = PluginMeta {
        method: pm.spec.method.tag().to_string(),
        r: pm.spec.r,
        n: pm.spec.n,
        k: pm.spec.k,
        placement: pm.spec.placement,
        base_fingerprint: pm.base_fingerprint,
        overrides: overrides.iter().map(|p| p.name.clone()).collect(),
    };
    let mut params: Vec<&Parameter> = pm.theta.iter().collect();
    params.extend(overrides);
    encode(PLUGIN_MAGIC, &meta, &params, pm.base.config.dtype)
}

pub fn export_adapter(pm: &PeftModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, plugin_bytes(pm)?)?;
    Ok(())
}

pub fn plugin_from_bytes(model: Model, bytes: &[u8]) -> Result<PeftModel> {
    let (meta, stored): (PluginMeta, Vec<Parameter>) = decode(PLUGIN_MAGIC, bytes)?;
    let method =
        Method::from_tag(&meta.method).ok_or_else(|| Error::Format(format!("unknown method tag `{}`", meta.method)))?;
    let found = fingerprint(&model.params, model.config.dtype);
    if found != meta.base_fingerprint {
        return Err(Error::Compatibility(format!(
            "plug-in was trained on base {:016x}, given base is {found:016x}",
            meta.base_fingerprint
        )));
    }
    let spec = PeftSpec { method, r: meta.r, n: meta.n, k: meta.k, placement: meta.placement };
    let mut pm = attach(model, &spec, 0)?;
    let theta_len = pm.theta.len();
    if stored.len() != theta_len + meta.overrides.len() {
        return Err(Error::Format(format!(
            "plug-in holds {} tensors, expected {} for θ and {} overrides",
            stored.len(),
            theta_len,
            meta.overrides.len()
        )));
    }
    for p in stored {
        let is_theta = pm.theta.contains(&p.name);
        let target = if is_theta {
            pm.theta.get_mut(&p.name)
        } else if meta.overrides.contains(&p.name) {
            pm.base.params.get_mut(&p.name)
        } else {
            None
        }
        .ok_or_else(|| Error::Format(format!("unexpected tensor `{}` in plug-in", p.name)))?;
        if target.value.shape() != p.value.shape() {
            return Err(Error::ParamShape {
                name: p.name,
                found: p.value.shape().to_vec(),
                expected: target.value.shape().to_vec(),
            });
        }
        target.value = p.value;
    }
    Ok(pm)
}

pub fn import_adapter(model: Model, path: impl AsRef<Path>) -> Result<PeftModel> {
    plugin_from_bytes(model, &std::fs::read(path)?)
}
