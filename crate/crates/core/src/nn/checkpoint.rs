use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::net::{NamedTensor, Net};
use super::spec::NetSpec;
use crate::error::{Error, Result};
use crate::io;

/// Serialized form of one network and its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub spec: NetSpec,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub buffers: Vec<NamedTensor>,
    pub adam: AdamState,
}

impl NetCheckpoint {
    pub fn capture(net: &Net, adam: &AdamState) -> Self {
        Self {
            spec: net.spec().clone(),
            params: net.params().to_vec(),
            buffers: net.buffers().to_vec(),
            adam: adam.clone(),
        }
    }

    /// Rebuilds the network, checking that parameters and moments fit the spec.
    pub fn restore(self) -> Result<(Net, AdamState)> {
        let net = Net::from_parts(&self.spec, self.params, self.buffers)?;
        let adam = self.adam;
        if adam.m.len() != net.params().len() || adam.v.len() != net.params().len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} moment slots for {} parameters",
                adam.m.len(),
                net.params().len()
            )));
        }
        for ((p, m), v) in net.params().iter().zip(&adam.m).zip(&adam.v) {
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for `{}` have the wrong shape", p.name)));
            }
        }
        Ok((net, adam))
    }
}

pub fn save_checkpoint(net: &Net, adam: &AdamState, path: &Path) -> Result<()> {
    io::write_json(path, &NetCheckpoint::capture(net, adam))
}

pub fn load_checkpoint(path: &Path) -> Result<(Net, AdamState)> {
    io::read_json::<NetCheckpoint>(path)?.restore()
}
