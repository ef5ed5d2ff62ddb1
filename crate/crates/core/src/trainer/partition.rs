//! Frozen / trainable split of the model tensors (§III-E).

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Learning-rate group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    /// Base network tensors, trained only during pretraining.
    Base,
    /// HEI, HAS and the HS patch embedding (`lr_hei_has`).
    HeiHas,
    /// HAM adapters (`lr_ham`).
    Ham,
}

const BASE_PREFIXES: [&str; 5] = ["embed.fc.", "embed.pos", "enc.", "head.", "norm."];
const HEI_HAS_PREFIXES: [&str; 3] = ["hei.", "has.", "embed.hs."];
const HAM_PREFIXES: [&str; 1] = ["ham."];

/// Classifies one tensor name; unknown names are an error (fail closed).
pub fn classify(name: &str) -> Result<Group> {
    let any = |ps: &[&str]| ps.iter().any(|p| name.starts_with(p));
    if any(&BASE_PREFIXES) {
        Ok(Group::Base)
    } else if any(&HEI_HAS_PREFIXES) {
        Ok(Group::HeiHas)
    } else if any(&HAM_PREFIXES) {
        Ok(Group::Ham)
    } else {
        Err(Error::Partition(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeMap<String, Group>,
}

impl ParamPartition {
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.trainable.keys().cloned().collect()
    }

    pub fn trainable_count(&self, params: &Params) -> usize {
        self.trainable.keys().filter_map(|n| params.get(n).ok()).map(|m| m.len()).sum()
    }
}

pub fn partition_params(params: &Params, phase: Phase) -> Result<ParamPartition> {
    let mut frozen = BTreeSet::new();
    let mut trainable = BTreeMap::new();
    for name in params.names() {
        let group = classify(name)?;
        let train = match phase {
            Phase::Pretrain => group == Group::Base,
            Phase::Finetune => group != Group::Base,
        };
        if train {
            trainable.insert(name.clone(), group);
        } else {
            frozen.insert(name.clone());
        }
    }
    Ok(ParamPartition { frozen, trainable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, PeftConfig};
    use crate::tensor::Matrix;

    #[test]
    fn finetune_partition_is_exactly_peft() {
        let mut m = Model::new_base(&ModelConfig::tiny(), 0).unwrap();
        m.attach_peft(PeftConfig::full(), 1).unwrap();
        let p = partition_params(&m.params, Phase::Finetune).unwrap();
        let peft: BTreeSet<String> = m.cfg.peft_shapes().into_iter().map(|(n, _)| n).collect();
        assert_eq!(p.trainable_names(), peft);
        assert!(p.frozen.is_disjoint(&p.trainable_names()));
        assert_eq!(p.frozen.len() + p.trainable.len(), m.params.len());
        assert_eq!(p.trainable["ham.00.pha.up"], Group::Ham);
        assert_eq!(p.trainable["embed.hs.w"], Group::HeiHas);
        let pre = partition_params(&m.base_only().params, Phase::Pretrain).unwrap();
        assert!(pre.frozen.is_empty());
    }

    #[test]
    fn unknown_tensor_fails_closed() {
        let mut params = Params::new();
        params.insert("enc.00.wq", Matrix::zeros(1, 1));
        params.insert("stray.weight", Matrix::zeros(1, 1));
        assert!(matches!(partition_params(&params, Phase::Finetune), Err(Error::Partition(n)) if n == "stray.weight"));
    }
}
