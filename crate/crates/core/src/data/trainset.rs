//! The defense training set: a few training-split examples, attacked
//! against the bare victim and labelled with their ground truth.

use serde::{Deserialize, Serialize};

use super::sampling::shuffled_class_members;
use super::{nshot_sample, random_sample, Dataset, SamplerConfig, SamplerMode};
use crate::attacks::{attack, AttackConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::victims::VictimModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Adv,
    Clean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseTrainset<T> {
    /// Tuning inputs `[N, C, H, W]`.
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// Training-split index each item came from.
    pub origins: Vec<usize>,
    /// Clean original of every item.
    pub clean: Tensor<T>,
    /// The attack left the victim correct on this item.
    pub failed: Vec<bool>,
}

impl<T: Real> DefenseTrainset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn adversarial(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.provenance[i] == Provenance::Adv).collect()
    }

    /// Share of adversarial items whose attack failed.
    pub fn failure_rate(&self) -> f64 {
        let adv = self.adversarial();
        if adv.is_empty() {
            return 0.0;
        }
        adv.iter().filter(|&&i| self.failed[i]).count() as f64 / adv.len() as f64
    }
}

/// Picks, attacks and labels the tuning set.
///
/// With `cfg.strict`, an item whose attack fails is replaced by the next
/// candidate of the same draw (the same class for the balanced mode) until
/// every attack succeeds.
pub fn build_defense_trainset<T: Real>(
    victim: &VictimModel<T>,
    attack_cfg: &AttackConfig,
    train: &Dataset,
    cfg: &SamplerConfig,
) -> Result<DefenseTrainset<T>> {
    if !victim.is_frozen() {
        return Err(Error::contract("defense sets are built against a frozen victim"));
    }
    let k = train.num_classes;
    let n = cfg.base_size(k);
    if n == 0 {
        return Err(Error::config("sampler needs at least one shot"));
    }
    let (mut picked, reserve): (Vec<usize>, Vec<Vec<usize>>) = match cfg.mode {
        SamplerMode::OneAdv | SamplerMode::OneAdvOneClean | SamplerMode::KAdv(_) => {
            let total = match cfg.mode {
                SamplerMode::KAdv(m) => m * n,
                _ => n,
            };
            let picked = random_sample(train, total, cfg.seed)?;
            let rest = if cfg.strict {
                random_sample(train, train.len(), cfg.seed)?[total..].to_vec()
            } else {
                Vec::new()
            };
            (picked, vec![rest])
        }
        SamplerMode::OneAdvBalanced => {
            let per = (n / k).max(1);
            let picked = nshot_sample(train, per, cfg.seed)?;
            let rest = (0..k)
                .map(|c| shuffled_class_members(train, c, cfg.seed)[per..].to_vec())
                .collect();
            (picked, rest)
        }
    };

    let run = |idx: &[usize]| {
        let x: Tensor<T> = train.images.select_axis0(idx).cast();
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        attack(victim, &x, &y, idx, attack_cfg)
    };
    let mut adv = run(&picked)?;
    if cfg.strict {
        let balanced = cfg.mode == SamplerMode::OneAdvBalanced;
        let mut cursors = vec![0usize; reserve.len()];
        loop {
            let failed: Vec<usize> = (0..adv.len()).filter(|&i| !adv[i].succeeded()).collect();
            if failed.is_empty() {
                break;
            }
            for &slot in &failed {
                let pool = if balanced { train.labels[picked[slot]] } else { 0 };
                let Some(&next) = reserve[pool].get(cursors[pool]) else {
                    return Err(Error::Training(format!(
                        "strict sampling ran out of candidates for slot {slot}"
                    )));
                };
                cursors[pool] += 1;
                picked[slot] = next;
            }
            let redo = run(&failed.iter().map(|&s| picked[s]).collect::<Vec<_>>())?;
            for (slot, e) in failed.into_iter().zip(redo) {
                adv[slot] = e;
            }
        }
    }

    let clean_x: Tensor<T> = train.images.select_axis0(&picked).cast();
    let labels: Vec<usize> = picked.iter().map(|&i| train.labels[i]).collect();
    let mut items: Vec<Tensor<T>> = adv.iter().map(|e| e.x_a.clone()).collect();
    let mut provenance = vec![Provenance::Adv; adv.len()];
    let mut failed: Vec<bool> = adv.iter().map(|e| !e.succeeded()).collect();
    let mut out_labels = labels.clone();
    let mut origins = picked.clone();
    let mut clean_items: Vec<Tensor<T>> = (0..picked.len()).map(|i| clean_x.index_axis0(i)).collect();
    if cfg.mode == SamplerMode::OneAdvOneClean {
        for i in 0..picked.len() {
            items.push(clean_x.index_axis0(i));
            clean_items.push(clean_x.index_axis0(i));
            provenance.push(Provenance::Clean);
            failed.push(false);
            out_labels.push(labels[i]);
            origins.push(picked[i]);
        }
    }
    Ok(DefenseTrainset {
        inputs: Tensor::stack(&items)?,
        labels: out_labels,
        provenance,
        origins,
        clean: Tensor::stack(&clean_items)?,
        failed,
    })
}
