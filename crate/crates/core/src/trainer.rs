//! Tuning the defender's trainable partition through the frozen victim.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::DefenseTrainset;
use crate::defender::DefenderModel;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{Module, Real, Tensor};
use crate::victims::{accuracy, argmax, VictimModel};

pub use crate::optim::{lion_step, LionConfig, LionState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lion: LionConfig,
    /// Epochs between test-set probes; 0 never probes.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            lion: LionConfig::default(),
            eval_every: 10,
            seed: 42,
        }
    }
}

/// Metrics after one epoch. Epoch 0 is the untuned defender.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    /// Mean cross entropy over the whole training set.
    pub loss: f64,
    pub train_ca: f64,
    pub train_aa: f64,
    pub test_ca: Option<f64>,
    pub test_aa: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveLog {
    pub initial: Option<CurveRow>,
    pub rows: Vec<CurveRow>,
}

impl CurveLog {
    pub fn all_rows(&self) -> impl Iterator<Item = &CurveRow> {
        self.initial.iter().chain(&self.rows)
    }

    pub fn final_row(&self) -> Option<&CurveRow> {
        self.rows.last().or(self.initial.as_ref())
    }

    /// One JSON object per line, initial row first.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.all_rows() {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Inverse of [`to_jsonl`](Self::to_jsonl); a leading epoch-0 row
    /// becomes the initial row.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut log = CurveLog::default();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: CurveRow = serde_json::from_str(&line)?;
            if row.epoch == 0 && log.initial.is_none() && log.rows.is_empty() {
                log.initial = Some(row);
            } else {
                log.rows.push(row);
            }
        }
        Ok(log)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(std::io::BufReader::new(f))
    }

    /// Plotting table; absent test metrics are empty cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "loss", "train_ca", "train_aa", "test_ca", "test_aa"])?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in self.all_rows() {
            wr.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.loss),
                format!("{:.6}", r.train_ca),
                format!("{:.6}", r.train_aa),
                opt(r.test_ca),
                opt(r.test_aa),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// A fixed test subset and its adversarial counterparts, crafted once
/// against the bare victim.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet<T> {
    pub clean: Tensor<T>,
    pub adv: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset indices, used to seed randomized defenses.
    pub ids: Vec<u64>,
}

impl<T: Real> EvalSet<T> {
    pub fn new(clean: Tensor<T>, adv: Tensor<T>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if clean.shape() != adv.shape() {
            return Err(Error::Shape {
                expected: clean.shape().to_vec(),
                actual: adv.shape().to_vec(),
            });
        }
        if clean.shape().first() != Some(&labels.len()) || ids.len() != labels.len() {
            return Err(Error::contract("eval set needs one label and one id per image"));
        }
        Ok(Self { clean, adv, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn predictions<T: Real>(d: &DefenderModel<T>, m: &VictimModel<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    m.predict_batch(&d.defend_batch(x)?)
}

fn hit_rate(preds: &[usize], labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|&&i| preds[i] == labels[i]).count() as f64 / rows.len() as f64
}

/// Mean cross entropy of `M(D(x))` over the whole set, and the predictions.
fn trainset_loss<T: Real>(d: &DefenderModel<T>, m: &VictimModel<T>, set: &DefenseTrainset<T>) -> Result<(f64, Vec<usize>)> {
    let mut g = Graph::new();
    let x = g.constant(set.inputs.clone());
    let y = d.forward(&mut g, x)?;
    let logits = m.forward(&mut g, y)?;
    let loss = g.cross_entropy(logits, &set.labels)?;
    let lv = g.value(loss).item().to_f64();
    let k = m.num_classes();
    let preds = g.value(logits).data().chunks(k).map(argmax).collect();
    Ok((lv, preds))
}

/// The curve metrics of the current defender. Train CA is measured on the
/// clean originals of the training items; test metrics only when `test`
/// is given.
pub fn epoch_eval<T: Real>(
    d: &DefenderModel<T>,
    m: &VictimModel<T>,
    set: &DefenseTrainset<T>,
    test: Option<&EvalSet<T>>,
    epoch: usize,
) -> Result<CurveRow> {
    let (loss, preds) = trainset_loss(d, m, set)?;
    let adv_rows = set.adversarial();
    let train_aa = hit_rate(&preds, &set.labels, &adv_rows);
    let clean_preds = predictions(d, m, &set.clean)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let train_ca = hit_rate(&clean_preds, &set.labels, &all);
    let (test_ca, test_aa) = match test {
        Some(t) => (
            Some(accuracy(m, &t.clean, &t.labels, Some(d), Some(&t.ids))?),
            Some(accuracy(m, &t.adv, &t.labels, Some(d), Some(&t.ids))?),
        ),
        None => (None, None),
    };
    Ok(CurveRow {
        epoch,
        loss,
        train_ca,
        train_aa,
        test_ca,
        test_aa,
    })
}

/// Per-epoch callback: the row just logged and the defender after that
/// epoch.
pub type EpochHook<'a, T> = dyn FnMut(&CurveRow, &DefenderModel<T>) -> Result<()> + 'a;

pub fn tune_defender<T: Real>(
    d: &mut DefenderModel<T>,
    m: &VictimModel<T>,
    set: &DefenseTrainset<T>,
    cfg: &TuneConfig,
    test: Option<&EvalSet<T>>,
) -> Result<CurveLog> {
    tune_defender_with(d, m, set, cfg, test, &mut |_, _| Ok(()))
}

/// Minimizes cross entropy of `M(D(x))` over the training set with Lion,
/// updating only the defender's trainable parameters. Runs the full epoch
/// budget. A non-finite loss aborts with a snapshot of the last good row
/// and the offending batch. `hook` sees the untuned row first, then every
/// epoch.
pub fn tune_defender_with<T: Real>(
    d: &mut DefenderModel<T>,
    m: &VictimModel<T>,
    set: &DefenseTrainset<T>,
    cfg: &TuneConfig,
    test: Option<&EvalSet<T>>,
    hook: &mut EpochHook<'_, T>,
) -> Result<CurveLog> {
    if !m.is_frozen() {
        return Err(Error::contract("the victim must be frozen before tuning"));
    }
    if set.is_empty() {
        return Err(Error::contract("empty defense training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let probe = |epoch: usize| cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
    let mut log = CurveLog {
        initial: Some(epoch_eval(d, m, set, test.filter(|_| probe(0)), 0)?),
        rows: Vec::with_capacity(cfg.epochs),
    };
    hook(log.initial.as_ref().expect("set above"), d)?;
    let mut state = LionState::new(&*d, cfg.lion);
    let mut rng = Rng::new(cfg.seed, Stream::Batching);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(set.inputs.select_axis0(batch));
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let y = d.forward(&mut g, x)?;
            let logits = m.forward(&mut g, y)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item().to_f64();
            if !lv.is_finite() {
                let last = log.final_row().cloned();
                return Err(Error::NonFinite {
                    epoch,
                    snapshot: serde_json::json!({
                        "loss": lv.to_string(),
                        "batch": batch,
                        "last_row": last,
                        "defender": d.checksum(),
                    })
                    .to_string(),
                });
            }
            let grads = g.backward(loss)?.into_params();
            lion_step(d, &grads, &mut state)?;
        }
        let row = epoch_eval(d, m, set, test.filter(|_| probe(epoch)), epoch)?;
        hook(&row, d)?;
        log.rows.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;
    use crate::data::{build_defense_trainset, SamplerConfig, SamplerMode};
    use crate::defender::{build_defender, DefenderConfig, PartitionPolicy, ProcessorKind};
    use crate::testutil::{toy_data, toy_victim};

    fn toy_defender<T: Real>(zero_init: bool) -> DefenderModel<T> {
        build_defender(&DefenderConfig {
            channels: 1,
            height: 8,
            width: 8,
            patch: 4,
            dim: 16,
            processor: ProcessorKind::transformer(1, 2),
            zero_init,
            init_seed: 9,
            ..DefenderConfig::default()
        })
        .unwrap()
    }

    fn toy_set<T: Real>(m: &VictimModel<T>) -> DefenseTrainset<T> {
        let attack = AttackConfig {
            epsilon: 0.25,
            ..AttackConfig::linf()
        };
        let sampler = SamplerConfig {
            mode: SamplerMode::OneAdv,
            seed: 3,
            shots: Some(4),
            strict: false,
        };
        build_defense_trainset(m, &attack, &toy_data(32, 2), &sampler).unwrap()
    }

    fn toy_eval<T: Real>(m: &VictimModel<T>) -> EvalSet<T> {
        let ds = toy_data(16, 4);
        let clean: Tensor<T> = ds.images.cast();
        let origins: Vec<usize> = (0..16).collect();
        let cfg = AttackConfig {
            epsilon: 0.25,
            ..AttackConfig::linf()
        };
        let adv = crate::attacks::attack(m, &clean, &ds.labels, &origins, &cfg).unwrap();
        let adv = crate::attacks::stack_examples(&adv).unwrap();
        EvalSet::new(clean, adv, ds.labels, (0..16).collect()).unwrap()
    }

    fn cfg(epochs: usize, lr: f64) -> TuneConfig {
        TuneConfig {
            epochs,
            batch_size: 32,
            lion: LionConfig {
                lr,
                ..LionConfig::default()
            },
            eval_every: 1,
            seed: 1,
        }
    }

    #[test]
    fn attacks_break_the_toy_victim() {
        let m = toy_victim::<f64>();
        let set = toy_set(&m);
        assert_eq!(set.len(), 4);
        assert_eq!(set.failure_rate(), 0.0);
    }

    #[test]
    fn zero_lr_freezes_everything_and_the_loss() {
        let m = toy_victim::<f64>();
        let set = toy_set(&m);
        let mut d = toy_defender(false);
        let before = d.snapshot();
        let log = tune_defender(&mut d, &m, &set, &cfg(5, 0.0), None).unwrap();
        assert_eq!(d.snapshot(), before);
        let l0 = log.initial.as_ref().unwrap().loss;
        assert!(log.rows.iter().all(|r| r.loss == l0));
    }

    #[test]
    fn only_theta1_moves() {
        let m = toy_victim::<f64>();
        let set = toy_set(&m);
        let mut d = toy_defender(true);
        let part = d.partition(PartitionPolicy::LayerNormOnly);
        let before: std::collections::HashMap<_, _> = d.snapshot().into_iter().collect();
        let victim_sum = m.checksum();
        tune_defender(&mut d, &m, &set, &cfg(5, 1e-2), None).unwrap();
        let after: std::collections::HashMap<_, _> = d.snapshot().into_iter().collect();
        for name in &part.theta2 {
            assert_eq!(before[name], after[name], "{name} moved");
        }
        assert!(part.theta1.iter().any(|n| before[n] != after[n]));
        assert_eq!(m.checksum(), victim_sum);
    }

    #[test]
    fn rows_follow_epochs_and_tuning_recovers_the_trainset() {
        let m = toy_victim::<f64>();
        let set = toy_set(&m);
        let test = toy_eval(&m);
        let mut d = toy_defender(true);
        let log = tune_defender(&mut d, &m, &set, &cfg(120, 1e-2), Some(&test)).unwrap();
        assert_eq!(log.rows.len(), 120);
        assert!(log.rows.iter().enumerate().all(|(i, r)| r.epoch == i + 1 && r.test_aa.is_some()));
        let first = log.initial.as_ref().unwrap();
        assert_eq!(first.train_aa, 0.0);
        assert_eq!(log.final_row().unwrap().train_aa, 1.0);
    }

    #[test]
    fn untuned_zero_init_matches_bare_victim() {
        let m = toy_victim::<f64>();
        let set = toy_set(&m);
        let test = toy_eval(&m);
        let d = toy_defender(true);
        let row = epoch_eval(&d, &m, &set, Some(&test), 0).unwrap();
        let bare_ca = accuracy(&m, &test.clean, &test.labels, None, None).unwrap();
        let bare_aa = accuracy(&m, &test.adv, &test.labels, None, None).unwrap();
        assert_eq!(row.test_ca, Some(bare_ca));
        assert_eq!(row.test_aa, Some(bare_aa));
    }

    #[test]
    fn determinism_and_checkpoint_replay() {
        let m = toy_victim::<f32>();
        let set = toy_set(&m);
        let test = toy_eval(&m);
        let mut saved = None;
        let run = |saved: &mut Option<(CurveRow, crate::checkpoint::Checkpoint)>| {
            let mut d = toy_defender(true);
            tune_defender_with(&mut d, &m, &set, &cfg(6, 1e-2), Some(&test), &mut |row, d| {
                if row.epoch == 3 {
                    *saved = Some((row.clone(), d.to_checkpoint()));
                }
                Ok(())
            })
            .unwrap()
        };
        let a = run(&mut saved);
        let b = run(&mut None);
        assert_eq!(a, b);
        let (row, ck) = saved.unwrap();
        let restored = DefenderModel::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(epoch_eval(&restored, &m, &set, Some(&test), 3).unwrap(), row);
    }

    #[test]
    fn nan_loss_aborts_with_snapshot() {
        let mut m = toy_victim::<f64>();
        let set = toy_set(&m);
        m.visit_mut(&mut |p| {
            if p.name == "head.bias" {
                p.tensor.data_mut()[0] = f64::NAN;
            }
        });
        let mut d = toy_defender(true);
        let err = tune_defender(&mut d, &m, &set, &cfg(3, 1e-2), None).unwrap_err();
        match err {
            Error::NonFinite { epoch, snapshot } => {
                assert_eq!(epoch, 1);
                assert!(snapshot.contains("last_row"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unfrozen_victim_and_empty_set_are_rejected() {
        let mut m = toy_victim::<f64>();
        let set = toy_set(&m);
        let mut d = toy_defender(true);
        m.set_trainable(true);
        assert!(tune_defender(&mut d, &m, &set, &cfg(1, 1e-2), None).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let log = CurveLog {
            initial: Some(CurveRow {
                epoch: 0,
                loss: 2.5,
                train_ca: 1.0,
                train_aa: 0.0,
                test_ca: Some(0.97),
                test_aa: Some(0.05),
            }),
            rows: vec![CurveRow {
                epoch: 1,
                loss: 1.25,
                train_ca: 1.0,
                train_aa: 0.5,
                test_ca: None,
                test_aa: None,
            }],
        };
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(CurveLog::from_jsonl(text.as_bytes()).unwrap(), log);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().nth(2).unwrap(), "1,1.250000,1.000000,0.500000,,");
    }
}
