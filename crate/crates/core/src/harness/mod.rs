//! Experiment orchestration: datasets, victims, adversarial caches, tuned
//! defenders and baselines, evaluated into result rows.
//!
//! Artifacts live in a content-addressed store:
//!
//! ```text
//! <root>/victims/<hash>.ckpt
//! <root>/runs/<spec-hash>/spec.json
//! <root>/runs/<spec-hash>/corpus.adv
//! <root>/runs/<spec-hash>/results.csv
//! <root>/runs/<spec-hash>/<seed>/<arm>.ckpt
//! <root>/runs/<spec-hash>/<seed>/<arm>.curves.jsonl
//! <root>/runs/<spec-hash>/<seed>/rows.jsonl
//! ```

mod results;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use results::{emit_results, parse_results, read_results, results_to_string, round2, Format, ResultRow, CSV_HEADER};

use crate::attacks::{attack, AdversarialCorpus, AttackConfig};
use crate::baselines::{GaussianNoise, RandomResizePad, RpConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{build_defense_trainset, fixed_test_subset, gen_synthetic, load_idx, Dataset, DefenseTrainset, SamplerConfig, SyntheticSpec};
use crate::defender::{init_defender, DefenderConfig, DefenderModel};
use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::tensor::{Module, Real, Tensor};
use crate::trainer::{tune_defender_with, CurveLog, EpochHook, EvalSet, TuneConfig};
use crate::victims::{accuracy, train_victim_with, VictimConfig, VictimKind, VictimModel, VictimTrainConfig};

/// Train and test splits with a shared id space: test image `i` has id
/// `test_offset + i`.
#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    pub test_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSplit {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for SyntheticSplit {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 2000,
            test: 1000,
            channels: 3,
            height: 32,
            width: 32,
            noise: 0.02,
            train_seed: 1,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnistSplit {
    /// Directory with the four IDX files; relative paths resolve against
    /// the spec file.
    pub dir: PathBuf,
    /// Replicate the grey channel this many times.
    pub channels: usize,
}

impl Default for MnistSplit {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/mnist"),
            channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSplit),
    Mnist(MnistSplit),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSplit::default())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Synthetic(_) => "synthetic",
            DatasetSpec::Mnist(_) => "mnist",
        }
    }

    pub fn load(&self, base: &Path) -> Result<Split> {
        match self {
            DatasetSpec::Synthetic(s) => {
                let spec = |count| SyntheticSpec {
                    classes: s.classes,
                    count,
                    height: s.height,
                    width: s.width,
                    channels: s.channels,
                    noise: s.noise,
                };
                let train = gen_synthetic(&spec(s.train), s.train_seed)?;
                let test = gen_synthetic(&spec(s.test), s.test_seed)?;
                Ok(Split {
                    name: self.name().into(),
                    test_offset: train.len(),
                    train,
                    test,
                })
            }
            DatasetSpec::Mnist(m) => {
                let dir = resolve(base, &m.dir);
                let part = |prefix: &str| {
                    load_idx(
                        dir.join(format!("{prefix}-images-idx3-ubyte.gz")),
                        dir.join(format!("{prefix}-labels-idx1-ubyte.gz")),
                    )
                };
                let train = part("train")?.with_channels(m.channels)?;
                let test = part("t10k")?.with_channels(m.channels)?;
                Ok(Split {
                    name: self.name().into(),
                    test_offset: train.len(),
                    train,
                    test,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimSpec {
    pub kind: VictimKind,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub train: VictimTrainConfig,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for VictimSpec {
    fn default() -> Self {
        let c = VictimConfig::default();
        Self {
            kind: c.kind,
            patch: c.patch,
            dim: c.dim,
            depth: c.depth,
            heads: c.heads,
            hidden: c.hidden,
            train: VictimTrainConfig::default(),
            checkpoint: None,
        }
    }
}

impl VictimSpec {
    pub fn config(&self, ds: &Dataset) -> VictimConfig {
        VictimConfig {
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            hidden: self.hidden,
            ..VictimConfig::for_dataset(self.kind, ds)
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            VictimKind::TinyVit => "tiny-vit".into(),
            VictimKind::Mlp => "mlp".into(),
        }
    }
}

/// One arm of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseSpec {
    None,
    RandomResizePad(RpConfig),
    Noise { std: f64 },
    /// Geometry fields are taken from the dataset.
    Defender(DefenderConfig),
}

impl DefenseSpec {
    pub fn label(&self) -> String {
        match self {
            DefenseSpec::None => "none".into(),
            DefenseSpec::RandomResizePad(_) => "r&p".into(),
            DefenseSpec::Noise { std } => format!("noise-{std}"),
            DefenseSpec::Defender(cfg) => cfg.label(),
        }
    }

    /// File stem for per-arm artifacts.
    pub fn slug(&self, index: usize) -> String {
        let clean: String = self
            .label()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        format!("{index:02}-{clean}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub victim: VictimSpec,
    pub attack: AttackConfig,
    pub sampler: SamplerConfig,
    pub tune: TuneConfig,
    pub defenses: Vec<DefenseSpec>,
    /// Size of the evaluation subset, capped at the test split size.
    pub test_subset: usize,
    pub subset_seed: u64,
    /// Write zero wall times so outputs are byte-reproducible.
    pub reproducible: bool,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![41, 42, 43],
            dataset: DatasetSpec::default(),
            victim: VictimSpec::default(),
            attack: AttackConfig::linf(),
            sampler: SamplerConfig::default(),
            tune: TuneConfig::default(),
            defenses: vec![DefenseSpec::Defender(DefenderConfig::default())],
            test_subset: 512,
            subset_seed: 0,
            reproducible: false,
            base_dir: PathBuf::from("."),
        }
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text)?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed"));
        }
        if self.defenses.is_empty() {
            return Err(Error::config("at least one defense arm"));
        }
        if self.test_subset == 0 {
            return Err(Error::config("empty test subset"));
        }
        self.attack.validate()
    }

    /// Content hash of everything but the seed list.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        v["seeds"] = serde_json::Value::Null;
        short_hash(v.to_string().as_bytes())
    }

    fn victim_hash<T: Real>(&self) -> String {
        let v = serde_json::json!({
            "dataset": self.dataset,
            "victim": self.victim,
            "precision": std::any::type_name::<T>(),
        });
        short_hash(v.to_string().as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_dir(&self, spec: &ExperimentSpec) -> PathBuf {
        self.root.join("runs").join(spec.hash())
    }

    pub fn seed_dir(&self, spec: &ExperimentSpec, seed: u64) -> PathBuf {
        self.run_dir(spec).join(seed.to_string())
    }

    pub fn victim_path<T: Real>(&self, spec: &ExperimentSpec) -> PathBuf {
        self.root.join("victims").join(format!("{}.ckpt", spec.victim_hash::<T>()))
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Loads the configured or cached victim, training and caching it when
/// absent. The result is frozen.
pub fn obtain_victim<T: Real>(spec: &ExperimentSpec, split: &Split, store: &Store) -> Result<VictimModel<T>> {
    let cfg = spec.victim.config(&split.train);
    let path = match &spec.victim.checkpoint {
        Some(p) => resolve(&spec.base_dir, p),
        None => store.victim_path::<T>(spec),
    };
    let m = if path.exists() || spec.victim.checkpoint.is_some() {
        VictimModel::from_checkpoint(&Checkpoint::load(&path)?)?
    } else {
        log::info!("training {} victim on {}", spec.victim.label(), split.name);
        let (m, report) = train_victim_with::<T>(&split.train, &cfg, &spec.victim.train, |e| {
            log::debug!("victim epoch {} loss {:.4} val {:.4}", e.epoch, e.loss, e.val_acc)
        })?;
        log::info!("victim held-out accuracy {:.4} at epoch {}", report.val_acc, report.best_epoch);
        if let Some(dir) = path.parent() {
            mkdir(dir)?;
        }
        m.to_checkpoint().save(&path)?;
        // Reload so fresh and cached runs see the same stored weights.
        VictimModel::from_checkpoint(&Checkpoint::load(&path)?)?
    };
    if m.cfg.input_shape() != cfg.input_shape() || m.num_classes() != cfg.num_classes {
        return Err(Error::config(format!(
            "victim expects {:?} with {} classes, dataset gives {:?} with {}",
            m.cfg.input_shape(),
            m.num_classes(),
            cfg.input_shape(),
            cfg.num_classes
        )));
    }
    Ok(m)
}

/// Test subset adversarial counterparts, crafted once against the bare
/// victim, with the checksum of that victim.
#[derive(Clone, Debug)]
pub struct AdvCache<T> {
    pub eval: EvalSet<T>,
    pub victim_checksum: String,
    pub attack: AttackConfig,
}

impl<T: Real> AdvCache<T> {
    pub fn from_corpus(corpus: &AdversarialCorpus<T>, split: &Split) -> Result<Self> {
        let origins = corpus.origins();
        if let Some(&bad) = origins.iter().find(|&&i| i >= split.test.len()) {
            return Err(Error::contract(format!("corpus origin {bad} outside the test split")));
        }
        let clean: Tensor<T> = split.test.images.select_axis0(&origins).cast();
        let labels = corpus.labels();
        if origins.iter().zip(&labels).any(|(&i, &y)| split.test.labels[i] != y) {
            return Err(Error::contract("corpus labels disagree with the test split"));
        }
        let ids = origins.iter().map(|&i| (split.test_offset + i) as u64).collect();
        Ok(Self {
            eval: EvalSet::new(clean, corpus.images()?, labels, ids)?,
            victim_checksum: corpus.victim_checksum.clone(),
            attack: corpus.attack.clone(),
        })
    }
}

/// Attacks the fixed test subset, or loads the stored corpus when it was
/// made against this very victim and attack.
pub fn obtain_corpus<T: Real>(
    victim: &VictimModel<T>,
    split: &Split,
    attack_cfg: &AttackConfig,
    subset: usize,
    subset_seed: u64,
    path: Option<&Path>,
) -> Result<AdversarialCorpus<T>> {
    let checksum = victim.checksum();
    if let Some(p) = path.filter(|p| p.exists()) {
        let c = AdversarialCorpus::<T>::load(p)?;
        if c.victim_checksum == checksum && &c.attack == attack_cfg {
            return Ok(c);
        }
    }
    let n = subset.min(split.test.len());
    let idx = fixed_test_subset(&split.test, n, subset_seed)?;
    let x: Tensor<T> = split.test.images.select_axis0(&idx).cast();
    let y: Vec<usize> = idx.iter().map(|&i| split.test.labels[i]).collect();
    let examples = attack(victim, &x, &y, &idx, attack_cfg)?;
    let (c, h, w) = split.test.geometry();
    let corpus = AdversarialCorpus {
        attack: attack_cfg.clone(),
        victim_checksum: checksum,
        seed: attack_cfg.seed,
        shape: [c, h, w],
        examples,
    };
    if let Some(p) = path {
        corpus.save(p)?;
    }
    Ok(corpus)
}

/// Clean and adversarial accuracy over the cached subset, through the
/// defense when given.
pub fn evaluate_ca_aa<T: Real>(
    victim: &VictimModel<T>,
    defense: Option<&dyn Defense<T>>,
    cache: &AdvCache<T>,
) -> Result<(f64, f64)> {
    let actual = victim.checksum();
    if actual != cache.victim_checksum {
        return Err(Error::Checksum {
            expected: cache.victim_checksum.clone(),
            actual,
        });
    }
    let e = &cache.eval;
    let ca = accuracy(victim, &e.clean, &e.labels, defense, Some(&e.ids))?;
    let aa = accuracy(victim, &e.adv, &e.labels, defense, Some(&e.ids))?;
    Ok((ca, aa))
}

/// An arm that could not be evaluated for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub defender: String,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    pub dir: PathBuf,
    /// Undefended accuracies over the cached subset.
    pub bare_ca: f64,
    pub bare_aa: f64,
}

impl RunReport {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn defender_config(cfg: &DefenderConfig, victim: &VictimModel<impl Real>, seed: u64) -> DefenderConfig {
    let [c, h, w] = victim.cfg.input_shape();
    DefenderConfig {
        channels: c,
        height: h,
        width: w,
        init_seed: seed,
        ..cfg.clone()
    }
}

struct ArmContext<'a, T> {
    spec: &'a ExperimentSpec,
    prep: &'a Prepared<T>,
    seed_dir: PathBuf,
}

impl<T: Real> ArmContext<'_, T> {
    fn run_arm(
        &self,
        index: usize,
        arm: &DefenseSpec,
        seed: u64,
        trainset: &mut Option<DefenseTrainset<T>>,
    ) -> Result<(f64, f64)> {
        let (victim, cache) = (&self.prep.victim, &self.prep.cache);
        match arm {
            DefenseSpec::None => evaluate_ca_aa(victim, None, cache),
            DefenseSpec::RandomResizePad(cfg) => {
                let d = RandomResizePad { cfg: cfg.clone(), seed };
                evaluate_ca_aa(victim, Some(&d), cache)
            }
            DefenseSpec::Noise { std } => {
                let d = GaussianNoise { std: *std, seed };
                evaluate_ca_aa(victim, Some(&d), cache)
            }
            DefenseSpec::Defender(cfg) => {
                if trainset.is_none() {
                    *trainset = Some(seed_trainset(self.spec, self.prep, seed)?);
                }
                let set = trainset.as_ref().expect("built above");
                let (d, log) = tune_on(self.spec, self.prep, set, cfg, seed, &mut |_, _| Ok(()))?;
                let slug = arm.slug(index);
                d.to_checkpoint().save(self.seed_dir.join(format!("{slug}.ckpt")))?;
                log.save_jsonl(self.seed_dir.join(format!("{slug}.curves.jsonl")))?;
                evaluate_ca_aa(victim, Some(&d), cache)
            }
        }
    }
}

/// Training items and the evaluation subset share no image.
pub fn check_disjoint<T: Real>(set: &DefenseTrainset<T>, split: &Split, cache: &AdvCache<T>) -> Result<()> {
    let train: std::collections::BTreeSet<u64> = set.origins.iter().map(|&i| i as u64).collect();
    if train.iter().any(|&i| i as usize >= split.test_offset) {
        return Err(Error::contract("training item outside the train split"));
    }
    if let Some(id) = cache.eval.ids.iter().find(|id| train.contains(id)) {
        return Err(Error::contract(format!("image {id} is in both the training items and the test subset")));
    }
    Ok(())
}

/// Everything a run shares across seeds and arms.
pub struct Prepared<T> {
    pub split: Split,
    pub victim: VictimModel<T>,
    pub corpus: AdversarialCorpus<T>,
    pub cache: AdvCache<T>,
    pub dir: PathBuf,
}

/// Loads the data, obtains the victim and the adversarial cache of the
/// test subset, and records the spec in its run directory.
pub fn prepare<T: Real>(spec: &ExperimentSpec, store: &Store) -> Result<Prepared<T>> {
    spec.validate()?;
    let split = spec.dataset.load(&spec.base_dir)?;
    let victim = obtain_victim::<T>(spec, &split, store)?;
    let dir = store.run_dir(spec);
    mkdir(&dir)?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&dir, e))?;
    let corpus = obtain_corpus(
        &victim,
        &split,
        &spec.attack,
        spec.test_subset,
        spec.subset_seed,
        Some(&dir.join("corpus.adv")),
    )?;
    let cache = AdvCache::from_corpus(&corpus, &split)?;
    Ok(Prepared {
        split,
        victim,
        corpus,
        cache,
        dir,
    })
}

/// Builds the seed's training set, then initializes and tunes one defender
/// arm. `hook` sees every epoch.
pub fn tune_arm<T: Real>(
    spec: &ExperimentSpec,
    prep: &Prepared<T>,
    cfg: &DefenderConfig,
    seed: u64,
    hook: &mut EpochHook<'_, T>,
) -> Result<(DefenderModel<T>, CurveLog)> {
    let set = seed_trainset(spec, prep, seed)?;
    tune_on(spec, prep, &set, cfg, seed, hook)
}

fn seed_trainset<T: Real>(spec: &ExperimentSpec, prep: &Prepared<T>, seed: u64) -> Result<DefenseTrainset<T>> {
    let sampler = SamplerConfig {
        seed,
        ..spec.sampler.clone()
    };
    let set = build_defense_trainset(&prep.victim, &spec.attack, &prep.split.train, &sampler)?;
    check_disjoint(&set, &prep.split, &prep.cache)?;
    Ok(set)
}

fn tune_on<T: Real>(
    spec: &ExperimentSpec,
    prep: &Prepared<T>,
    set: &DefenseTrainset<T>,
    cfg: &DefenderConfig,
    seed: u64,
    hook: &mut EpochHook<'_, T>,
) -> Result<(DefenderModel<T>, CurveLog)> {
    let cfg = defender_config(cfg, &prep.victim, seed);
    let mut d: DefenderModel<T> = init_defender(&cfg, Some(&prep.split.train))?;
    let tune = TuneConfig {
        seed,
        ..spec.tune.clone()
    };
    let log = tune_defender_with(&mut d, &prep.victim, set, &tune, Some(&prep.cache.eval), hook)?;
    Ok((d, log))
}

/// Runs every (seed, arm) cell of `spec`. Rows come in arm order, then seed
/// order. A failing cell is recorded and the rest still run; failures of
/// shared stages (data, victim, adversarial cache) are returned as errors.
pub fn run_experiment<T: Real>(spec: &ExperimentSpec, store: &Store) -> Result<RunReport> {
    let prep = prepare::<T>(spec, store)?;
    let Prepared {
        split,
        victim,
        cache,
        dir,
        ..
    } = &prep;
    let victim_sum = victim.checksum();
    let (bare_ca, bare_aa) = evaluate_ca_aa(victim, None, cache)?;
    log::info!("undefended CA {:.4} AA {:.4} on {} images", bare_ca, bare_aa, cache.eval.len());

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &seed in &spec.seeds {
        let seed_dir = store.seed_dir(spec, seed);
        mkdir(&seed_dir)?;
        let ctx = ArmContext {
            spec,
            prep: &prep,
            seed_dir: seed_dir.clone(),
        };
        let mut trainset = None;
        let mut seed_rows = Vec::new();
        for (index, arm) in spec.defenses.iter().enumerate() {
            let start = Instant::now();
            let label = arm.label();
            match ctx.run_arm(index, arm, seed, &mut trainset) {
                Ok((ca, aa)) => {
                    let wall = if spec.reproducible { 0.0 } else { start.elapsed().as_secs_f64() };
                    let row = ResultRow::new(&split.name, &spec.victim.label(), &label, &spec.attack.label(), seed, ca, aa, wall)?;
                    log::info!("seed {seed} {label}: CA {:.2} AA {:.2}", row.ca_pct, row.aa_pct);
                    seed_rows.push(row.clone());
                    cells.push((index, row));
                }
                Err(e) => {
                    log::warn!("seed {seed} {label} failed: {e}");
                    failures.push(Failure {
                        seed,
                        defender: label,
                        error: e.to_string(),
                    });
                }
            }
            if victim.checksum() != victim_sum {
                return Err(Error::Checksum {
                    expected: victim_sum,
                    actual: victim.checksum(),
                });
            }
        }
        if !seed_rows.is_empty() {
            emit_results(&seed_rows, seed_dir.join("rows.jsonl"), Format::Jsonl)?;
        }
    }
    cells.sort_by_key(|(index, _)| *index);
    let rows: Vec<ResultRow> = cells.into_iter().map(|(_, r)| r).collect();
    if !rows.is_empty() {
        emit_results(&rows, dir.join("results.csv"), Format::Csv)?;
    }
    if !failures.is_empty() {
        let text: Vec<String> = failures.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
        std::fs::write(dir.join("failures.jsonl"), text.join("\n") + "\n").map_err(|e| Error::io(dir, e))?;
    }
    Ok(RunReport {
        rows,
        failures,
        dir: dir.clone(),
        bare_ca,
        bare_aa,
    })
}

/// Loads the curve log stored for one arm of one seed.
pub fn load_curves(store: &Store, spec: &ExperimentSpec, seed: u64, arm: usize) -> Result<CurveLog> {
    let a = spec
        .defenses
        .get(arm)
        .ok_or_else(|| Error::config(format!("no arm {arm}")))?;
    CurveLog::load_jsonl(store.seed_dir(spec, seed).join(format!("{}.curves.jsonl", a.slug(arm))))
}

/// A tuned defender evaluated, without further tuning, in another
/// (dataset, victim) environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferSpec {
    /// Defender checkpoint produced by a source run.
    pub source: PathBuf,
    /// Name of the source environment, for the row label.
    pub source_name: Option<String>,
    pub dataset: DatasetSpec,
    pub victim: VictimSpec,
    pub attack: AttackConfig,
    pub test_subset: usize,
    pub subset_seed: u64,
    pub seed: u64,
    pub reproducible: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            source: PathBuf::new(),
            source_name: None,
            dataset: DatasetSpec::Mnist(MnistSplit::default()),
            victim: VictimSpec::default(),
            attack: AttackConfig::linf(),
            test_subset: 512,
            subset_seed: 0,
            seed: 42,
            reproducible: false,
            base_dir: PathBuf::from("."),
        }
    }
}

impl TransferSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = toml::from_str(&text)?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    fn target(&self) -> ExperimentSpec {
        ExperimentSpec {
            name: "transfer-target".into(),
            seeds: vec![self.seed],
            dataset: self.dataset.clone(),
            victim: self.victim.clone(),
            attack: self.attack.clone(),
            test_subset: self.test_subset,
            subset_seed: self.subset_seed,
            reproducible: self.reproducible,
            base_dir: self.base_dir.clone(),
            ..ExperimentSpec::default()
        }
    }
}

/// Geometry check between a defender and the victim it is plugged into.
pub fn check_geometry<T: Real>(d: &DefenderModel<T>, victim: &VictimModel<T>) -> Result<()> {
    let (a, b) = (d.cfg.input_shape(), victim.cfg.input_shape());
    if a != b {
        return Err(Error::config(format!(
            "defender geometry {a:?} does not match victim input {b:?}; transfer needs equal shapes"
        )));
    }
    Ok(())
}

pub fn transfer_eval<T: Real>(spec: &TransferSpec, store: &Store) -> Result<ResultRow> {
    let start = Instant::now();
    let d: DefenderModel<T> = DefenderModel::from_checkpoint(&Checkpoint::load(resolve(&spec.base_dir, &spec.source))?)?;
    let target = spec.target();
    let split = target.dataset.load(&target.base_dir)?;
    let victim = obtain_victim::<T>(&target, &split, store)?;
    check_geometry(&d, &victim)?;
    let corpus = obtain_corpus(&victim, &split, &spec.attack, spec.test_subset, spec.subset_seed, None)?;
    let cache = AdvCache::from_corpus(&corpus, &split)?;
    let (ca, aa) = evaluate_ca_aa(&victim, Some(&d), &cache)?;
    let label = match &spec.source_name {
        Some(s) => format!("{}<-{s}", d.cfg.label()),
        None => d.cfg.label(),
    };
    let wall = if spec.reproducible { 0.0 } else { start.elapsed().as_secs_f64() };
    ResultRow::new(&split.name, &spec.victim.label(), &label, &spec.attack.label(), spec.seed, ca, aa, wall)
}
