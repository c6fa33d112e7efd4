//! Method × N_new × seed sweep with an incrementally written, resumable CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    collect_post_growth, evaluate_control, tension_similarity, tension_spread, CollectionConfig, EvaluationConfig,
    PretrainConfig,
};
use crate::error::{Error, Result};
use crate::growth::{grow_network, grow_normalizer};
use crate::mae::{Architecture, BodySchemaNet, SensorSample};
use crate::retrain::{retrain, write_loss_history, Method, RetrainConfig, SamplerRanges};
use crate::sim::PlantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMethod {
    /// Grown network before any retraining.
    Transplant,
    I,
    II,
    III,
    /// Method I from a fresh random initialization instead of transplanted weights.
    #[serde(rename = "nocopy")]
    NoCopy,
}

impl SweepMethod {
    pub const COMPARED: [SweepMethod; 4] = [SweepMethod::I, SweepMethod::II, SweepMethod::III, SweepMethod::NoCopy];

    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Transplant => "transplant",
            SweepMethod::I => "i",
            SweepMethod::II => "ii",
            SweepMethod::III => "iii",
            SweepMethod::NoCopy => "nocopy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "transplant" => SweepMethod::Transplant,
            "nocopy" | "no-copy" => SweepMethod::NoCopy,
            other => match Method::from_name(other)? {
                Method::I => SweepMethod::I,
                Method::II => SweepMethod::II,
                Method::III => SweepMethod::III,
            },
        })
    }

    /// Retraining schedule, if the method retrains.
    pub fn schedule(self) -> Option<Method> {
        match self {
            SweepMethod::Transplant => None,
            SweepMethod::I | SweepMethod::NoCopy => Some(Method::I),
            SweepMethod::II => Some(Method::II),
            SweepMethod::III => Some(Method::III),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub methods: Vec<SweepMethod>,
    pub n_new: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Adds a pre-retraining row per (N_new, seed).
    pub include_transplant: bool,
    /// Plant files; the built-in arrangements when absent.
    pub plant_old: Option<PathBuf>,
    pub plant_new: Option<PathBuf>,
    /// Pretrained old network; pretrained inline when absent.
    pub old_model: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    /// Post-growth collection; `count` and `seed` are set per cell.
    pub collection: CollectionConfig,
    /// `method` and `seed` are set per cell.
    pub retrain: RetrainConfig,
    pub evaluation: EvaluationConfig,
    /// Muscles whose tension spread is reported; the plant's flexors when absent.
    pub spread_muscles: Option<Vec<usize>>,
    /// `(i, j)` for E_f and f_max; the last old flexor and the last muscle when absent.
    pub similarity_pair: Option<(usize, usize)>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: SweepMethod::COMPARED.to_vec(),
            n_new: vec![1, 3, 5, 7, 10, 15],
            seeds: (0..5).collect(),
            include_transplant: true,
            plant_old: None,
            plant_new: None,
            old_model: None,
            pretrain: PretrainConfig::default(),
            collection: CollectionConfig::default(),
            retrain: RetrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            spread_muscles: None,
            similarity_pair: None,
            workers: 1,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep config serializes")
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.plant_old, &mut cfg.plant_new, &mut cfg.old_model].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.n_new.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one method, N_new and seed".into()));
        }
        if self.n_new.contains(&0) {
            return Err(Error::Config("N_new values must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.collection.validate()
    }

    fn plants(&self) -> Result<(PlantConfig, PlantConfig)> {
        let old = match &self.plant_old {
            Some(p) => PlantConfig::load(p)?,
            None => PlantConfig::old_arrangement(),
        };
        let new = match &self.plant_new {
            Some(p) => PlantConfig::load(p)?,
            None => PlantConfig::new_arrangement(),
        };
        if new.n_muscles() <= old.n_muscles() {
            return Err(Error::Config("the new plant must have more muscles than the old one".into()));
        }
        Ok((old, new))
    }

    fn cell_methods(&self) -> Vec<SweepMethod> {
        let mut set: BTreeSet<SweepMethod> = self.methods.iter().copied().collect();
        if self.include_transplant {
            set.insert(SweepMethod::Transplant);
        }
        set.into_iter().collect()
    }
}

/// Deterministic per-cell seed from a base seed, N_new and a tag.
pub fn derive_seed(base: u64, n_new: usize, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in base.to_le_bytes().iter().chain(&(n_new as u64).to_le_bytes()).chain(tag.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub method: SweepMethod,
    pub n_new: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub key: CellKey,
    /// rad.
    pub e_theta: f64,
    /// N.
    pub sigma_f: f64,
    pub e_f: f64,
    /// N.
    pub f_max_new: f64,
    /// Targets excluded from the metrics.
    pub failed_targets: usize,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn failed(key: CellKey, e: &Error) -> Self {
        let msg: String = e.to_string().chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
        Self {
            key,
            e_theta: f64::NAN,
            sigma_f: f64::NAN,
            e_f: f64::NAN,
            f_max_new: f64::NAN,
            failed_targets: 0,
            status: format!("error: {msg}"),
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e},{},{}\n",
            self.key.method.name(),
            self.key.n_new,
            self.key.seed,
            self.e_theta,
            self.sigma_f,
            self.e_f,
            self.f_max_new,
            self.failed_targets,
            self.status
        )
    }
}

pub const CSV_HEADER: &str = "method,n_new,seed,e_theta,sigma_f,e_f,f_max_new,failed_targets,status";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| r.key);
    }

    pub fn get(&self, key: CellKey) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    /// Median of `metric` over the successful seeds of one (method, N_new) cell.
    pub fn median(&self, method: SweepMethod, n_new: usize, metric: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.key.method == method && r.key.n_new == n_new && r.ok())
            .map(metric)
            .filter(|x| x.is_finite())
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let k = v.len();
        Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
    }

    pub fn methods(&self) -> Vec<SweepMethod> {
        self.rows.iter().map(|r| r.key.method).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn n_new_values(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.key.n_new).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn to_csv(&self, preamble: &str) -> String {
        let mut out = String::new();
        for line in preamble.lines() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_line());
        }
        out
    }

    /// Parses rows, skipping `#` comments and a trailing partial line.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let complete = if text.ends_with('\n') { text } else { &text[..text.rfind('\n').map_or(0, |i| i + 1)] };
        let mut seen_header = false;
        for (i, line) in complete.lines().enumerate() {
            let ln = i + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line.trim() != CSV_HEADER {
                    return Err(Error::parse(ln, "unexpected sweep CSV header"));
                }
                seen_header = true;
                continue;
            }
            let cols: Vec<&str> = line.splitn(9, ',').collect();
            if cols.len() != 9 {
                return Err(Error::parse(ln, "sweep row needs 9 columns"));
            }
            let num = |s: &str| -> Result<f64> { s.trim().parse().map_err(|_| Error::parse(ln, format!("bad number `{s}`"))) };
            let method = SweepMethod::from_name(cols[0]).ok_or_else(|| Error::parse(ln, "unknown method"))?;
            rows.push(SweepRow {
                key: CellKey {
                    method,
                    n_new: cols[1].parse().map_err(|_| Error::parse(ln, "bad n_new"))?,
                    seed: cols[2].parse().map_err(|_| Error::parse(ln, "bad seed"))?,
                },
                e_theta: num(cols[3])?,
                sigma_f: num(cols[4])?,
                e_f: num(cols[5])?,
                f_max_new: num(cols[6])?,
                failed_targets: cols[7].parse().map_err(|_| Error::parse(ln, "bad failed_targets"))?,
                status: cols[8].to_string(),
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Write E_θ and σ_f plots next to the CSV.
    pub plot: bool,
    /// Write per-cell target and loss CSVs under `cells/`.
    pub cell_outputs: bool,
    /// Stop after this many (N_new, seed) groups; used to exercise resumption.
    pub max_groups: Option<usize>,
}

struct OldModel {
    net: BodySchemaNet,
    ranges: SamplerRanges,
}

fn load_or_pretrain(cfg: &SweepConfig, plant_old: &PlantConfig, out_dir: &Path) -> Result<OldModel> {
    if let Some(path) = &cfg.old_model {
        let net = BodySchemaNet::load(path)?;
        let ranges = SamplerRanges::load(SamplerRanges::sidecar_path(path))?;
        return Ok(OldModel { net, ranges });
    }
    let outcome = super::pretrain(plant_old, &cfg.pretrain)?;
    let model_path = out_dir.join("h_old.model");
    outcome.net.save(&model_path)?;
    outcome.ranges.save(SamplerRanges::sidecar_path(&model_path))?;
    Ok(OldModel {
        net: outcome.net,
        ranges: outcome.ranges,
    })
}

fn architecture_of(net: &BodySchemaNet) -> Architecture {
    Architecture {
        hidden: net.encoder().layer_sizes()[1],
        latent: net.latent_width(),
    }
}

struct Context<'a> {
    cfg: &'a SweepConfig,
    old: &'a OldModel,
    plant_new: &'a PlantConfig,
    spread: Vec<usize>,
    pair: (usize, usize),
    cells_dir: Option<PathBuf>,
}

impl Context<'_> {
    fn transplant(&self, n_new: usize, seed: u64) -> Result<(BodySchemaNet, Vec<SensorSample>)> {
        let m_old = self.old.net.n_muscles();
        let grown = grow_network(&self.old.net, self.plant_new.n_muscles())?;
        let collection = CollectionConfig {
            count: n_new,
            seed: derive_seed(seed, n_new, "collect"),
            ..self.cfg.collection.clone()
        };
        let d_new = collect_post_growth(self.plant_new, &grown, &collection, n_new, m_old)?;
        let mut net = grown;
        net.set_normalizer(grow_normalizer(self.old.net.normalizer(), &d_new)?)?;
        net.metadata.insert("tag".into(), "transplant-untrained".into());
        Ok((net, d_new))
    }

    fn cell(&self, key: CellKey, transplant: &BodySchemaNet, d_new: &[SensorSample]) -> Result<SweepRow> {
        let stem = format!("{}_n{}_s{}", key.method.name(), key.n_new, key.seed);
        let net = match key.method.schedule() {
            None => transplant.clone(),
            Some(schedule) => {
                let start = if key.method == SweepMethod::NoCopy {
                    BodySchemaNet::new(
                        1,
                        transplant.n_muscles(),
                        architecture_of(&self.old.net),
                        transplant.normalizer().clone(),
                        derive_seed(key.seed, key.n_new, "nocopy-init"),
                    )?
                } else {
                    transplant.clone()
                };
                let rcfg = RetrainConfig {
                    method: schedule,
                    seed: derive_seed(key.seed, key.n_new, key.method.name()),
                    ..self.cfg.retrain.clone()
                };
                let (net, history) = retrain(&start, &self.old.net, d_new, &rcfg, &self.old.ranges)?;
                if let Some(dir) = &self.cells_dir {
                    write_loss_history(dir.join(format!("{stem}_loss.csv")), &history)?;
                }
                net
            }
        };
        let eval = evaluate_control(&net, self.plant_new, &self.cfg.evaluation)?;
        if let Some(dir) = &self.cells_dir {
            eval.write_targets_csv(dir.join(format!("{stem}.csv")))?;
        }
        let tensions = eval.settled_tensions();
        let sigma_f = tension_spread(&tensions, &self.spread)?;
        let (e_f, f_max_new) = tension_similarity(&tensions, self.pair.0, self.pair.1)?;
        Ok(SweepRow {
            key,
            e_theta: eval.e_theta,
            sigma_f,
            e_f,
            f_max_new,
            failed_targets: eval.failures(),
            status: "ok".into(),
        })
    }

    fn group(&self, n_new: usize, seed: u64, methods: &[SweepMethod]) -> Vec<SweepRow> {
        let key = |method| CellKey { method, n_new, seed };
        match self.transplant(n_new, seed) {
            Ok((net, d_new)) => methods
                .iter()
                .map(|&m| self.cell(key(m), &net, &d_new).unwrap_or_else(|e| SweepRow::failed(key(m), &e)))
                .collect(),
            Err(e) => methods.iter().map(|&m| SweepRow::failed(key(m), &e)).collect(),
        }
    }
}

fn preamble(cfg: &SweepConfig, old: &OldModel) -> String {
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let n_new: Vec<String> = cfg.n_new.iter().map(usize::to_string).collect();
    let model_seed = old.net.metadata.get("seed").cloned().unwrap_or_else(|| "unknown".into());
    format!(
        "myoschema sweep\nseeds={} n_new={} epochs={} pseudo_batch={}\nold_model_seed={model_seed} pretrain_seed={} collection_seed={}",
        seeds.join(" "),
        n_new.join(" "),
        cfg.retrain.epochs,
        cfg.retrain.pseudo_batch,
        cfg.pretrain.seed,
        cfg.pretrain.collection.seed,
    )
}

/// Runs every missing (method, N_new, seed) cell, appending rows to
/// `out_dir/sweep.csv` as they finish, then rewrites the file sorted.
pub fn run_sweep(cfg: &SweepConfig, opts: &RunOptions) -> Result<SweepResult> {
    cfg.validate()?;
    let (plant_old, plant_new) = cfg.plants()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let csv_path = opts.out_dir.join("sweep.csv");
    let old = load_or_pretrain(cfg, &plant_old, &opts.out_dir)?;
    if old.net.n_muscles() != plant_old.n_muscles() {
        return Err(Error::shape("old model muscles", plant_old.n_muscles(), old.net.n_muscles()));
    }
    let cells_dir = if opts.cell_outputs {
        let dir = opts.out_dir.join("cells");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Some(dir)
    } else {
        None
    };
    let m_new = plant_new.n_muscles();
    let ctx = Context {
        cfg,
        old: &old,
        plant_new: &plant_new,
        spread: cfg.spread_muscles.clone().unwrap_or_else(|| plant_new.flexor_indices()),
        pair: cfg.similarity_pair.unwrap_or((old.net.n_muscles() - 1, m_new - 1)),
        cells_dir,
    };
    let header = preamble(cfg, &old);

    let existing = if csv_path.exists() { SweepResult::load(&csv_path)? } else { SweepResult::default() };
    let done: BTreeMap<CellKey, SweepRow> = existing.rows.into_iter().map(|r| (r.key, r)).collect();
    if !csv_path.exists() || done.is_empty() {
        std::fs::write(&csv_path, SweepResult::default().to_csv(&header)).map_err(|e| Error::io(&csv_path, e))?;
    } else {
        let all = SweepResult { rows: done.values().cloned().collect() };
        std::fs::write(&csv_path, all.to_csv(&header)).map_err(|e| Error::io(&csv_path, e))?;
    }

    let methods = cfg.cell_methods();
    let mut groups = Vec::new();
    for &n_new in &cfg.n_new {
        for &seed in &cfg.seeds {
            let todo: Vec<SweepMethod> = methods
                .iter()
                .copied()
                .filter(|&method| !done.contains_key(&CellKey { method, n_new, seed }))
                .collect();
            if !todo.is_empty() {
                groups.push((n_new, seed, todo));
            }
        }
    }
    if let Some(limit) = opts.max_groups {
        groups.truncate(limit);
    }

    let file = OpenOptions::new().append(true).open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let appender = Mutex::new(file);
    let run_group = |(n_new, seed, todo): &(usize, u64, Vec<SweepMethod>)| -> Result<Vec<SweepRow>> {
        let rows = ctx.group(*n_new, *seed, todo);
        let mut f = appender.lock().expect("appender lock");
        for r in &rows {
            log::info!("{} n_new={} seed={} e_theta={:.4} {}", r.key.method.name(), r.key.n_new, r.key.seed, r.e_theta, r.status);
            f.write_all(r.csv_line().as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
        }
        f.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok(rows)
    };
    let new_rows: Vec<Vec<SweepRow>> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| groups.par_iter().map(run_group).collect::<Result<_>>())?
    } else {
        groups.iter().map(run_group).collect::<Result<_>>()?
    };
    drop(appender);

    let mut result = SweepResult {
        rows: done.into_values().chain(new_rows.into_iter().flatten()).collect(),
    };
    result.sort();
    std::fs::write(&csv_path, result.to_csv(&header)).map_err(|e| Error::io(&csv_path, e))?;
    if opts.plot {
        super::plot::write_plots(&result, &opts.out_dir)?;
    }
    Ok(result)
}
