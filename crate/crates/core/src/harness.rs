//! Experiment configuration, sweeps, metrics CSV and summaries.
//!
//! A config is a flat `key = value` document; `#` starts a comment. Every
//! key is optional. See [`ExperimentConfig::KEYS`] for the list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{ExternalSource, Split, SyntheticSpec, generate_synthetic, load_external, Dataset};
use crate::error::{Error, Result};
use crate::fed::{
    self, FederationConfig, FederationData, PhyConfig, Scheme, SchemeConfig, TrainConfig,
    convergence_round, post_convergence_jitter,
};
use crate::model::Architecture;
use crate::par::{Parallelism, with_workers};
use crate::phy::{DEFAULT_GAIN_CAP, DEFAULT_PILOT_LEN, NoiseReference, NoiseSpec, PilotSequence};
use crate::seed::{Purpose, RunSeeds, SHARED, SeedKey};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "MPOTA_OUTPUT_DIR";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HEADER: [&str; 10] = [
    "scheme",
    "seed",
    "round",
    "snr_db",
    "server_acc",
    "client_id",
    "client_bits",
    "client_acc",
    "converged_round",
    "clip_events",
];

/// The schemes plotted against each other: the mixed schemes with two 4-bit
/// levels and the uniform baselines.
pub fn default_sweep() -> Vec<Scheme> {
    ["[32,4,4]", "[24,4,4]", "[16,4,4]", "[12,4,4]", "[4,4,4]", "[16,16,16]", "[8,8,8]"]
        .iter()
        .map(|s| s.parse().expect("built-in scheme"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    External {
        train: ExternalSource,
        test: ExternalSource,
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub schemes: Vec<Scheme>,
    pub rounds: usize,
    pub clients_per_level: usize,
    pub prefer_float: bool,
    pub snr_db: Vec<f64>,
    pub noise_reference: NoiseReference,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub data: DataSource,
    pub master_seed: u64,
    /// Replicate count.
    pub seeds: usize,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    pub parallel: bool,
    pub gain_cap: f64,
    pub pilot_len: usize,
    pub perfect_csi: bool,
    pub conv_window: usize,
    pub conv_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schemes: vec!["[16,4,4]".parse().expect("built-in scheme")],
            rounds: 100,
            clients_per_level: 5,
            prefer_float: false,
            snr_db: vec![5.0, 10.0, 20.0, 30.0],
            noise_reference: NoiseReference::MeasuredSignal,
            train: TrainConfig::default(),
            hidden: vec![64, 32],
            data: DataSource::Synthetic(SyntheticSpec::default()),
            master_seed: 0,
            seeds: 1,
            output_dir: PathBuf::from("out"),
            workers: 0,
            parallel: true,
            gain_cap: DEFAULT_GAIN_CAP,
            pilot_len: DEFAULT_PILOT_LEN,
            perfect_csi: false,
            conv_window: 5,
            conv_fraction: 0.95,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_snr(s: &str) -> Result<f64> {
    let v = match s.to_ascii_lowercase().as_str() {
        "inf" | "noiseless" => f64::INFINITY,
        other => parse_one::<f64>("snr_db", other)?,
    };
    NoiseSpec::new(v, NoiseReference::UnitSignal)?;
    Ok(v)
}

/// Splits `[16,4,4];[4,4,4]` or `[16,4,4] [4,4,4]` into schemes. `default`
/// stands for [`default_sweep`].
fn parse_schemes(value: &str) -> Result<Vec<Scheme>> {
    if value.trim().eq_ignore_ascii_case("default") {
        return Ok(default_sweep());
    }
    let mut out = Vec::new();
    let mut rest = value.trim();
    while !rest.is_empty() {
        let end = match rest.find(']') {
            Some(i) if rest.starts_with('[') => i + 1,
            _ => rest.find(';').unwrap_or(rest.len()),
        };
        out.push(rest[..end].parse()?);
        rest = rest[end..].trim_start_matches(|c: char| c == ';' || c.is_whitespace());
    }
    if out.is_empty() {
        return Err(Error::Config("schemes: empty list".into()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "scheme",
        "schemes",
        "rounds",
        "clients_per_level",
        "prefer_float",
        "snr_db",
        "noise_reference",
        "lr",
        "epochs",
        "batch",
        "hidden",
        "data",
        "n_train",
        "n_test",
        "classes",
        "dim",
        "sigma",
        "train_csv",
        "test_csv",
        "train_images",
        "train_labels",
        "test_images",
        "test_labels",
        "master_seed",
        "seeds",
        "output_dir",
        "workers",
        "parallel",
        "gain_cap",
        "pilot_len",
        "perfect_csi",
        "conv_window",
        "conv_fraction",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "scheme" | "schemes" => self.schemes = parse_schemes(value)?,
            "rounds" => self.rounds = parse_one(key, value)?,
            "clients_per_level" => self.clients_per_level = parse_one(key, value)?,
            "prefer_float" => self.prefer_float = parse_bool(key, value)?,
            "snr_db" => {
                self.snr_db = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse_snr)
                    .collect::<Result<_>>()?
            }
            "noise_reference" => {
                self.noise_reference = match value.to_ascii_lowercase().as_str() {
                    "unit" => NoiseReference::UnitSignal,
                    "measured" => NoiseReference::MeasuredSignal,
                    _ => {
                        return Err(Error::Config(format!(
                            "noise_reference: expected unit or measured, got {value:?}"
                        )));
                    }
                }
            }
            "lr" => self.train.lr = parse_one(key, value)?,
            "epochs" => self.train.epochs = parse_one(key, value)?,
            "batch" => self.train.batch = parse_one(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "data" => {
                self.data = match value.to_ascii_lowercase().as_str() {
                    "synthetic" => DataSource::Synthetic(SyntheticSpec::default()),
                    "csv" => DataSource::External {
                        train: ExternalSource::Csv(PathBuf::new()),
                        test: ExternalSource::Csv(PathBuf::new()),
                        classes: None,
                    },
                    "idx" => DataSource::External {
                        train: ExternalSource::Idx {
                            images: PathBuf::new(),
                            labels: PathBuf::new(),
                        },
                        test: ExternalSource::Idx {
                            images: PathBuf::new(),
                            labels: PathBuf::new(),
                        },
                        classes: None,
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "data: expected synthetic, csv or idx, got {value:?}"
                        )));
                    }
                }
            }
            "n_train" | "n_test" | "dim" | "sigma" => {
                let DataSource::Synthetic(spec) = &mut self.data else {
                    return Err(Error::Config(format!("{key} applies only to data = synthetic")));
                };
                match key {
                    "n_train" => spec.n_train = parse_one(key, value)?,
                    "n_test" => spec.n_test = parse_one(key, value)?,
                    "dim" => spec.dim = parse_one(key, value)?,
                    _ => spec.sigma = parse_one(key, value)?,
                }
            }
            "classes" => match &mut self.data {
                DataSource::Synthetic(spec) => spec.classes = parse_one(key, value)?,
                DataSource::External { classes, .. } => *classes = Some(parse_one(key, value)?),
            },
            "train_csv" | "test_csv" => {
                let DataSource::External { train, test, .. } = &mut self.data else {
                    return Err(Error::Config(format!("{key} applies only to data = csv")));
                };
                let slot = if key == "train_csv" { train } else { test };
                let ExternalSource::Csv(path) = slot else {
                    return Err(Error::Config(format!("{key} applies only to data = csv")));
                };
                *path = PathBuf::from(value);
            }
            "train_images" | "train_labels" | "test_images" | "test_labels" => {
                let DataSource::External { train, test, .. } = &mut self.data else {
                    return Err(Error::Config(format!("{key} applies only to data = idx")));
                };
                let slot = if key.starts_with("train") { train } else { test };
                let ExternalSource::Idx { images, labels } = slot else {
                    return Err(Error::Config(format!("{key} applies only to data = idx")));
                };
                let target = if key.ends_with("images") { images } else { labels };
                *target = PathBuf::from(value);
            }
            "master_seed" => self.master_seed = parse_one(key, value)?,
            "seeds" => self.seeds = parse_one(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "workers" => self.workers = parse_one(key, value)?,
            "parallel" => self.parallel = parse_bool(key, value)?,
            "gain_cap" => self.gain_cap = parse_one(key, value)?,
            "pilot_len" => self.pilot_len = parse_one(key, value)?,
            "perfect_csi" => self.perfect_csi = parse_bool(key, value)?,
            "conv_window" => self.conv_window = parse_one(key, value)?,
            "conv_fraction" => self.conv_fraction = parse_one(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; known keys: {}",
                    Self::KEYS.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies [`OUTPUT_DIR_ENV`] if it is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schemes.is_empty() {
            return fail("at least one scheme is required".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.seeds == 0 {
            return fail("seeds must be at least 1".into());
        }
        if self.snr_db.is_empty() {
            return fail("snr_db needs at least one value".into());
        }
        if self.clients_per_level == 0 {
            return fail("clients_per_level must be at least 1".into());
        }
        if self.train.epochs == 0 || self.train.batch == 0 {
            return fail("epochs and batch must be at least 1".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return fail(format!("lr must be finite and non-negative, got {}", self.train.lr));
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if self.gain_cap.is_nan() || self.gain_cap <= 0.0 {
            return fail(format!("gain_cap must be positive, got {}", self.gain_cap));
        }
        if self.pilot_len == 0 {
            return fail("pilot_len must be at least 1".into());
        }
        if self.conv_window == 0 || !(self.conv_fraction > 0.0 && self.conv_fraction <= 1.0) {
            return fail("conv_window must be >= 1 and conv_fraction in (0, 1]".into());
        }
        if let DataSource::Synthetic(s) = &self.data
            && !(s.sigma >= 0.0 && s.sigma.is_finite()) {
                return fail(format!("sigma must be finite and non-negative, got {}", s.sigma));
            }
        Ok(())
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join(METRICS_FILE)
    }
}

/// Parses a `key = value` document over the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse("config", format!("line {}", n + 1), "expected key = value")
        })?;
        cfg.set(k.trim(), v)
            .map_err(|e| e.context(format!("config line {}", n + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scheme: String,
    pub seed: usize,
    pub round: usize,
    pub snr_db: f64,
    pub server_acc: f64,
    /// `None` on the server row.
    pub client_id: Option<usize>,
    pub client_bits: Option<u32>,
    pub client_acc: Option<f64>,
    /// `None` when the run never converged.
    pub converged_round: Option<usize>,
    pub clip_events: usize,
}

/// Rows ordered by scheme (config order), seed, snr (config order), round,
/// then the server row followed by clients in id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

fn load_data(cfg: &ExperimentConfig, replicate: usize) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let seed = SeedKey {
                master: cfg.master_seed,
                scheme: SHARED,
                replicate: replicate as u64,
                client: SHARED,
                round: 0,
                purpose: Purpose::Data,
            }
            .seed();
            generate_synthetic(seed, spec)
        }
        DataSource::External { train, test, classes } => {
            let train = load_external(train, *classes, Split::Train)?;
            let test = load_external(test, Some(train.classes()), Split::Test)?;
            Ok((train, test))
        }
    }
}

struct Cell {
    scheme: usize,
    seed: usize,
    snr: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let par = cfg.parallelism();
    with_workers(cfg.workers, || run_cells(cfg, par))
}

fn run_cells(cfg: &ExperimentConfig, par: Parallelism) -> Result<MetricsTable> {
    let datasets = par.try_map(cfg.seeds, |r| load_data(cfg, r))?;
    let (train0, _) = &datasets[0];
    let mut dims = vec![train0.dim()];
    dims.extend(&cfg.hidden);
    dims.push(train0.classes());
    let arch = Architecture::new(dims)?;
    let pilot = PilotSequence::unit(cfg.pilot_len)?;

    let mut cells = Vec::new();
    for scheme in 0..cfg.schemes.len() {
        for seed in 0..cfg.seeds {
            for snr in 0..cfg.snr_db.len() {
                cells.push(Cell { scheme, seed, snr });
            }
        }
    }
    let blocks = par.try_map(cells.len(), |i| {
        let cell = &cells[i];
        let scheme = cfg.schemes[cell.scheme];
        let snr = cfg.snr_db[cell.snr];
        run_cell(cfg, &arch, &pilot, &datasets[cell.seed], scheme, cell.seed, snr, par)
            .map_err(|e| e.context(format!("scheme {scheme}, seed {}, snr {snr} dB", cell.seed)))
    })?;
    Ok(MetricsTable {
        rows: blocks.into_iter().flatten().collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    pilot: &PilotSequence,
    data: &(Dataset, Dataset),
    scheme: Scheme,
    seed: usize,
    snr_db: f64,
    par: Parallelism,
) -> Result<Vec<MetricsRow>> {
    let scheme_cfg = SchemeConfig::new(scheme, cfg.clients_per_level, cfg.prefer_float)?;
    let fed_cfg = FederationConfig {
        train: cfg.train,
        phy: PhyConfig {
            noise: NoiseSpec::new(snr_db, cfg.noise_reference)?,
            gain_cap: cfg.gain_cap,
            pilot: pilot.clone(),
            perfect_csi: cfg.perfect_csi,
        },
        parallelism: par,
    };
    // Every scheme shares the data, shards, initialization and channel
    // draws of a replicate, so scheme comparisons are paired.
    let seeds = RunSeeds::new(cfg.master_seed, SHARED, seed as u64);
    let run = fed::run_federation(
        &scheme_cfg,
        cfg.rounds,
        arch,
        FederationData {
            train: &data.0,
            test: &data.1,
        },
        &fed_cfg,
        &seeds,
    )?;
    let server: Vec<f64> = run.records.iter().map(|r| r.server_accuracy).collect();
    let converged = convergence_round(&server, cfg.conv_window, cfg.conv_fraction);
    let name = scheme.to_string();
    let mut rows = Vec::with_capacity(run.records.len() * (1 + scheme_cfg.n_clients()));
    for rec in &run.records {
        let base = MetricsRow {
            scheme: name.clone(),
            seed,
            round: rec.round,
            snr_db,
            server_acc: rec.server_accuracy,
            client_id: None,
            client_bits: None,
            client_acc: None,
            converged_round: converged,
            clip_events: rec.clip_events,
        };
        rows.push(base.clone());
        for (id, &acc) in rec.per_client_accuracy.iter().enumerate() {
            rows.push(MetricsRow {
                client_id: Some(id),
                client_bits: Some(scheme_cfg.client_bits(id)),
                client_acc: Some(acc),
                ..base.clone()
            });
        }
    }
    Ok(rows)
}

fn fmt_acc(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes the table to CSV bytes.
pub fn metrics_csv(table: &MetricsTable) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.scheme.clone(),
            r.seed.to_string(),
            r.round.to_string(),
            r.snr_db.to_string(),
            fmt_acc(r.server_acc),
            fmt_opt(r.client_id),
            fmt_opt(r.client_bits),
            r.client_acc.map(fmt_acc).unwrap_or_default(),
            fmt_opt(r.converged_round),
            r.clip_events.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<metrics buffer>", e.into_error()))
}

/// Writes the CSV through a temporary file in the target directory and
/// renames it into place, so an interrupted write leaves no partial file.
pub fn write_metrics(table: &MetricsTable, path: &Path) -> Result<()> {
    let bytes = metrics_csv(table)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| {
        Error::parse("metrics", format!("line {line}"), format!("{}: bad value {raw:?}", HEADER[i]))
    })
}

fn opt_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<Option<T>> {
    if rec.get(i).is_none_or(str::is_empty) {
        Ok(None)
    } else {
        field(rec, i, line).map(Some)
    }
}

pub fn read_metrics_from<R: std::io::Read>(r: R) -> Result<MetricsTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(Error::parse(
            "metrics",
            "line 1",
            format!("expected header {}", HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(MetricsRow {
            scheme: field(&rec, 0, line)?,
            seed: field(&rec, 1, line)?,
            round: field(&rec, 2, line)?,
            snr_db: field(&rec, 3, line)?,
            server_acc: field(&rec, 4, line)?,
            client_id: opt_field(&rec, 5, line)?,
            client_bits: opt_field(&rec, 6, line)?,
            client_acc: opt_field(&rec, 7, line)?,
            converged_round: opt_field(&rec, 8, line)?,
            clip_events: field(&rec, 9, line)?,
        });
    }
    Ok(MetricsTable { rows })
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics_from(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: String,
    /// `None` when summarizing across all SNRs.
    pub snr_db: Option<f64>,
    pub runs: usize,
    /// Mean over runs that converged.
    pub converged_round: Option<f64>,
    pub unconverged_runs: usize,
    pub final_server_acc: f64,
    /// Absent when the scheme has no 4-bit clients.
    pub final_4bit_client_acc: Option<f64>,
    /// Mean round-to-round std of server accuracy after convergence.
    pub post_convergence_jitter: Option<f64>,
}

struct RunTrace {
    server: Vec<f64>,
    final_4bit: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

type GroupKey = (String, Option<u64>);

fn summarize_groups(table: &MetricsTable, window: usize, fraction: f64, by_snr: bool) -> Vec<SchemeSummary> {
    // (scheme, snr key) -> (seed, snr bits) -> trace, in first-seen order.
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, BTreeMap<(usize, u64), RunTrace>> = BTreeMap::new();
    let mut last_round: BTreeMap<(String, usize, u64), usize> = BTreeMap::new();
    for r in &table.rows {
        let k = (r.scheme.clone(), r.seed, r.snr_db.to_bits());
        let e = last_round.entry(k).or_insert(0);
        *e = (*e).max(r.round);
    }
    for r in &table.rows {
        let gkey = (r.scheme.clone(), by_snr.then_some(r.snr_db.to_bits()));
        if !groups.contains_key(&gkey) {
            order.push(gkey.clone());
        }
        let runs = groups.entry(gkey).or_default();
        let trace = runs.entry((r.seed, r.snr_db.to_bits())).or_insert(RunTrace {
            server: Vec::new(),
            final_4bit: Vec::new(),
        });
        match r.client_id {
            None => trace.server.push(r.server_acc),
            Some(_) => {
                let last = last_round[&(r.scheme.clone(), r.seed, r.snr_db.to_bits())];
                if r.round == last && r.client_bits == Some(4) {
                    trace.final_4bit.extend(r.client_acc);
                }
            }
        }
    }
    order
        .into_iter()
        .map(|gkey| {
            let runs = &groups[&gkey];
            let mut conv = Vec::new();
            let mut jitter = Vec::new();
            let mut finals = Vec::new();
            let mut four = Vec::new();
            for t in runs.values() {
                let c = convergence_round(&t.server, window, fraction);
                if let Some(c) = c {
                    conv.push(c as f64);
                    jitter.extend(post_convergence_jitter(&t.server, c));
                }
                finals.extend(t.server.last());
                four.extend(mean(&t.final_4bit));
            }
            SchemeSummary {
                scheme: gkey.0,
                snr_db: gkey.1.map(f64::from_bits),
                runs: runs.len(),
                converged_round: mean(&conv),
                unconverged_runs: runs.len() - conv.len(),
                final_server_acc: mean(&finals).unwrap_or(f64::NAN),
                final_4bit_client_acc: mean(&four),
                post_convergence_jitter: mean(&jitter),
            }
        })
        .collect()
}

/// One row per scheme, averaged over seeds and SNRs.
pub fn summarize(table: &MetricsTable, window: usize, fraction: f64) -> Vec<SchemeSummary> {
    summarize_groups(table, window, fraction, false)
}

/// One row per (scheme, snr), averaged over seeds.
pub fn summarize_by_snr(table: &MetricsTable, window: usize, fraction: f64) -> Vec<SchemeSummary> {
    summarize_groups(table, window, fraction, true)
}

/// Fixed-width text rendering of a summary.
pub fn render_summary(rows: &[SchemeSummary]) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>5} {:>10} {:>12} {:>12} {:>10}",
        "scheme", "snr_db", "runs", "conv_round", "final_server", "final_4bit", "jitter"
    );
    for r in rows {
        let snr = r.snr_db.map_or("all".to_string(), |s| s.to_string());
        let conv = match (r.converged_round, r.unconverged_runs) {
            (c, 0) => opt(c, 1),
            (c, n) => format!("{}(+{n})", opt(c, 1)),
        };
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>5} {:>10} {:>12.4} {:>12} {:>10}",
            r.scheme,
            snr,
            r.runs,
            conv,
            r.final_server_acc,
            opt(r.final_4bit_client_acc, 4),
            opt(r.post_convergence_jitter, 4)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.schemes[0].to_string(), "[16,4,4]");
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.snr_db, vec![5.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn keys_and_comments() {
        let cfg = parse_config(
            "# sweep\nschemes = [4,12,4]; [16,16,16]\nrounds=7 # short\nsnr_db = 20, inf\nhidden = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.schemes.len(), 2);
        assert_eq!(cfg.schemes[0].to_string(), "[12,4,4]");
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.snr_db, vec![20.0, f64::INFINITY]);
        assert_eq!(cfg.hidden, vec![8]);
        assert_eq!(parse_config("schemes = default").unwrap().schemes, default_sweep());
    }

    #[test]
    fn rejections() {
        let err = parse_config("scheme = [10,4,4]").unwrap_err();
        assert!(matches!(err.root(), Error::Config(_)));
        assert!(err.to_string().contains("[32, 24, 16, 12, 8, 6, 4]"), "{err}");
        assert!(parse_config("colour = red").is_err());
        assert!(parse_config("seeds = 0").is_err());
        assert!(parse_config("rounds").is_err());
        assert!(parse_config("snr_db = -inf").is_err());
        assert!(parse_config("train_csv = a.csv").is_err());
    }

    #[test]
    fn every_key_is_handled() {
        let mut cfg = ExperimentConfig::default();
        for key in ExperimentConfig::KEYS {
            let err = cfg.set(key, "\u{1}").err();
            if let Some(e) = err {
                assert!(!e.to_string().contains("unknown key"), "{key}");
            }
        }
    }

    #[test]
    fn env_overrides_output_dir() {
        // Only this test touches the variable.
        unsafe { std::env::set_var(OUTPUT_DIR_ENV, "/tmp/elsewhere") };
        let mut cfg = ExperimentConfig::default();
        cfg.apply_env();
        unsafe { std::env::remove_var(OUTPUT_DIR_ENV) };
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/elsewhere"));
    }

    fn row(scheme: &str, round: usize, server: f64, client: Option<(usize, u32, f64)>) -> MetricsRow {
        MetricsRow {
            scheme: scheme.into(),
            seed: 0,
            round,
            snr_db: 20.0,
            server_acc: server,
            client_id: client.map(|c| c.0),
            client_bits: client.map(|c| c.1),
            client_acc: client.map(|c| c.2),
            converged_round: None,
            clip_events: 0,
        }
    }

    #[test]
    fn formatting_rules() {
        let t = MetricsTable {
            rows: vec![row("[16,4,4]", 1, 0.97, Some((3, 4, 0.5)))],
        };
        let text = String::from_utf8(metrics_csv(&t).unwrap()).unwrap();
        assert_eq!(
            text,
            "scheme,seed,round,snr_db,server_acc,client_id,client_bits,client_acc,converged_round,clip_events\n\
             \"[16,4,4]\",0,1,20,0.970000,3,4,0.500000,,0\n"
        );
        let empty = String::from_utf8(metrics_csv(&MetricsTable::default()).unwrap()).unwrap();
        assert_eq!(empty, HEADER.join(",") + "\n");
    }

    #[test]
    fn summary_of_hand_built_table() {
        // Plateau trace: linear rise to 0.95 at round 20, flat to round 30.
        let mut rows = Vec::new();
        for k in 1..=30usize {
            let acc = 0.95 * k.min(20) as f64 / 20.0;
            rows.push(row("[16,4,4]", k, acc, None));
            rows.push(row("[16,4,4]", k, acc, Some((0, 16, acc))));
            rows.push(row("[16,4,4]", k, acc, Some((1, 4, 0.5))));
            rows.push(row("[16,16,16]", k, 0.9, None));
            rows.push(row("[16,16,16]", k, 0.9, Some((0, 16, 0.9))));
        }
        let s = summarize(&MetricsTable { rows }, 5, 0.95);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].scheme, "[16,4,4]");
        assert_eq!(s[0].converged_round, Some(22.0));
        assert_eq!(s[0].final_4bit_client_acc, Some(0.5));
        assert_eq!(s[0].final_server_acc, 0.95);
        assert_eq!(s[1].final_4bit_client_acc, None);
        assert_eq!(s[1].converged_round, Some(5.0));
        assert_eq!(s[1].post_convergence_jitter, Some(0.0));
    }
}
