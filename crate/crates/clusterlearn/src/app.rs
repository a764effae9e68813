//! Application plumbing: run configuration, dataset ingestion, result
//! serialization, and the run manifest.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::calibration::{
    calibrate_methods, cluster_estimates, confidence_interval, fit_model, test_at_with,
    CalibrationResult, FittedModel,
};
use crate::clustering::{build_candidates, default_k_max, CandidateSet};
use crate::error::{Error, Result};
use crate::geometry::{
    balance_ratio, ball_growth_profile, boundary_fraction, geo_dissimilarity, validate, Location,
};
use crate::inference::{
    cce_variance, intertemporal_weights, moran_i, spatial_two_nn_weights, CrsOptions, Method,
};
use crate::regression::{fit, score_vector, PanelDataset};
use crate::simstudy::{
    fmt_sig, run_study, write_study_outputs, DesignSpec, ErrorDesign, Model, StudyReport,
};

/// Default inner replication counts: analyze mode is more thorough than
/// simulation mode.
pub const DEFAULT_B_ANALYZE: usize = 10_000;
pub const DEFAULT_B_SIMULATE: usize = 1_000;

/// Parse a method set flag: a single method name or `all`.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    match s.to_ascii_lowercase().as_str() {
        "im" => Ok(vec![Method::IM]),
        "crs" => Ok(vec![Method::CRS]),
        "cce" => Ok(vec![Method::CCE]),
        "unit" => Ok(vec![Method::UNIT]),
        "all" => Ok(vec![Method::IM, Method::CRS, Method::CCE, Method::UNIT]),
        other => Err(Error::InvalidArgument(format!(
            "unknown method `{other}` (expected im, crs, cce, unit, or all)"
        ))),
    }
}

/// Parse a simulation design flag of the form `ols-baseline`.
pub fn parse_design(s: &str) -> Result<(Model, ErrorDesign)> {
    let lower = s.to_ascii_lowercase();
    let (m, e) = lower
        .split_once(['-', 'x'])
        .ok_or_else(|| Error::InvalidArgument(format!("design `{s}` is not model-error")))?;
    let model = match m {
        "ols" => Model::Ols,
        "iv" => Model::Iv,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown model `{other}` (expected ols or iv)"
            )))
        }
    };
    let error = match e {
        "baseline" => ErrorDesign::Baseline,
        "sar" => ErrorDesign::Sar,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown error design `{other}` (expected baseline or sar)"
            )))
        }
    };
    Ok((model, error))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// All knobs of a run. A JSON config file carries the same fields; command
/// line flags override file values field by field.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub k_max: Option<usize>,
    pub b: Option<usize>,
    pub seed: Option<u64>,
    /// `im`, `crs`, `cce`, `unit`, or `all`.
    pub method: Option<String>,
    pub threads: Option<usize>,
    // simulate-only fields
    pub design: Option<String>,
    pub units: Option<usize>,
    pub reps: Option<usize>,
    /// diagnose-only: run the O(n^3) triangle-inequality check
    pub check_triangle: Option<bool>,
    /// analyze-only: seed for the exact-level randomized CRS tie rule
    /// (default: conservative non-randomized rule)
    pub randomized_crs: Option<u64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Field-by-field override: any field set in `flags` wins.
    pub fn merged_with(mut self, flags: &RunConfig) -> Self {
        macro_rules! take {
            ($f:ident) => {
                if flags.$f.is_some() {
                    self.$f = flags.$f.clone();
                }
            };
        }
        take!(data);
        take!(locations);
        take!(out);
        take!(alpha);
        take!(k_max);
        take!(b);
        take!(seed);
        take!(method);
        take!(threads);
        take!(design);
        take!(units);
        take!(reps);
        take!(check_triangle);
        take!(randomized_crs);
        self
    }

    pub fn alpha(&self) -> Result<f64> {
        let a = self.alpha.unwrap_or(0.05);
        if !(0.0 < a && a < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha = {a} outside (0, 1)"
            )));
        }
        Ok(a)
    }

    /// Seeds are mandatory for stochastic commands: no wall-clock default.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::InvalidArgument("--seed is required (runs must be reproducible)".into())
        })
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--data is required".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    /// Content hashes (SHA-256, hex) of every input file.
    pub input_digests: BTreeMap<String, String>,
    /// Elapsed wall time per stage, seconds; filled in as stages finish.
    pub elapsed_seconds: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let mut input_digests = BTreeMap::new();
        for p in [&config.data, &config.locations].into_iter().flatten() {
            input_digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            input_digests,
            elapsed_seconds: BTreeMap::new(),
        })
    }

    /// The manifest is written before any result file so that a crashed
    /// run still leaves a record of what was attempted.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let mut f = std::fs::File::create(&path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// Dataset ingestion
// ---------------------------------------------------------------------------

struct Schema {
    unit_id: usize,
    period: usize,
    y: usize,
    x: usize,
    w: Vec<usize>,
    z: Option<usize>,
    lat: Option<usize>,
    lon: Option<usize>,
}

fn parse_header(header: &csv::StringRecord) -> Result<Schema> {
    let mut unit_id = None;
    let mut period = None;
    let mut y = None;
    let mut x = None;
    let mut z = None;
    let mut lat = None;
    let mut lon = None;
    let mut w: Vec<(usize, usize)> = Vec::new(); // (control index, column)
    let mut unexpected = Vec::new();
    for (col, name) in header.iter().enumerate() {
        match name.trim() {
            "unit_id" => unit_id = Some(col),
            "period" => period = Some(col),
            "y" => y = Some(col),
            "x" => x = Some(col),
            "z" => z = Some(col),
            "lat" => lat = Some(col),
            "lon" => lon = Some(col),
            other => {
                if let Some(idx) = other
                    .strip_prefix('w')
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&i| i >= 1)
                {
                    w.push((idx, col));
                } else {
                    unexpected.push(other.to_string());
                }
            }
        }
    }
    let mut missing = Vec::new();
    for (name, slot) in [
        ("unit_id", &unit_id),
        ("period", &period),
        ("y", &y),
        ("x", &x),
    ] {
        if slot.is_none() {
            missing.push(name);
        }
    }
    w.sort();
    let contiguous = w.iter().enumerate().all(|(i, &(idx, _))| idx == i + 1);
    if !missing.is_empty() || !unexpected.is_empty() || !contiguous {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing columns: {}", missing.join(", ")));
        }
        if !unexpected.is_empty() {
            parts.push(format!("unexpected columns: {}", unexpected.join(", ")));
        }
        if !contiguous {
            parts.push("control columns must be named w1..wp without gaps".to_string());
        }
        parts.push(format!(
            "expected header: unit_id,period,y,x,w1..wp[,z][,lat,lon]; found: {}",
            header.iter().collect::<Vec<_>>().join(",")
        ));
        return Err(Error::Schema(parts.join("; ")));
    }
    if lat.is_some() != lon.is_some() {
        return Err(Error::Schema(
            "lat and lon must be provided together".into(),
        ));
    }
    Ok(Schema {
        unit_id: unit_id.unwrap(),
        period: period.unwrap(),
        y: y.unwrap(),
        x: x.unwrap(),
        w: w.into_iter().map(|(_, c)| c).collect(),
        z,
        lat,
        lon,
    })
}

struct RawRow {
    line: u64,
    unit_id: u64,
    period: u32,
    y: f64,
    x: f64,
    w: Vec<f64>,
    z: Option<f64>,
    lat: Option<f64>,
    lon: Option<f64>,
}

fn field_f64(rec: &csv::StringRecord, col: usize) -> Option<f64> {
    rec.get(col)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

/// Load auxiliary locations from a `unit_id,period,lat,lon` CSV.
pub fn load_locations(path: &Path) -> Result<BTreeMap<(u64, u32), (f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let want = ["unit_id", "period", "lat", "lon"];
    let idx: Vec<usize> = want
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Schema(format!("locations file missing column `{name}`")))
        })
        .collect::<Result<_>>()?;
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let unit = field_f64(&rec, idx[0])
            .ok_or_else(|| Error::InvalidInput("bad unit_id in locations file".into()))?
            as u64;
        let period = field_f64(&rec, idx[1])
            .ok_or_else(|| Error::InvalidInput("bad period in locations file".into()))?
            as u32;
        let lat = field_f64(&rec, idx[2])
            .ok_or_else(|| Error::InvalidInput("bad lat in locations file".into()))?;
        let lon = field_f64(&rec, idx[3])
            .ok_or_else(|| Error::InvalidInput("bad lon in locations file".into()))?;
        map.insert((unit, period), (lat, lon));
    }
    Ok(map)
}

/// Load a panel dataset. Coordinates come either from `lat`/`lon` columns
/// in the data file or from a separate locations file; rows are normalized
/// to (unit_id, period) order.
pub fn load_dataset(data_path: &Path, locations_path: Option<&Path>) -> Result<PanelDataset> {
    let mut rdr = csv::Reader::from_path(data_path)?;
    let schema = parse_header(&rdr.headers()?.clone())?;
    let mut rows: Vec<RawRow> = Vec::new();
    let mut bad_lines: Vec<u64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2; // 1-based, after the header
        let parse = || -> Option<RawRow> {
            Some(RawRow {
                line,
                unit_id: field_f64(&rec, schema.unit_id)? as u64,
                period: field_f64(&rec, schema.period)? as u32,
                y: field_f64(&rec, schema.y)?,
                x: field_f64(&rec, schema.x)?,
                w: schema
                    .w
                    .iter()
                    .map(|&c| field_f64(&rec, c))
                    .collect::<Option<Vec<f64>>>()?,
                z: match schema.z {
                    Some(c) => Some(field_f64(&rec, c)?),
                    None => None,
                },
                lat: match schema.lat {
                    Some(c) => Some(field_f64(&rec, c)?),
                    None => None,
                },
                lon: match schema.lon {
                    Some(c) => Some(field_f64(&rec, c)?),
                    None => None,
                },
            })
        };
        match parse() {
            Some(r) => rows.push(r),
            None => bad_lines.push(line),
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::InvalidInput(format!(
            "missing or non-numeric values on lines: {}",
            bad_lines
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    // duplicate (unit, period) detection with line numbers
    let mut seen: BTreeMap<(u64, u32), u64> = BTreeMap::new();
    let mut dups = Vec::new();
    for r in &rows {
        if let Some(first) = seen.insert((r.unit_id, r.period), r.line) {
            dups.push(format!(
                "(unit {}, period {}) on lines {} and {}",
                r.unit_id, r.period, first, r.line
            ));
        }
    }
    if !dups.is_empty() {
        return Err(Error::InvalidInput(format!(
            "duplicate rows: {}",
            dups.join("; ")
        )));
    }
    rows.sort_by_key(|r| (r.unit_id, r.period));

    let coords: Option<BTreeMap<(u64, u32), (f64, f64)>> = match (schema.lat, locations_path) {
        (Some(_), _) => None, // inline coordinates
        (None, Some(p)) => Some(load_locations(p)?),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "dataset has no lat/lon columns; provide --locations".into(),
            ))
        }
    };

    let n = rows.len();
    let p = schema.w.len();
    let mut y = DVector::zeros(n);
    let mut x = DVector::zeros(n);
    let mut w = DMatrix::zeros(n, p);
    let mut z = schema.z.map(|_| DVector::zeros(n));
    let mut loc = Vec::with_capacity(n);
    let mut unit_ids = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        y[i] = r.y;
        x[i] = r.x;
        for (j, &v) in r.w.iter().enumerate() {
            w[(i, j)] = v;
        }
        if let Some(zv) = z.as_mut() {
            zv[i] = r.z.expect("z column present");
        }
        let (lat, lon) = match (&coords, r.lat, r.lon) {
            (None, Some(lat), Some(lon)) => (lat, lon),
            (Some(map), _, _) => *map.get(&(r.unit_id, r.period)).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "no location for (unit {}, period {})",
                    r.unit_id, r.period
                ))
            })?,
            _ => unreachable!("schema guarantees coordinates"),
        };
        loc.push(Location {
            lat,
            lon,
            period: r.period,
        });
        unit_ids.push(r.unit_id);
    }
    let data = PanelDataset {
        y,
        x,
        w,
        z,
        loc,
        unit_ids,
    };
    data.validate()?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Output tracking (partial outputs removed on error)
// ---------------------------------------------------------------------------

/// Collects files written during a run so a failing stage can remove its
/// partial outputs. The manifest itself is always kept.
pub struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    pub fn write_text(&mut self, name: &str, content: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, content)?;
        Ok(())
    }

    pub fn remove_partial(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Shared front half of analyze/calibrate: load, build candidates, fit the
/// covariance model, calibrate the requested methods.
struct Pipeline {
    data: PanelDataset,
    candidates: CandidateSet,
    model: FittedModel,
    results: Vec<Result<CalibrationResult>>,
    methods: Vec<Method>,
}

fn run_pipeline(
    config: &RunConfig,
    b_default: usize,
    manifest: &mut RunManifest,
) -> Result<Pipeline> {
    let seed = config.require_seed()?;
    let alpha = config.alpha()?;
    let methods = parse_methods(config.method.as_deref().unwrap_or("all"))?;
    let b = config.b.unwrap_or(b_default);

    let t = Instant::now();
    let data = load_dataset(config.require_data()?, config.locations.as_deref())?;
    manifest
        .elapsed_seconds
        .insert("load".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let dm = geo_dissimilarity(&data.loc)?;
    let k_max = config.k_max.unwrap_or_else(|| default_k_max(data.n()));
    let candidates = build_candidates(&dm, k_max, seed)?;
    manifest
        .elapsed_seconds
        .insert("clustering".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let model = fit_model(&data)?;
    manifest
        .elapsed_seconds
        .insert("covariance_fit".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let results = calibrate_methods(&data, &candidates, &methods, &model, alpha, b, seed)?;
    manifest
        .elapsed_seconds
        .insert("calibration".into(), t.elapsed().as_secs_f64());

    Ok(Pipeline {
        data,
        candidates,
        model,
        results,
        methods,
    })
}

/// analyze: the full pipeline plus per-method report rows and Moran
/// diagnostics. Emits report.csv, moran.csv, calibration.json.
pub fn cmd_analyze(config: &RunConfig) -> Result<()> {
    let manifest = RunManifest::new("analyze", config)?;
    let out = config.out_dir();
    manifest.write(&out)?;
    let mut outputs = OutputSet::new(&out)?;
    let result = (|| -> Result<()> {
        let mut manifest = manifest.clone();
        let pipe = run_pipeline(config, DEFAULT_B_ANALYZE, &mut manifest)?;

        let mut report =
            String::from("method,theta_hat,ci_lo,ci_hi,k_hat,alpha_hat,decision,p_value\n");
        let mut cal_json = Vec::new();
        let crs_opts = CrsOptions {
            randomized_seed: config.randomized_crs,
            orbit_draws: None,
        };
        let nominal = config.alpha()?;
        println!(
            "{:<6} {:>12} {:>12} {:>9} {:>28} {:>28} {:>5}",
            "method", "theta_hat", "s.e.", "t", "C.I. (calibrated)", "C.I. (usual CV)", "k_hat"
        );
        for (method, res) in pipe.methods.iter().zip(&pipe.results) {
            let cal = match res {
                Ok(c) => c,
                Err(e) => return Err(clone_as_calibration_error(method, e)),
            };
            let ci =
                confidence_interval(&pipe.data, &pipe.model, &pipe.candidates, cal, None, 401)?;
            let outcome = test_at_with(
                &pipe.data,
                &pipe.model,
                &pipe.candidates,
                cal,
                0.0,
                &crs_opts,
            )?;
            // conventional interval: same machinery at the nominal level
            let mut usual_cal = cal.clone();
            usual_cal.alpha_hat = nominal;
            let usual = confidence_interval(
                &pipe.data,
                &pipe.model,
                &pipe.candidates,
                &usual_cal,
                None,
                401,
            )?;
            let se = analyze_standard_error(&pipe, cal)?;
            println!(
                "{:<6} {:>12} {:>12} {:>9} {:>28} {:>28} {:>5}",
                method.to_string(),
                format!("{:.3}", pipe.model.fit.theta_hat),
                se.map(|s| format!("{s:.3}")).unwrap_or_default(),
                format!("{:.3}", outcome.statistic),
                format!("({:.3}, {:.3})", ci.lo, ci.hi),
                format!("({:.3}, {:.3})", usual.lo, usual.hi),
                cal.k_hat,
            );
            report.push_str(&format!(
                "{},{},{},{},{},{},{:?},{}\n",
                method,
                fmt_sig(pipe.model.fit.theta_hat),
                fmt_sig(ci.lo),
                fmt_sig(ci.hi),
                cal.k_hat,
                fmt_sig(cal.alpha_hat),
                outcome.decision,
                fmt_sig(outcome.p_value),
            ));
            cal_json.push(serde_json::to_value(cal)?);
        }
        outputs.write_text("report.csv", &report)?;
        outputs.write_text(
            "calibration.json",
            &format!("{}\n", serde_json::to_string_pretty(&cal_json)?),
        )?;
        outputs.write_text("moran.csv", &moran_report(&pipe.data, &pipe.model.fit)?)?;
        manifest.write(&out)?;
        Ok(())
    })();
    if result.is_err() {
        outputs.remove_partial();
    }
    result
}

/// Standard error for the printed analysis table: the cluster-mean standard
/// error for IM, the sandwich standard error for CCE/UNIT, and none for CRS
/// (which does not rely on an explicit standard error).
fn analyze_standard_error(pipe: &Pipeline, cal: &CalibrationResult) -> Result<Option<f64>> {
    match cal.method {
        Method::CRS => Ok(None),
        Method::IM => {
            let part = pipe.candidates.partitions.get(&cal.k_hat).ok_or_else(|| {
                Error::InvalidArgument(format!("no candidate partition with k = {}", cal.k_hat))
            })?;
            let est = cluster_estimates(&pipe.data, part)?;
            let k = est.len() as f64;
            let mean = est.iter().sum::<f64>() / k;
            let ssq: f64 = est.iter().map(|e| (e - mean) * (e - mean)).sum();
            Ok(Some((ssq / (k - 1.0)).sqrt() / k.sqrt()))
        }
        Method::CCE => {
            let part = pipe.candidates.partitions.get(&cal.k_hat).ok_or_else(|| {
                Error::InvalidArgument(format!("no candidate partition with k = {}", cal.k_hat))
            })?;
            Ok(Some(
                cce_variance(&pipe.data, part, &pipe.model.fit)?.sqrt(),
            ))
        }
        Method::UNIT => {
            let keys: Vec<u64> = (0..pipe.data.n() as u64).collect();
            let singletons = crate::clustering::Partition::from_group_keys(&keys)?;
            Ok(Some(
                cce_variance(&pipe.data, &singletons, &pipe.model.fit)?.sqrt(),
            ))
        }
    }
}

fn clone_as_calibration_error(method: &Method, e: &Error) -> Error {
    Error::CalibrationFailure(format!("method {method}: {e}"))
}

/// Moran's I of the observation scores under the built-in weight schemes,
/// one row per scheme.
pub fn moran_report(data: &PanelDataset, fitted: &crate::regression::FitResult) -> Result<String> {
    let scores = score_vector(data, fitted)?;
    let s: Vec<f64> = scores.iter().copied().collect();
    let mut out = String::from("weights,moran_i,z,p_value\n");
    let schemes: Vec<(&str, DMatrix<f64>)> = vec![
        (
            "spatial_2nn",
            spatial_two_nn_weights(&data.loc, &data.unit_ids),
        ),
        ("intertemporal", intertemporal_weights(&data.unit_ids)),
    ];
    for (name, w) in schemes {
        if w.iter().all(|&v| v == 0.0) {
            continue; // scheme undefined (e.g. single period)
        }
        let m = moran_i(&s, &w)?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            name,
            fmt_sig(m.i),
            fmt_sig(m.z),
            fmt_sig(m.p_value)
        ));
    }
    Ok(out)
}

/// calibrate: the pipeline up to level/cluster selection. Emits
/// errorgrid.csv (method,k,a,type1) and calibration.json.
pub fn cmd_calibrate(config: &RunConfig) -> Result<()> {
    let manifest = RunManifest::new("calibrate", config)?;
    let out = config.out_dir();
    manifest.write(&out)?;
    let mut outputs = OutputSet::new(&out)?;
    let result = (|| -> Result<()> {
        let mut manifest = manifest.clone();
        let pipe = run_pipeline(config, DEFAULT_B_SIMULATE, &mut manifest)?;
        let mut grid_csv = String::from("method,k,a,type1\n");
        let mut cal_json = Vec::new();
        for (method, res) in pipe.methods.iter().zip(&pipe.results) {
            let cal = match res {
                Ok(c) => c,
                Err(e) => return Err(clone_as_calibration_error(method, e)),
            };
            for cell in &cal.grid.type1 {
                grid_csv.push_str(&format!(
                    "{},{},{},{}\n",
                    method,
                    cell.k,
                    fmt_sig(cell.a),
                    fmt_sig(cell.rate)
                ));
            }
            cal_json.push(serde_json::to_value(cal)?);
        }
        outputs.write_text("errorgrid.csv", &grid_csv)?;
        outputs.write_text(
            "calibration.json",
            &format!("{}\n", serde_json::to_string_pretty(&cal_json)?),
        )?;
        manifest.write(&out)?;
        Ok(())
    })();
    if result.is_err() {
        outputs.remove_partial();
    }
    result
}

/// simulate: the Monte Carlo study harness.
pub fn cmd_simulate(config: &RunConfig) -> Result<StudyReport> {
    let seed = config.require_seed()?;
    let (model, error) = parse_design(
        config
            .design
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--design is required".into()))?,
    )?;
    let units = config.units.unwrap_or(205);
    let reps = config
        .reps
        .ok_or_else(|| Error::InvalidArgument("--reps is required".into()))?;
    let b = config.b.unwrap_or(DEFAULT_B_SIMULATE);
    let mut spec = DesignSpec::new(model, error, units, reps, b, seed);
    spec.alpha = config.alpha()?;
    spec.k_max = config.k_max;

    let mut manifest = RunManifest::new("simulate", config)?;
    let out = config.out_dir();
    manifest.write(&out)?;
    let t = Instant::now();
    let report = run_study(
        &spec,
        &parse_methods(config.method.as_deref().unwrap_or("all"))?,
    )?;
    manifest
        .elapsed_seconds
        .insert("study".into(), t.elapsed().as_secs_f64());
    write_study_outputs(&report, &out)?;
    manifest.write(&out)?;
    Ok(report)
}

/// diagnose: dissimilarity validation, partition-regularity diagnostics
/// over the candidate set, ball-growth profile, and Moran's I. Emits
/// diagnostics.json and moran.csv.
pub fn cmd_diagnose(config: &RunConfig) -> Result<()> {
    let mut manifest = RunManifest::new("diagnose", config)?;
    let out = config.out_dir();
    manifest.write(&out)?;
    let mut outputs = OutputSet::new(&out)?;
    let result = (|| -> Result<()> {
        let data = load_dataset(config.require_data()?, config.locations.as_deref())?;
        let dm = geo_dissimilarity(&data.loc)?;
        let check_triangle = config.check_triangle.unwrap_or(false);
        let validation = validate(&dm, check_triangle);
        if !validation.is_clean() {
            log::warn!("dissimilarity validation reported violations; continuing");
        }
        let seed = config.seed.unwrap_or(0); // clustering seed only breaks ties
        let k_max = config.k_max.unwrap_or_else(|| default_k_max(data.n()));
        let candidates = build_candidates(&dm, k_max, seed)?;
        let med = dm.median_positive_distance();
        let radii: Vec<f64> = (1..=10).map(|i| med * i as f64 / 5.0).collect();
        let balls = ball_growth_profile(&dm, &radii);
        let mut partition_rows = Vec::new();
        for (k, p) in &candidates.partitions {
            partition_rows.push(serde_json::json!({
                "k": k,
                "balance_ratio": balance_ratio(p)?,
                "boundary_fraction": boundary_fraction(p, &dm, med / 2.0)?,
            }));
        }
        let diag = serde_json::json!({
            "n": data.n(),
            "validation_clean": validation.is_clean(),
            "triangle_checked": check_triangle,
            "triangle_violations": validation.triangle_violations.len(),
            "asymmetric_pairs": validation.asymmetric_pairs.len(),
            "negative_entries": validation.negative_entries.len(),
            "nonzero_diagonal": validation.nonzero_diagonal.len(),
            "median_positive_distance": med,
            "ball_growth": balls.iter().map(|b| serde_json::json!({
                "r": b.r, "min": b.min, "mean": b.mean, "max": b.max
            })).collect::<Vec<_>>(),
            "partitions": partition_rows,
        });
        outputs.write_text(
            "diagnostics.json",
            &format!("{}\n", serde_json::to_string_pretty(&diag)?),
        )?;
        // Moran diagnostics need residual scores from the full-sample fit
        let full: Vec<usize> = (0..data.n()).collect();
        let fitted = fit(&data, &full)?;
        outputs.write_text("moran.csv", &moran_report(&data, &fitted)?)?;
        manifest.elapsed_seconds.insert("diagnose".into(), 0.0);
        manifest.write(&out)?;
        Ok(())
    })();
    if result.is_err() {
        outputs.remove_partial();
    }
    result
}
