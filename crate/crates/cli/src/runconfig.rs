//! Run configuration: a key=value file overlaid by command-line flags.
//!
//! Every flag has a config key of the same name, so a run is reproducible
//! from its echoed configuration alone. Flags win over file values; file
//! values win over built-in defaults.

use actmax_core::kv::KvFile;
use actmax_core::network::{load_weights, NetworkGraph, NetworkSpec, UnitRef};
use actmax_core::{Error, MaximizationConfig, Result};
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub net: Option<String>,
    pub seed: u64,
    pub source: Option<String>,
    pub calib: Option<String>,
    pub out: Option<String>,
    pub units: Vec<String>,
    pub kappa: Option<f64>,
    pub chis: Vec<f64>,
    pub iterations: Option<usize>,
    pub eta0: Option<f64>,
    pub jitter: bool,
    pub plain_ascent: bool,
    pub jobs: usize,
    pub force: bool,
    pub encoder: String,
    pub init_scale: Option<f64>,
    pub window: Option<usize>,
    pub tol_rel: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub jitter_range: Option<usize>,
    pub reg_bound: Option<f64>,
    pub reg_alpha: Option<f64>,
    pub reg_lambda_b: Option<f64>,
    pub reg_lambda_tv_app: Option<f64>,
    pub reg_lambda_tv_mot: Option<f64>,
}

impl RunConfig {
    pub fn load(config_path: Option<&str>) -> Result<Self> {
        let mut rc = RunConfig {
            jitter: true,
            jobs: 1,
            encoder: "rgb".to_string(),
            ..Default::default()
        };
        let Some(path) = config_path else {
            return Ok(rc);
        };
        let kv = KvFile::read(path)?;
        rc.net = kv.get("net").map(str::to_string);
        if let Some(seed) = kv.get_parsed::<u64>("seed", path)? {
            rc.seed = seed;
        }
        rc.source = kv.get("source").map(str::to_string);
        rc.calib = kv.get("calib").map(str::to_string);
        rc.out = kv.get("out").map(str::to_string);
        rc.units = kv.get_all("unit").iter().map(|s| s.to_string()).collect();
        rc.kappa = kv.get_parsed("reg.kappa", path)?;
        for raw in kv.get_all("reg.chi") {
            let chi: f64 = raw
                .parse()
                .map_err(|_| Error::format(path, format!("bad reg.chi value '{raw}'")))?;
            rc.chis.push(chi);
        }
        rc.iterations = kv.get_parsed("iterations", path)?;
        rc.eta0 = kv.get_parsed("eta0", path)?;
        if let Some(j) = kv.get_parsed::<bool>("jitter", path)? {
            rc.jitter = j;
        }
        if let Some(p) = kv.get_parsed::<bool>("plain_ascent", path)? {
            rc.plain_ascent = p;
        }
        if let Some(jobs) = kv.get_parsed::<usize>("jobs", path)? {
            rc.jobs = jobs.max(1);
        }
        if let Some(f) = kv.get_parsed::<bool>("force", path)? {
            rc.force = f;
        }
        if let Some(enc) = kv.get("encoder") {
            rc.encoder = enc.to_string();
        }
        rc.init_scale = kv.get_parsed("init_scale", path)?;
        rc.window = kv.get_parsed("window", path)?;
        rc.tol_rel = kv.get_parsed("tol_rel", path)?;
        rc.beta1 = kv.get_parsed("beta1", path)?;
        rc.beta2 = kv.get_parsed("beta2", path)?;
        rc.epsilon = kv.get_parsed("epsilon", path)?;
        rc.jitter_range = match kv.get("jitter_range") {
            None | Some("auto") => None,
            Some(raw) => Some(raw.parse::<usize>().map_err(|_| {
                Error::format(path, format!("bad jitter_range value '{raw}'"))
            })?),
        };
        rc.reg_bound = kv.get_parsed("reg.B", path)?;
        rc.reg_alpha = kv.get_parsed("reg.alpha", path)?;
        rc.reg_lambda_b = kv.get_parsed("reg.lambda_b", path)?;
        rc.reg_lambda_tv_app = kv.get_parsed("reg.lambda_tv_app", path)?;
        rc.reg_lambda_tv_mot = kv.get_parsed("reg.lambda_tv_mot", path)?;
        Ok(rc)
    }

    /// Builds the per-job configuration for one unit and one chi value.
    pub fn job_config(&self, net: &NetworkGraph, unit: UnitRef, chi: f64) -> Result<MaximizationConfig> {
        let mut cfg = MaximizationConfig::new(unit, net.input_height(), net.input_width());
        cfg.seed = self.seed;
        cfg.jitter = self.jitter;
        cfg.plain_ascent = self.plain_ascent;
        cfg.jitter_range = self.jitter_range;
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.eta0 {
            cfg.eta0 = v;
        }
        if let Some(v) = self.init_scale {
            cfg.init_scale = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.tol_rel {
            cfg.tol_rel = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(b) = self.reg_bound {
            cfg.reg_app.bound = b;
            cfg.reg_mot.bound = b;
        }
        if let Some(a) = self.reg_alpha {
            cfg.reg_app.alpha = a;
            cfg.reg_mot.alpha = a;
        }
        if let Some(v) = self.reg_lambda_b {
            cfg.reg_app.lambda_b = v;
            cfg.reg_mot.lambda_b = v;
        }
        if let Some(v) = self.reg_lambda_tv_app {
            cfg.reg_app.lambda_tv = v;
        }
        if let Some(v) = self.reg_lambda_tv_mot {
            cfg.reg_mot.lambda_tv = v;
        }
        if let Some(k) = self.kappa {
            cfg.reg_mot.kappa = k;
        }
        cfg.reg_mot.chi = chi;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Echo of the resolved run-level configuration.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        if let Some(net) = &self.net {
            kv.set("net", net);
        }
        kv.set("seed", self.seed);
        if let Some(source) = &self.source {
            kv.set("source", source);
        }
        if let Some(calib) = &self.calib {
            kv.set("calib", calib);
        }
        if let Some(out) = &self.out {
            kv.set("out", out);
        }
        for unit in &self.units {
            kv.set("unit", unit);
        }
        if let Some(k) = self.kappa {
            kv.set("reg.kappa", k);
        }
        for chi in &self.chis {
            kv.set("reg.chi", chi);
        }
        if let Some(v) = self.iterations {
            kv.set("iterations", v);
        }
        if let Some(v) = self.eta0 {
            kv.set("eta0", v);
        }
        kv.set("jitter", self.jitter);
        kv.set("plain_ascent", self.plain_ascent);
        kv.set("jobs", self.jobs);
        kv.set("force", self.force);
        kv.set("encoder", &self.encoder);
        kv
    }
}

/// Loads a network from a weight directory or, for a spec file, initializes
/// it deterministically from the seed.
pub fn load_network(net_path: &str, seed: u64) -> Result<NetworkGraph> {
    let path = Path::new(net_path);
    if path.is_dir() {
        load_weights(path)
    } else {
        let spec = NetworkSpec::from_kv_file(path)?;
        NetworkGraph::seeded_init(&spec, seed)
    }
}

pub fn require(value: Option<String>, flag: &str) -> Result<String> {
    value.ok_or_else(|| Error::config(format!("missing required --{flag} (or config key '{flag}')")))
}
