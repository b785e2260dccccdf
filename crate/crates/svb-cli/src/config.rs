//! Settings with three layers of precedence: command-line flags override the
//! config file, which overrides built-in defaults. The config file is plain
//! `key = value` text with `#` comments.

use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub as_norm_top_n: usize,
    pub qmf_d_min_margin: f64,
    pub dcf_p_target: f64,
    pub cluster_ks: Option<Vec<usize>>,
    pub cluster_restarts: usize,
    pub loss_m: f64,
    pub loss_s: f64,
    pub loss_sub_centers: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 42,
            threads: None,
            as_norm_top_n: 400,
            qmf_d_min_margin: 0.01,
            dcf_p_target: 0.05,
            cluster_ks: None,
            cluster_restarts: 3,
            loss_m: 0.2,
            loss_s: 32.0,
            loss_sub_centers: 3,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn parse_ks(s: &str) -> Result<Vec<usize>, CliError> {
    let mut ks = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(usage(format!("empty entry in K list '{s}'")));
        }
        let k: usize = part
            .parse()
            .map_err(|_| usage(format!("bad cluster count '{part}'")))?;
        if k == 0 {
            return Err(usage("cluster count 0 is not allowed".to_string()));
        }
        ks.push(k);
    }
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

impl Settings {
    /// Defaults overlaid with the config file at `path` when given,
    /// otherwise with `$SVB_CONFIG` when set.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut s = Settings::default();
        let env_path = std::env::var_os("SVB_CONFIG").map(std::path::PathBuf::from);
        let effective = path.map(Path::to_path_buf).or(env_path);
        let Some(p) = effective else {
            return Ok(s);
        };
        let text = std::fs::read_to_string(&p)
            .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| usage(format!("{}:{}: {msg}", p.display(), idx + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key '{key}'")));
            }
            let bad = |what: &str| at(format!("bad value '{value}' for {key}: {what}"));
            match key {
                "seed" => s.seed = value.parse().map_err(|_| bad("expected an integer"))?,
                "threads" => {
                    let t: usize = value.parse().map_err(|_| bad("expected an integer"))?;
                    if t == 0 {
                        return Err(bad("must be at least 1"));
                    }
                    s.threads = Some(t);
                }
                "as_norm.top_n" => {
                    let n: usize = value.parse().map_err(|_| bad("expected an integer"))?;
                    if n < 2 {
                        return Err(bad("must be at least 2"));
                    }
                    s.as_norm_top_n = n;
                }
                "qmf.d_min_margin" => {
                    let m: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                    if !(m.is_finite() && m > 0.0) {
                        return Err(bad("must be finite and positive"));
                    }
                    s.qmf_d_min_margin = m;
                }
                "dcf.p_target" => {
                    let t: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                    if !(t.is_finite() && 0.0 < t && t < 1.0) {
                        return Err(bad("must be strictly between 0 and 1"));
                    }
                    s.dcf_p_target = t;
                }
                "cluster.ks" => s.cluster_ks = Some(parse_ks(value)?),
                "cluster.restarts" => {
                    let r: usize = value.parse().map_err(|_| bad("expected an integer"))?;
                    if r == 0 {
                        return Err(bad("must be at least 1"));
                    }
                    s.cluster_restarts = r;
                }
                "loss.m" => {
                    let m: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                    if !(m.is_finite() && (0.0..std::f64::consts::PI).contains(&m)) {
                        return Err(bad("must lie in [0, pi)"));
                    }
                    s.loss_m = m;
                }
                "loss.s" => {
                    let v: f64 = value.parse().map_err(|_| bad("expected a number"))?;
                    if !(v.is_finite() && v > 0.0) {
                        return Err(bad("must be finite and positive"));
                    }
                    s.loss_s = v;
                }
                "loss.sub_centers" => {
                    let c: usize = value.parse().map_err(|_| bad("expected an integer"))?;
                    if c == 0 {
                        return Err(bad("must be at least 1"));
                    }
                    s.loss_sub_centers = c;
                }
                _ => return Err(at(format!("unknown key '{key}'"))),
            }
        }
        Ok(s)
    }
}
