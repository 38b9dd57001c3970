use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{FocalerParams, LossWeights, VflParams};
use crate::pyramid::SniVariant;

/// Everything a toy run depends on. Parsed from flat `key = value` text;
/// `#` starts a comment and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub shab: bool,
    pub da_aifi: bool,
    pub fsfpn_cfsb: bool,
    /// Backbone stages (2..=5) that receive the attention block.
    pub shab_stages: Vec<usize>,
    pub hidden: usize,
    pub heads: usize,
    pub points: usize,
    pub aifi_layers: usize,
    pub repc3_depth: usize,
    #[serde(serialize_with = "ser_sni")]
    pub sni: SniVariant,
    pub bottom_up_cfsb: bool,
    pub cfsb_silu: bool,
    pub weights: LossWeights,
    pub focaler: FocalerParams,
    pub vfl: VflParams,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub canvas: usize,
    pub scenes: usize,
    pub eval_scenes: usize,
    pub objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub prior_size: f64,
    pub match_iou: f64,
    pub eval_iou: f64,
    pub smooth_window: usize,
    pub threads: usize,
    pub grad_eps: f64,
    pub grad_tol: f64,
    pub grad_samples: usize,
}

fn ser_sni<S: serde::Serializer>(v: &SniVariant, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(sni_name(*v))
}

fn sni_name(v: SniVariant) -> &'static str {
    match v {
        SniVariant::Linear => "linear",
        SniVariant::Area => "area",
        SniVariant::Nearest => "nearest",
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            shab: true,
            da_aifi: true,
            fsfpn_cfsb: true,
            shab_stages: vec![4, 5],
            hidden: 16,
            heads: 8,
            points: 4,
            aifi_layers: 1,
            repc3_depth: 3,
            sni: SniVariant::Linear,
            bottom_up_cfsb: false,
            cfsb_silu: false,
            weights: LossWeights::default(),
            focaler: FocalerParams::default(),
            vfl: VflParams::default(),
            seed: 0,
            steps: 300,
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            canvas: 64,
            scenes: 8,
            eval_scenes: 8,
            objects: 4,
            min_size: 4,
            max_size: 12,
            prior_size: 0.15,
            match_iou: 0.1,
            eval_iou: 0.5,
            smooth_window: 25,
            threads: 1,
            grad_eps: 1e-5,
            grad_tol: 1e-4,
            grad_samples: 6,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// The all-off baseline: plain backbone, plain pyramid, no encoder.
    pub fn baseline() -> Self {
        RunConfig {
            shab: false,
            da_aifi: false,
            fsfpn_cfsb: false,
            ..RunConfig::default()
        }
    }

    pub fn with_toggles(&self, shab: bool, da_aifi: bool, fsfpn_cfsb: bool) -> Self {
        RunConfig {
            shab,
            da_aifi,
            fsfpn_cfsb,
            ..self.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "shab" => self.shab = parse_bool(key, v)?,
            "da_aifi" => self.da_aifi = parse_bool(key, v)?,
            "fsfpn_cfsb" => self.fsfpn_cfsb = parse_bool(key, v)?,
            "shab_stages" => {
                self.shab_stages = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num::<usize>(key, s.trim_start_matches(['p', 'P'])))
                    .collect::<Result<_>>()?
            }
            "hidden" => self.hidden = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "points" => self.points = parse_num(key, v)?,
            "aifi_layers" => self.aifi_layers = parse_num(key, v)?,
            "repc3_depth" => self.repc3_depth = parse_num(key, v)?,
            "sni" => {
                self.sni = match v {
                    "linear" => SniVariant::Linear,
                    "area" => SniVariant::Area,
                    "nearest" => SniVariant::Nearest,
                    _ => {
                        return Err(Error::Config(format!(
                            "sni: expected linear, area or nearest, got {v:?}"
                        )))
                    }
                }
            }
            "bottom_up_cfsb" => self.bottom_up_cfsb = parse_bool(key, v)?,
            "cfsb_silu" => self.cfsb_silu = parse_bool(key, v)?,
            "lambda_cls" => self.weights.lambda_cls = parse_num(key, v)?,
            "lambda_l1" => self.weights.lambda_l1 = parse_num(key, v)?,
            "lambda_iou" => self.weights.lambda_iou = parse_num(key, v)?,
            "focaler_d" => self.focaler.d = parse_num(key, v)?,
            "focaler_u" => self.focaler.u = parse_num(key, v)?,
            "vfl_alpha" => self.vfl.alpha = parse_num(key, v)?,
            "vfl_gamma" => self.vfl.gamma = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "canvas" => self.canvas = parse_num(key, v)?,
            "scenes" => self.scenes = parse_num(key, v)?,
            "eval_scenes" => self.eval_scenes = parse_num(key, v)?,
            "objects" => self.objects = parse_num(key, v)?,
            "min_size" => self.min_size = parse_num(key, v)?,
            "max_size" => self.max_size = parse_num(key, v)?,
            "prior_size" => self.prior_size = parse_num(key, v)?,
            "match_iou" => self.match_iou = parse_num(key, v)?,
            "eval_iou" => self.eval_iou = parse_num(key, v)?,
            "smooth_window" => self.smooth_window = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "grad_eps" => self.grad_eps = parse_num(key, v)?,
            "grad_tol" => self.grad_tol = parse_num(key, v)?,
            "grad_samples" => self.grad_samples = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.canvas == 0 || self.canvas % 32 != 0 {
            return bad(format!(
                "canvas must be a positive multiple of 32, got {}",
                self.canvas
            ));
        }
        if self.hidden == 0 || self.hidden % 4 != 0 {
            return bad(format!(
                "hidden must be a positive multiple of 4, got {}",
                self.hidden
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.points == 0 {
            return bad(format!(
                "hidden {} must split over {} heads with points ≥ 1",
                self.hidden, self.heads
            ));
        }
        if self.shab_stages.iter().any(|s| !(2..=5).contains(s)) {
            return bad(format!(
                "shab_stages must lie in 2..=5, got {:?}",
                self.shab_stages
            ));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size >= self.canvas {
            return bad(format!(
                "object sizes {}..={} do not fit the canvas",
                self.min_size, self.max_size
            ));
        }
        if !(self.prior_size > 0.0 && self.prior_size < 1.0) {
            return bad(format!(
                "prior_size must lie in (0,1), got {}",
                self.prior_size
            ));
        }
        for (name, t) in [("match_iou", self.match_iou), ("eval_iou", self.eval_iou)] {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("{name} must lie in (0,1], got {t}"));
            }
        }
        if self.lr < 0.0
            || self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("optimizer settings out of range".into());
        }
        if self.smooth_window == 0 || self.scenes == 0 || self.threads == 0 {
            return bad("smooth_window, scenes and threads must be positive".into());
        }
        self.focaler
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self.shab_stages.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("shab", self.shab.to_string());
        kv("da_aifi", self.da_aifi.to_string());
        kv("fsfpn_cfsb", self.fsfpn_cfsb.to_string());
        kv("shab_stages", stages.join(","));
        kv("hidden", self.hidden.to_string());
        kv("heads", self.heads.to_string());
        kv("points", self.points.to_string());
        kv("aifi_layers", self.aifi_layers.to_string());
        kv("repc3_depth", self.repc3_depth.to_string());
        kv("sni", sni_name(self.sni).to_string());
        kv("bottom_up_cfsb", self.bottom_up_cfsb.to_string());
        kv("cfsb_silu", self.cfsb_silu.to_string());
        kv("lambda_cls", self.weights.lambda_cls.to_string());
        kv("lambda_l1", self.weights.lambda_l1.to_string());
        kv("lambda_iou", self.weights.lambda_iou.to_string());
        kv("focaler_d", self.focaler.d.to_string());
        kv("focaler_u", self.focaler.u.to_string());
        kv("vfl_alpha", self.vfl.alpha.to_string());
        kv("vfl_gamma", self.vfl.gamma.to_string());
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("canvas", self.canvas.to_string());
        kv("scenes", self.scenes.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("objects", self.objects.to_string());
        kv("min_size", self.min_size.to_string());
        kv("max_size", self.max_size.to_string());
        kv("prior_size", self.prior_size.to_string());
        kv("match_iou", self.match_iou.to_string());
        kv("eval_iou", self.eval_iou.to_string());
        kv("smooth_window", self.smooth_window.to_string());
        kv("threads", self.threads.to_string());
        kv("grad_eps", self.grad_eps.to_string());
        kv("grad_tol", self.grad_tol.to_string());
        kv("grad_samples", self.grad_samples.to_string());
        s
    }
}
