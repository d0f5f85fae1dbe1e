//! Plain-text `key = value` run configuration with `include` support.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adversary::{AttackConfig, AttackTarget, StepConfig};
use crate::data::{SegmentPolicy, SynthCorpusConfig};
use crate::encoder::{AttentionKind, AttentionPosition, EncoderConfig, SimamStats};
use crate::error::{Error, Result};
use crate::losses::{LossVariant, MarginConfig};
use crate::metrics::TdcfCostModel;
use crate::sincfront::Magnitude;

/// Environment variable overriding `run.dir`.
pub const RUN_DIR_ENV: &str = "RUN_DIR";

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run.dir", "runs/default", "output directory (overridden by RUN_DIR, then --out)"),
    ("run.seeds", "1", "comma-separated seed list; one run directory per seed"),
    ("data.audio_dir", "", "directory holding <utt id>.wav files"),
    ("data.train_protocol", "", "training protocol"),
    ("data.dev_protocol", "", "development protocol for best-checkpoint selection (optional)"),
    ("data.eval_protocol", "", "evaluation protocol (optional for train)"),
    ("data.train_policy", "random_crop", "segment policy while training"),
    ("data.eval_policy", "center", "segment policy while scoring"),
    ("encoder.input_len", "64600", "samples per segment"),
    ("encoder.num_filters", "70", "sinc filters"),
    ("encoder.kernel_len", "129", "sinc kernel length (odd)"),
    ("encoder.magnitude", "signed", "signed|abs sinc output"),
    ("encoder.channels", "32,32,64,64,64,64", "residual block output channels"),
    ("encoder.pool_time", "29", "time steps after adaptive pooling (0 keeps all)"),
    ("encoder.gru_hidden", "64", "GRU hidden size"),
    ("encoder.embed_dim", "64", "embedding size"),
    ("encoder.attention", "simam", "none|se|cbam|simam"),
    ("encoder.attention_position", "auto", "auto|before_bn|after_bn"),
    ("encoder.se_reduction", "8", "SE bottleneck reduction"),
    ("encoder.cbam_reduction", "8", "CBAM channel bottleneck reduction"),
    ("encoder.cbam_kernel", "7", "CBAM spatial kernel"),
    ("encoder.simam_lambda", "0.0001", "SimAM regulariser"),
    ("encoder.simam_stats", "leave_one_out", "leave_one_out|pooled"),
    ("encoder.bn_momentum", "0.1", "batch-norm running-stat momentum"),
    ("encoder.bn_eps", "0.00001", "batch-norm epsilon"),
    ("loss.variant", "waam", "ce|nsl|am|aam|waam"),
    ("loss.scale", "32", "margin-softmax scale s"),
    ("loss.margin", "0.2", "shared margin of am and aam"),
    ("loss.margin_spoof", "0.2", "waam spoof margin"),
    ("loss.margin_genuine", "0.9", "waam bonafide margin"),
    ("loss.weight_spoof", "0.9", "spoof class weight"),
    ("loss.weight_genuine", "0.1", "bonafide class weight"),
    ("loss.fusion_lambda", "0.8", "weight of the relation loss"),
    ("meta.enabled", "true", "episodic batches with the relation loss"),
    ("meta.K", "2", "utterances per class per episode"),
    ("adv.enabled", "true", "adversarial branch"),
    ("adv.delta", "0.002", "L-inf budget"),
    ("adv.alpha", "0.0001", "PGD step size"),
    ("adv.steps", "12", "PGD iterations"),
    ("adv.target", "ce", "ce|margin: loss the attack ascends"),
    ("adv.update_aux_stats", "false", "attack iterations update auxiliary running statistics"),
    ("optim.lr", "0.0001", "Adam learning rate"),
    ("optim.lr_min", "0", "final learning rate of the cosine schedule"),
    ("optim.schedule", "cosine", "constant|cosine"),
    ("optim.epochs", "100", "training epochs"),
    ("optim.batch", "16", "batch size without meta-learning"),
    ("eval.hist_bins", "50", "score histogram bins"),
    ("tdcf.p_tar", "0.9405", "target prior"),
    ("tdcf.p_non", "0.0095", "non-target prior"),
    ("tdcf.p_spoof", "0.05", "spoof prior"),
    ("tdcf.c_miss_asv", "1", "ASV miss cost"),
    ("tdcf.c_fa_asv", "10", "ASV false-alarm cost"),
    ("tdcf.c_miss_cm", "1", "CM miss cost"),
    ("tdcf.c_fa_cm", "10", "CM false-alarm cost"),
    ("tdcf.p_miss_asv", "0.01", "ASV miss rate"),
    ("tdcf.p_fa_asv", "0.01", "ASV false-alarm rate"),
    ("tdcf.p_miss_spoof_asv", "0.05", "ASV miss rate on spoofs"),
    ("attack.deltas", "0,0.0001,0.001,0.002,0.01", "budgets swept by the attack command"),
    ("attack.n_audio", "4", "adversarial files written per budget"),
    ("synth.attack_types", "6", "synthetic attack types"),
    ("synth.utts_per_type", "40", "utterances per attack type"),
    ("synth.bonafide", "120", "bonafide utterances"),
    ("synth.train_fraction", "0.75", "share of seen data assigned to train"),
    ("synth.held_out", "5", "attack type absent from train (0 for none)"),
    ("synth.min_len", "5600", "shortest utterance in samples"),
    ("synth.max_len", "8000", "longest utterance in samples"),
    ("synth.seed", "0", "corpus seed"),
];

const PATH_KEYS: &[&str] = &["run.dir", "data.audio_dir", "data.train_protocol", "data.dev_protocol", "data.eval_protocol"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        RunConfig { values, base: PathBuf::from(".") }
    }
}

fn parse_lines(text: &str, origin: &Path, stack: &mut Vec<PathBuf>, out: &mut Vec<(String, String)>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", origin.display(), i + 1);
        if let Some(rest) = line.strip_prefix("include ") {
            let dir = origin.parent().unwrap_or(Path::new("."));
            read_file(&dir.join(rest.trim()), stack, out)?;
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("{}: expected key = value", at())))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(())
}

fn read_file(path: &Path, stack: &mut Vec<PathBuf>, out: &mut Vec<(String, String)>) -> Result<()> {
    let canon = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    if stack.contains(&canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    stack.push(canon);
    parse_lines(&text, path, stack, out)?;
    stack.pop();
    Ok(())
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s.trim())).collect()
}

impl RunConfig {
    /// Defaults overridden by `text`; includes resolve relative to `origin`.
    pub fn from_str_at(text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut stack = Vec::new();
        if let Ok(c) = fs::canonicalize(origin) {
            stack.push(c);
        }
        parse_lines(text, origin, &mut stack, &mut pairs)?;
        let mut cfg = RunConfig::default();
        cfg.base = origin.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_at(&text, path)
    }

    /// Overrides one key; unknown keys are rejected. Values are checked by
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => *slot = value.to_string(),
            None => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        parse(key, self.get(key))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        parse_bool(key, self.get(key))
    }

    /// A path key resolved against the config file's directory; `None` if empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    /// `run.dir`, unless `RUN_DIR` is set.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.path("run.dir").unwrap_or_else(|| PathBuf::from("runs/default")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder()?;
        self.margin()?.validate()?;
        self.step()?;
        self.optim()?;
        self.seeds()?;
        self.synth()?.validate()?;
        self.tdcf()?.validate()?;
        self.attack_deltas()?;
        self.meta_k()?;
        self.num::<usize>("eval.hist_bins")?;
        self.num::<usize>("attack.n_audio")?;
        self.policy("data.train_policy")?;
        self.policy("data.eval_policy")?;
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line;
    /// path keys are written resolved.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            match (PATH_KEYS.contains(&k.as_str()), self.path(k)) {
                (true, Some(p)) => {
                    let p = fs::canonicalize(&p).unwrap_or(p);
                    let _ = writeln!(s, "{k} = {}", p.display());
                }
                _ => {
                    let _ = writeln!(s, "{k} = {v}");
                }
            }
        }
        s
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = parse_list("run.seeds", self.get("run.seeds"))?;
        if seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        Ok(seeds)
    }

    pub fn policy(&self, key: &str) -> Result<SegmentPolicy> {
        SegmentPolicy::parse(self.get(key))
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            input_len: self.num("encoder.input_len")?,
            num_filters: self.num("encoder.num_filters")?,
            kernel_len: self.num("encoder.kernel_len")?,
            magnitude: match self.get("encoder.magnitude") {
                "signed" => Magnitude::Signed,
                "abs" => Magnitude::Abs,
                v => return Err(Error::Config(format!("encoder.magnitude: expected signed|abs, got '{v}'"))),
            },
            block_channels: parse_list("encoder.channels", self.get("encoder.channels"))?,
            pool_time: self.num("encoder.pool_time")?,
            gru_hidden: self.num("encoder.gru_hidden")?,
            embed_dim: self.num("encoder.embed_dim")?,
            attention: AttentionKind::parse(self.get("encoder.attention"))?,
            attention_position: match self.get("encoder.attention_position") {
                "auto" => None,
                v => Some(AttentionPosition::parse(v)?),
            },
            se_reduction: self.num("encoder.se_reduction")?,
            cbam_reduction: self.num("encoder.cbam_reduction")?,
            cbam_kernel: self.num("encoder.cbam_kernel")?,
            simam_lambda: self.num("encoder.simam_lambda")?,
            simam_stats: match self.get("encoder.simam_stats") {
                "leave_one_out" => SimamStats::LeaveOneOut,
                "pooled" => SimamStats::Pooled,
                v => return Err(Error::Config(format!("encoder.simam_stats: expected leave_one_out|pooled, got '{v}'"))),
            },
            bn_momentum: self.num("encoder.bn_momentum")?,
            bn_eps: self.num("encoder.bn_eps")?,
        };
        cfg.shape_trace().map_err(|e| Error::Config(format!("encoder: {e}")))?;
        Ok(cfg)
    }

    pub fn margin(&self) -> Result<MarginConfig> {
        Ok(MarginConfig {
            variant: LossVariant::parse(self.get("loss.variant"))?,
            scale: self.num("loss.scale")?,
            margin: self.num("loss.margin")?,
            margin_spoof: self.num("loss.margin_spoof")?,
            margin_genuine: self.num("loss.margin_genuine")?,
            weight_spoof: self.num("loss.weight_spoof")?,
            weight_genuine: self.num("loss.weight_genuine")?,
        })
    }

    pub fn attack(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            enabled: self.flag("adv.enabled")?,
            delta: self.num("adv.delta")?,
            alpha: self.num("adv.alpha")?,
            steps: self.num("adv.steps")?,
            target: match self.get("adv.target") {
                "ce" => AttackTarget::WeightedCe,
                "margin" => AttackTarget::Margin,
                v => return Err(Error::Config(format!("adv.target: expected ce|margin, got '{v}'"))),
            },
            update_aux_stats: self.flag("adv.update_aux_stats")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn step(&self) -> Result<StepConfig> {
        Ok(StepConfig {
            meta_enabled: self.flag("meta.enabled")?,
            fusion_lambda: self.num("loss.fusion_lambda")?,
            attack: self.attack()?,
        })
    }

    pub fn meta_k(&self) -> Result<usize> {
        let k: usize = self.num("meta.K")?;
        if k == 0 {
            return Err(Error::Config("meta.K must be positive".into()));
        }
        Ok(k)
    }

    pub fn optim(&self) -> Result<OptimConfig> {
        let cfg = OptimConfig {
            lr: self.num("optim.lr")?,
            lr_min: self.num("optim.lr_min")?,
            cosine: match self.get("optim.schedule") {
                "constant" => false,
                "cosine" => true,
                v => return Err(Error::Config(format!("optim.schedule: expected constant|cosine, got '{v}'"))),
            },
            epochs: self.num("optim.epochs")?,
            batch: self.num("optim.batch")?,
        };
        if !(cfg.lr > 0.0) || cfg.batch == 0 || cfg.epochs == 0 {
            return Err(Error::Config("optim.lr, optim.batch and optim.epochs must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn tdcf(&self) -> Result<TdcfCostModel> {
        Ok(TdcfCostModel {
            p_tar: self.num("tdcf.p_tar")?,
            p_non: self.num("tdcf.p_non")?,
            p_spoof: self.num("tdcf.p_spoof")?,
            c_miss_asv: self.num("tdcf.c_miss_asv")?,
            c_fa_asv: self.num("tdcf.c_fa_asv")?,
            c_miss_cm: self.num("tdcf.c_miss_cm")?,
            c_fa_cm: self.num("tdcf.c_fa_cm")?,
            p_miss_asv: self.num("tdcf.p_miss_asv")?,
            p_fa_asv: self.num("tdcf.p_fa_asv")?,
            p_miss_spoof_asv: self.num("tdcf.p_miss_spoof_asv")?,
        })
    }

    pub fn attack_deltas(&self) -> Result<Vec<f64>> {
        let d: Vec<f64> = parse_list("attack.deltas", self.get("attack.deltas"))?;
        if d.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("attack.deltas must be non-negative".into()));
        }
        Ok(d)
    }

    pub fn hist_bins(&self) -> Result<usize> {
        self.num("eval.hist_bins")
    }

    pub fn n_audio(&self) -> Result<usize> {
        self.num("attack.n_audio")
    }

    pub fn synth(&self) -> Result<SynthCorpusConfig> {
        Ok(SynthCorpusConfig {
            n_attack_types: self.num("synth.attack_types")?,
            utts_per_type: self.num("synth.utts_per_type")?,
            bonafide: self.num("synth.bonafide")?,
            train_fraction: self.num("synth.train_fraction")?,
            held_out: self.num("synth.held_out")?,
            min_len: self.num("synth.min_len")?,
            max_len: self.num("synth.max_len")?,
            seed: self.num("synth.seed")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub cosine: bool,
    pub epochs: usize,
    pub batch: usize,
}
