//! Train / evaluate / attack / gen-synth workflows over a [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::adversary::{disentangled_step, pgd_attack, EvalSurface, StepBatch, StepLosses};
use crate::autodiff::{cosine_lr, AdamConfig, AdamState, Bank, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, load_segment, ProtocolEntry, SegmentPolicy, SynthCorpus};
use crate::error::{Error, Result};
use crate::meta::{episodes_per_epoch, sample_episode, EpisodePool};
use crate::metrics::{self, ScoreRecord, ScoreSet, SweepPoint, TdcfCostModel};
use crate::model::{Model, EVAL_CHUNK};
use crate::runtime::tune_allocator;

pub const LOSS_CSV_HEADER: &str = "step,epoch,L_W,L_M,L_F,L_W_adv,total,lr";
pub const SCORES_FILE: &str = "scores.txt";
pub const REPORT_FILE: &str = "report.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const DET_FILE: &str = "det.csv";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else if v < 0.0 {
        json!("-inf")
    } else {
        Value::Null
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialise");
    s.push('\n');
    s
}

/// Protocol entries with their full-length audio.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ProtocolEntry>,
    pub audio: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn load(protocol: &Path, audio_dir: &Path) -> Result<Self> {
        let entries = data::parse_protocol(protocol)?;
        let audio = data::load_audio(&entries, audio_dir)?;
        Ok(Dataset { entries, audio })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(indices.len(), len)` segments.
    pub fn segments(&self, indices: &[usize], len: usize, policy: SegmentPolicy, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(load_segment(&self.audio[i], len, policy, rng)?);
        }
        Tensor::new(vec![indices.len(), len], data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.entries[i].label()).collect()
    }
}

fn required(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.path(key).ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn optional_dataset(cfg: &RunConfig, key: &str) -> Result<Option<Dataset>> {
    match cfg.path(key) {
        Some(p) => Ok(Some(Dataset::load(&p, &required(cfg, "data.audio_dir")?)?)),
        None => Ok(None),
    }
}

/// Scores every utterance of `ds` in eval mode.
pub fn score_dataset(model: &Model, ds: &Dataset, policy: SegmentPolicy) -> Result<ScoreSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let waves = ds.segments(&idx, model.input_len(), policy, &mut rng)?;
    let scores = model.score(&waves)?;
    ScoreSet::new(
        ds.entries
            .iter()
            .zip(scores)
            .map(|(e, score)| ScoreRecord { utt_id: e.utt_id.clone(), score, bonafide: e.label() == crate::losses::BONAFIDE })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub tdcf_threshold: f64,
    /// Bonafide trials against the spoofs of one attack id.
    pub per_attack_eer: BTreeMap<String, f64>,
    pub n_bonafide: usize,
    pub n_spoof: usize,
    pub cost_model: TdcfCostModel,
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        let cm = &self.cost_model;
        json!({
            "eer": self.eer,
            "eer_threshold": json_f64(self.eer_threshold),
            "min_tdcf": self.min_tdcf,
            "tdcf_threshold": json_f64(self.tdcf_threshold),
            "per_attack_eer": self.per_attack_eer,
            "n_bonafide": self.n_bonafide,
            "n_spoof": self.n_spoof,
            "cost_model": serde_json::to_value(cm).expect("cost model serialises"),
        })
    }
}

pub fn evaluate_scores(scores: &ScoreSet, entries: &[ProtocolEntry], cm: &TdcfCostModel) -> Result<EvalReport> {
    let (eer, eer_threshold) = metrics::compute_eer(scores)?;
    let (min_tdcf, tdcf_threshold) = metrics::compute_min_tdcf(scores, cm)?;
    let mut per_attack_eer = BTreeMap::new();
    for (attack, _) in data::attack_index(entries) {
        let subset: Vec<ScoreRecord> = scores
            .records
            .iter()
            .zip(entries)
            .filter(|(_, e)| e.attack().is_none_or(|a| a == attack))
            .map(|(r, _)| r.clone())
            .collect();
        per_attack_eer.insert(attack, metrics::compute_eer(&ScoreSet::new(subset)?)?.0);
    }
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_tdcf,
        tdcf_threshold,
        per_attack_eer,
        n_bonafide: scores.records.iter().filter(|r| r.bonafide).count(),
        n_spoof: scores.records.iter().filter(|r| !r.bonafide).count(),
        cost_model: *cm,
    })
}

fn threshold_text(t: f64) -> String {
    if t.is_finite() {
        format!("{t}")
    } else if t > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Writes the score file, report, histogram and DET CSVs into `dir`.
pub fn write_evaluation(dir: &Path, scores: &ScoreSet, report: &EvalReport, bins: usize) -> Result<()> {
    mkdir(dir)?;
    let mut s = String::new();
    for r in &scores.records {
        let _ = writeln!(s, "{} {}", r.utt_id, r.score);
    }
    write(&dir.join(SCORES_FILE), s)?;
    write(&dir.join(REPORT_FILE), pretty(&report.to_json()))?;

    let h = metrics::score_histogram(scores, bins)?;
    let mut s = String::from("bin,lower,upper,bonafide,spoof\n");
    for i in 0..bins {
        let _ = writeln!(s, "{i},{},{},{},{}", h.edges[i], h.edges[i + 1], h.bonafide[i], h.spoof[i]);
    }
    write(&dir.join(HISTOGRAM_FILE), s)?;

    let mut s = String::from("threshold,far,frr\n");
    for SweepPoint { threshold, far, frr } in metrics::det_points(scores)? {
        let _ = writeln!(s, "{},{far},{frr}", threshold_text(threshold));
    }
    write(&dir.join(DET_FILE), s)
}

fn learning_rate(cfg: &crate::config::OptimConfig, epoch: usize) -> f64 {
    if cfg.cosine {
        cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
    } else {
        cfg.lr
    }
}

/// Batches of one epoch: `(indices, support size)`.
fn epoch_batches(cfg: &RunConfig, train: &Dataset, pool: &EpisodePool, rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<usize>, Option<usize>)>> {
    if cfg.step()?.meta_enabled {
        let k = cfg.meta_k()?;
        (0..episodes_per_epoch(train.len(), pool.num_attacks(), k))
            .map(|_| {
                let ep = sample_episode(pool, k, rng)?;
                Ok((ep.indices(), Some(ep.support.len())))
            })
            .collect()
    } else {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        Ok(order.chunks(cfg.optim()?.batch).map(|c| (c.to_vec(), None)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_dev_eer: Option<f64>,
    pub final_losses: StepLosses,
    pub eval: Option<EvalReport>,
}

impl TrainOutcome {
    fn to_json(&self) -> Value {
        json!({
            "seed": self.seed,
            "run_dir": self.run_dir.display().to_string(),
            "best_epoch": self.best_epoch,
            "best_dev_eer": self.best_dev_eer,
            "eval": self.eval.as_ref().map(EvalReport::to_json),
        })
    }
}

/// One training run with a single seed; writes the resolved config, the
/// loss CSV, `last.ckpt`, `best.ckpt` and (if configured) an evaluation.
pub fn train_seed(cfg: &RunConfig, seed: u64, run_dir: &Path) -> Result<TrainOutcome> {
    tune_allocator();
    mkdir(run_dir)?;
    let mut cfg = cfg.clone();
    cfg.set("run.seeds", &seed.to_string())?;
    let resolved = cfg.resolved_text();
    write(&run_dir.join("config.resolved"), &resolved)?;

    let audio_dir = required(&cfg, "data.audio_dir")?;
    let train = Dataset::load(&required(&cfg, "data.train_protocol")?, &audio_dir)?;
    if train.is_empty() {
        return Err(Error::Data("training protocol is empty".into()));
    }
    let dev = optional_dataset(&cfg, "data.dev_protocol")?;
    let eval = optional_dataset(&cfg, "data.eval_protocol")?;
    let optim = cfg.optim()?;
    let step_cfg = cfg.step()?;
    let (train_policy, eval_policy) = (cfg.policy("data.train_policy")?, cfg.policy("data.eval_policy")?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(cfg.encoder()?, cfg.margin()?, &mut rng)?;
    let mut adam = AdamState::new(&model.store, AdamConfig::default());
    let pool = EpisodePool::new(train.entries.iter().enumerate().map(|(i, e)| (i, e.attack())));
    info!("seed {seed}: {} train utterances, {} parameters", train.len(), model.store.numel());

    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let (mut step, mut best_epoch, mut best_dev_eer) = (0usize, 0usize, None::<f64>);
    let mut last = StepLosses::default();
    for epoch in 0..optim.epochs {
        let lr = learning_rate(&optim, epoch);
        let mut epoch_total = 0.0;
        let batches = epoch_batches(&cfg, &train, &pool, &mut rng)?;
        let n_batches = batches.len();
        for (idx, n_support) in batches {
            let waves = train.segments(&idx, model.input_len(), train_policy, &mut rng)?;
            let batch = StepBatch { waves, labels: train.labels(&idx), n_support };
            last = disentangled_step(&mut model, &batch, &step_cfg)?;
            adam.step(&mut model.store, lr)?;
            step += 1;
            epoch_total += last.total;
            let _ = writeln!(csv, "{step},{},{},{},{},{},{},{lr}", epoch + 1, last.l_w, last.l_m, last.l_f, last.l_w_adv, last.total);
        }
        write(&run_dir.join("loss.csv"), &csv)?;

        let dev_eer = match &dev {
            Some(d) => Some(metrics::compute_eer(&score_dataset(&model, d, eval_policy)?)?.0),
            None => None,
        };
        let ckpt = Checkpoint::capture(&model, Some(&adam), &resolved, (epoch + 1) as u64, dev_eer);
        ckpt.save(&run_dir.join("last.ckpt"))?;
        let improved = match (dev_eer, best_dev_eer) {
            (Some(e), Some(b)) => e < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best_epoch = epoch + 1;
            best_dev_eer = dev_eer;
            ckpt.save(&run_dir.join("best.ckpt"))?;
        }
        info!(
            "seed {seed} epoch {}/{}: mean total loss {:.5}{}",
            epoch + 1,
            optim.epochs,
            epoch_total / n_batches.max(1) as f64,
            dev_eer.map_or(String::new(), |e| format!(", dev EER {:.4}", e))
        );
    }

    let eval_report = match &eval {
        Some(ds) => {
            let (_, best) = Checkpoint::load(&run_dir.join("best.ckpt"))?.restore()?;
            let scores = score_dataset(&best, ds, eval_policy)?;
            let report = evaluate_scores(&scores, &ds.entries, &cfg.tdcf()?)?;
            write_evaluation(&run_dir.join("eval"), &scores, &report, cfg.hist_bins()?)?;
            info!("seed {seed}: eval EER {:.4}, min t-DCF {:.4}", report.eer, report.min_tdcf);
            Some(report)
        }
        None => None,
    };
    let outcome = TrainOutcome { seed, run_dir: run_dir.to_path_buf(), best_epoch, best_dev_eer, final_losses: last, eval: eval_report };
    write(&run_dir.join("summary.json"), pretty(&outcome.to_json()))?;
    Ok(outcome)
}

/// Runs every seed of `run.seeds` under `out/seed_<n>` and writes
/// `summary.json` with per-seed metrics and the best-of-seeds pick.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<Vec<TrainOutcome>> {
    mkdir(out)?;
    write(&out.join("config.resolved"), cfg.resolved_text())?;
    let mut outcomes = Vec::new();
    for seed in cfg.seeds()? {
        outcomes.push(train_seed(cfg, seed, &out.join(format!("seed_{seed}")))?);
    }
    let key = |o: &TrainOutcome| o.eval.as_ref().map(|r| r.eer).or(o.best_dev_eer);
    let best = outcomes
        .iter()
        .filter(|o| key(o).is_some())
        .min_by(|a, b| key(a).unwrap_or(f64::INFINITY).total_cmp(&key(b).unwrap_or(f64::INFINITY)));
    let summary = json!({
        "seeds": outcomes.iter().map(TrainOutcome::to_json).collect::<Vec<_>>(),
        "best_of": best.map(|o| json!({
            "seed": o.seed,
            "selected_by": if o.eval.is_some() { "eval pooled EER" } else { "dev EER" },
            "eer": key(o),
        })),
    });
    write(&out.join("summary.json"), pretty(&summary))?;
    Ok(outcomes)
}

/// Scores `protocol` with a checkpoint and writes the evaluation files.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, protocol: &Path, out: &Path) -> Result<EvalReport> {
    tune_allocator();
    let (_, model) = Checkpoint::load(checkpoint)?.restore()?;
    let before = model.encoder.bank_fingerprint(Bank::Auxiliary);
    let ds = Dataset::load(protocol, &required(cfg, "data.audio_dir")?)?;
    let scores = score_dataset(&model, &ds, cfg.policy("data.eval_policy")?)?;
    if model.encoder.bank_fingerprint(Bank::Auxiliary) != before {
        return Err(Error::Checkpoint("evaluation modified auxiliary batch-norm statistics".into()));
    }
    let report = evaluate_scores(&scores, &ds.entries, &cfg.tdcf()?)?;
    write_evaluation(out, &scores, &report, cfg.hist_bins()?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    pub delta: f64,
    pub alpha: f64,
    pub accuracy: f64,
    pub max_perturbation: f64,
}

/// PGD sweep over `attack.deltas`; the step size scales with the budget
/// as `alpha * delta / adv.delta`.
pub fn attack(cfg: &RunConfig, checkpoint: &Path, protocol: &Path, out: &Path) -> Result<Vec<AttackRow>> {
    tune_allocator();
    let (_, model) = Checkpoint::load(checkpoint)?.restore()?;
    let ds = Dataset::load(protocol, &required(cfg, "data.audio_dir")?)?;
    let base = cfg.attack()?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clean = ds.segments(&idx, model.input_len(), cfg.policy("data.eval_policy")?, &mut rng)?;
    let labels = ds.labels(&idx);
    let len = model.input_len();
    let n_audio = cfg.n_audio()?;
    mkdir(out)?;
    let mut rows = Vec::new();
    for delta in cfg.attack_deltas()? {
        let alpha = if base.delta > 0.0 { base.alpha * delta / base.delta } else { 0.0 };
        let acfg = crate::adversary::AttackConfig { enabled: true, delta, alpha, ..base };
        let mut adv_all = Vec::with_capacity(clean.numel());
        for start in (0..idx.len()).step_by(EVAL_CHUNK) {
            let rows = EVAL_CHUNK.min(idx.len() - start);
            let x = Tensor::new(vec![rows, len], clean.data()[start * len..(start + rows) * len].to_vec())?;
            let mut surface = EvalSurface::new(&model, base.target);
            adv_all.extend(pgd_attack(&mut surface, &x, &labels[start..start + rows], &acfg)?.into_data());
        }
        let adv = Tensor::new(vec![idx.len(), len], adv_all)?;
        let scores = model.score(&adv)?;
        let correct = scores.iter().zip(&labels).filter(|(&s, &y)| (s >= 0.0) == (y == crate::losses::BONAFIDE)).count();
        let max_perturbation = adv.max_abs_diff(&clean);
        if delta > 0.0 && n_audio > 0 {
            let dir = out.join(format!("adv_delta_{delta}"));
            mkdir(&dir)?;
            for (i, e) in ds.entries.iter().take(n_audio).enumerate() {
                data::write_wav(&data::audio_path(&dir, &e.utt_id), &adv.data()[i * len..(i + 1) * len])?;
            }
        }
        info!("delta {delta}: accuracy {:.4}, max perturbation {max_perturbation:e}", correct as f64 / idx.len() as f64);
        rows.push(AttackRow { delta, alpha, accuracy: correct as f64 / idx.len().max(1) as f64, max_perturbation });
    }
    let mut csv = String::from("delta,alpha,accuracy,max_perturbation\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.delta, r.alpha, r.accuracy, r.max_perturbation);
    }
    write(&out.join("attack.csv"), csv)?;
    Ok(rows)
}

/// Synthetic corpus from the `synth.*` keys.
pub fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<SynthCorpus> {
    let corpus = data::gen_synthetic_corpus(&cfg.synth()?, out)?;
    info!("wrote {} train and {} eval utterances to {}", corpus.train.len(), corpus.eval.len(), out.display());
    Ok(corpus)
}

/// Embedding dump of every entry of `protocol`.
pub fn dump_embeddings(cfg: &RunConfig, checkpoint: &Path, protocol: &Path, out: &Path) -> Result<()> {
    let (_, model) = Checkpoint::load(checkpoint)?.restore()?;
    let ds = Dataset::load(protocol, &required(cfg, "data.audio_dir")?)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let waves = ds.segments(&idx, model.input_len(), cfg.policy("data.eval_policy")?, &mut ChaCha8Rng::seed_from_u64(0))?;
    data::dump_embeddings(out, &ds.entries, &model.embed(&waves)?)
}
