//! Protocol files, 16-bit PCM audio, fixed-length segments and the
//! deterministic synthetic spoofing corpus.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{BONAFIDE, SPOOF};

pub const SAMPLE_RATE_HZ: u32 = 16000;
const PCM_SCALE: f64 = 32768.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn name(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }

    pub fn label(self) -> usize {
        match self {
            Key::Bonafide => BONAFIDE,
            Key::Spoof => SPOOF,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker: String,
    pub utt_id: String,
    /// `-` for bonafide, otherwise the attack id.
    pub system_id: String,
    pub key: Key,
}

impl ProtocolEntry {
    pub fn attack(&self) -> Option<&str> {
        (self.key == Key::Spoof).then_some(self.system_id.as_str())
    }

    pub fn label(&self) -> usize {
        self.key.label()
    }
}

/// Parses `SPEAKER UTTID - SYSTEMID KEY` lines; blank lines are skipped.
pub fn parse_protocol_str(text: &str, path: &Path) -> Result<Vec<ProtocolEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: String| Error::Protocol { path: path.to_path_buf(), line: i + 1, reason };
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let key = match f[4] {
            "bonafide" => Key::Bonafide,
            "spoof" => Key::Spoof,
            other => return Err(bad(format!("unknown key '{other}'"))),
        };
        if (key == Key::Bonafide) != (f[3] == "-") {
            return Err(bad(format!("system id '{}' inconsistent with key {}", f[3], key.name())));
        }
        if !seen.insert(f[1].to_string()) {
            return Err(bad(format!("duplicate utterance id {}", f[1])));
        }
        out.push(ProtocolEntry { speaker: f[0].into(), utt_id: f[1].into(), system_id: f[3].into(), key });
    }
    Ok(out)
}

pub fn parse_protocol(path: &Path) -> Result<Vec<ProtocolEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, path)
}

pub fn format_protocol(entries: &[ProtocolEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{} {} - {} {}", e.speaker, e.utt_id, e.system_id, e.key.name());
    }
    s
}

pub fn write_protocol(path: &Path, entries: &[ProtocolEntry]) -> Result<()> {
    fs::write(path, format_protocol(entries)).map_err(|e| Error::io(path, e))
}

/// Entry positions grouped by attack id; bonafide entries are omitted.
pub fn attack_index(entries: &[ProtocolEntry]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(a) = e.attack() {
            map.entry(a.to_string()).or_default().push(i);
        }
    }
    map
}

/// Reads a mono 16 kHz 16-bit PCM file into samples in [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let audio = |source| Error::Audio { path: path.to_path_buf(), source };
    let mut r = hound::WavReader::open(path).map_err(audio)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE_HZ || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Data(format!("{}: expected mono 16 kHz 16-bit PCM, got {spec:?}", path.display())));
    }
    r.samples::<i16>().map(|s| s.map(|v| f64::from(v) / PCM_SCALE).map_err(audio)).collect()
}

/// Writes samples (clipped to the 16-bit range) as mono 16 kHz PCM.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let audio = |source| Error::Audio { path: path.to_path_buf(), source };
    let spec = hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE_HZ, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(audio)?;
    for &s in samples {
        w.write_sample(to_pcm(s)).map_err(audio)?;
    }
    w.finalize().map_err(audio)
}

fn to_pcm(s: f64) -> i16 {
    (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentPolicy {
    /// Uniform random window (training).
    RandomCrop,
    /// Middle window (evaluation).
    Center,
    /// Leading window.
    RepeatPad,
}

impl SegmentPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random_crop" => Ok(SegmentPolicy::RandomCrop),
            "center" => Ok(SegmentPolicy::Center),
            "repeat_pad" => Ok(SegmentPolicy::RepeatPad),
            _ => Err(Error::Config(format!("unknown segment policy '{s}' (random_crop|center|repeat_pad)"))),
        }
    }
}

/// Exactly `target` samples: shorter inputs are tiled first, then a window
/// is cut according to `policy`.
pub fn load_segment<R: Rng + ?Sized>(wave: &[f64], target: usize, policy: SegmentPolicy, rng: &mut R) -> Result<Vec<f64>> {
    if wave.is_empty() {
        return Err(Error::Data("cannot segment an empty waveform".into()));
    }
    if target == 0 {
        return Err(Error::invalid("segment length must be positive"));
    }
    if wave.len() < target {
        return Ok(wave.iter().copied().cycle().take(target).collect());
    }
    let slack = wave.len() - target;
    let start = match policy {
        SegmentPolicy::RandomCrop => rng.gen_range(0..=slack),
        SegmentPolicy::Center => slack / 2,
        SegmentPolicy::RepeatPad => 0,
    };
    Ok(wave[start..start + target].to_vec())
}

/// Audio of every entry, read from `<dir>/<utt id>.wav`.
pub fn load_audio(entries: &[ProtocolEntry], dir: &Path) -> Result<Vec<Vec<f64>>> {
    entries.iter().map(|e| read_wav(&audio_path(dir, &e.utt_id))).collect()
}

pub fn audio_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.wav"))
}

/// One CSV row per utterance: id, embedding values, key.
pub fn dump_embeddings(path: &Path, entries: &[ProtocolEntry], embeddings: &[Vec<f64>]) -> Result<()> {
    if entries.len() != embeddings.len() {
        return Err(Error::Data(format!("{} entries but {} embeddings", entries.len(), embeddings.len())));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut s = String::from("utt_id");
    for i in 0..dim {
        let _ = write!(s, ",e{i}");
    }
    s.push_str(",key\n");
    for (e, v) in entries.iter().zip(embeddings) {
        s.push_str(&e.utt_id);
        for x in v {
            let _ = write!(s, ",{x:e}");
        }
        let _ = writeln!(s, ",{}", e.key.name());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Artefact applied by one synthetic attack type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artefact {
    LowpassNotch,
    Quantize4Bit,
    Hum50Hz,
    HardClip,
    BandNoise,
    RingMod,
}

impl Artefact {
    pub const ALL: [Artefact; 6] =
        [Artefact::LowpassNotch, Artefact::Quantize4Bit, Artefact::Hum50Hz, Artefact::HardClip, Artefact::BandNoise, Artefact::RingMod];

    pub fn name(self) -> &'static str {
        match self {
            Artefact::LowpassNotch => "lowpass_notch",
            Artefact::Quantize4Bit => "quantize_4bit",
            Artefact::Hum50Hz => "hum_50hz",
            Artefact::HardClip => "hard_clip",
            Artefact::BandNoise => "band_noise_6k_8k",
            Artefact::RingMod => "ring_mod",
        }
    }

    pub fn apply<R: Rng + ?Sized>(self, base: &[f64], rng: &mut R) -> Vec<f64> {
        let sr = f64::from(SAMPLE_RATE_HZ);
        match self {
            Artefact::LowpassNotch => {
                let lp = Biquad::lowpass(rng.gen_range(600.0..1000.0), 0.707);
                let notch = Biquad::notch(rng.gen_range(300.0..600.0), 2.0);
                notch.run(&lp.run(&lp.run(base)))
            }
            Artefact::Quantize4Bit => base.iter().map(|&x| quantize_4bit(x)).collect(),
            Artefact::Hum50Hz => {
                let amp = rng.gen_range(0.1..0.2);
                let phase = rng.gen_range(0.0..2.0 * PI);
                base.iter()
                    .enumerate()
                    .map(|(n, &x)| {
                        let t = 2.0 * PI * 50.0 * n as f64 / sr + phase;
                        x + amp * (t.sin() + 0.5 * (2.0 * t).sin() + 0.25 * (3.0 * t).sin())
                    })
                    .collect()
            }
            Artefact::HardClip => {
                let peak = base.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let c = peak * rng.gen_range(0.08..0.15);
                base.iter().map(|&x| x.clamp(-c, c)).collect()
            }
            Artefact::BandNoise => {
                let amp = rng.gen_range(0.15..0.25);
                let noise: Vec<f64> = (0..base.len()).map(|_| StandardNormal.sample(rng)).collect();
                let bp = Biquad::bandpass(7000.0, 3.5);
                let band = bp.run(&bp.run(&noise));
                base.iter().zip(&band).map(|(&x, &b)| x + amp * b).collect()
            }
            Artefact::RingMod => {
                let fc = rng.gen_range(300.0..700.0);
                base.iter().enumerate().map(|(n, &x)| x * (2.0 * PI * fc * n as f64 / sr).cos()).collect()
            }
        }
    }
}

/// Nearest point of the `k / 8` lattice, `k` in `-8..=7`.
pub fn quantize_4bit(x: f64) -> f64 {
    (x * 8.0).round().clamp(-8.0, 7.0) / 8.0
}

/// Direct-form-I biquad from the audio-EQ cookbook.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Biquad { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [a1 / a0, a2 / a0] }
    }

    fn omega(f: f64, q: f64) -> (f64, f64) {
        let w = 2.0 * PI * f / f64::from(SAMPLE_RATE_HZ);
        (w.cos(), w.sin() / (2.0 * q))
    }

    fn lowpass(f: f64, q: f64) -> Self {
        let (c, al) = Self::omega(f, q);
        Self::from_raw([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], 1.0 + al, -2.0 * c, 1.0 - al)
    }

    fn notch(f: f64, q: f64) -> Self {
        let (c, al) = Self::omega(f, q);
        Self::from_raw([1.0, -2.0 * c, 1.0], 1.0 + al, -2.0 * c, 1.0 - al)
    }

    fn bandpass(f: f64, q: f64) -> Self {
        let (c, al) = Self::omega(f, q);
        Self::from_raw([al, 0.0, -al], 1.0 + al, -2.0 * c, 1.0 - al)
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                (x2, x1, y2, y1) = (x1, x0, y1, y0);
                y0
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpusConfig {
    pub n_attack_types: usize,
    pub utts_per_type: usize,
    pub bonafide: usize,
    /// Share of bonafide and seen-attack utterances assigned to train.
    pub train_fraction: f64,
    /// Attack type (1-based, `A01`..) kept out of train.
    pub held_out: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            n_attack_types: 6,
            utts_per_type: 40,
            bonafide: 120,
            train_fraction: 0.75,
            held_out: 5,
            min_len: 5600,
            max_len: 8000,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=Artefact::ALL.len()).contains(&self.n_attack_types) {
            return bad(format!("synth.attack_types must be in 1..=6, got {}", self.n_attack_types));
        }
        if self.held_out > self.n_attack_types {
            return bad(format!("synth.held_out {} exceeds {} attack types", self.held_out, self.n_attack_types));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("synth.train_fraction must lie in [0, 1], got {}", self.train_fraction));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid duration range {}..={}", self.min_len, self.max_len));
        }
        Ok(())
    }

    pub fn attack_id(i: usize) -> String {
        format!("A{:02}", i + 1)
    }

    /// Held-out attack id, if any.
    pub fn held_out_id(&self) -> Option<String> {
        (self.held_out > 0).then(|| Self::attack_id(self.held_out - 1))
    }
}

/// Harmonic complex with a random 150–300 Hz fundamental, 3–5 partials and
/// a faint pink-noise floor.
pub fn bonafide_base<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE_HZ);
    let f0 = rng.gen_range(150.0..250.0);
    let top = (4000.0 / f0) as usize;
    let partials: Vec<(f64, f64, f64)> = (1..=top)
        .map(|k| (k as f64 * f0, 1.0 / k as f64, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let norm: f64 = partials.iter().map(|p| p.1).sum();
    let level = rng.gen_range(0.3..0.6) / norm;
    let vibrato = rng.gen_range(2.0..6.0);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let env = 0.75 + 0.25 * (2.0 * PI * vibrato * t).sin();
            let tone: f64 = partials.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.099_046;
            b1 = 0.963 * b1 + w * 0.296_516_4;
            b2 = 0.57 * b2 + w * 1.052_691_3;
            let pink = (b0 + b1 + b2 + w * 0.1848) * 0.01;
            level * env * tone + pink
        })
        .collect()
}

/// One synthetic utterance; attack type `None` is bonafide.
pub fn synth_utterance(seed: u64, index: usize, attack: Option<usize>, min_len: usize, max_len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let len = rng.gen_range(min_len..=max_len);
    let base = bonafide_base(len, &mut rng);
    let out = match attack {
        None => base,
        Some(a) => Artefact::ALL[a].apply(&base, &mut rng),
    };
    out.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<ProtocolEntry>,
    pub eval: Vec<ProtocolEntry>,
    pub audio_dir: PathBuf,
    pub train_protocol: PathBuf,
    pub eval_protocol: PathBuf,
}

/// Writes `audio/*.wav`, `train.txt` and `eval.txt` under `out`.
pub fn gen_synthetic_corpus(cfg: &SynthCorpusConfig, out: &Path) -> Result<SynthCorpus> {
    cfg.validate()?;
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    let mut index = 0;
    let groups = std::iter::once((None, cfg.bonafide)).chain((0..cfg.n_attack_types).map(|a| (Some(a), cfg.utts_per_type)));
    for (attack, count) in groups {
        let held_out = attack.is_some_and(|a| a + 1 == cfg.held_out);
        let n_train = if held_out { 0 } else { (count as f64 * cfg.train_fraction).round() as usize };
        let mut order: Vec<usize> = (0..count).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut split_rng);
        for (j, &slot) in order.iter().enumerate() {
            let utt_id = format!("SYN_{:05}", index + slot);
            let samples = synth_utterance(cfg.seed, index + slot, attack, cfg.min_len, cfg.max_len);
            write_wav(&audio_path(&audio_dir, &utt_id), &samples)?;
            let entry = ProtocolEntry {
                speaker: format!("SPK_{:02}", (index + slot) % 12),
                utt_id,
                system_id: attack.map_or_else(|| "-".to_string(), SynthCorpusConfig::attack_id),
                key: if attack.is_some() { Key::Spoof } else { Key::Bonafide },
            };
            if j < n_train {
                train.push(entry);
            } else {
                eval.push(entry);
            }
        }
        index += count;
    }
    let by_id = |a: &ProtocolEntry, b: &ProtocolEntry| a.utt_id.cmp(&b.utt_id);
    train.sort_by(by_id);
    eval.sort_by(by_id);
    let train_protocol = out.join("train.txt");
    let eval_protocol = out.join("eval.txt");
    write_protocol(&train_protocol, &train)?;
    write_protocol(&eval_protocol, &eval)?;
    Ok(SynthCorpus { train, eval, audio_dir, train_protocol, eval_protocol })
}
