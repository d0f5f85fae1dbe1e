//! Fixed sinc band-pass filterbank turning raw audio into a single-channel
//! time-frequency map.

use std::f64::consts::PI;

use crate::autodiff::{Binder, BnContext, DualBatchNorm, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_NUM_FILTERS: usize = 70;
pub const DEFAULT_KERNEL_LEN: usize = 129;
pub const SAMPLE_RATE: f64 = 16000.0;
pub const MIN_BAND_HZ: f64 = 30.0;
/// Narrowest band (Hz) still treated as resolvable.
pub const MIN_BAND_WIDTH_HZ: f64 = 1.0;
const POOL: (usize, usize) = (3, 3);

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// What the front-end does to filter outputs before pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Magnitude {
    Signed,
    Abs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SincFilterbank {
    pub num_filters: usize,
    pub kernel_len: usize,
    pub sample_rate: f64,
    pub f_low: Vec<f64>,
    pub f_high: Vec<f64>,
    pub trainable: bool,
}

/// Mel-spaced contiguous bands between 30 Hz and Nyquist.
pub fn init_mel_filterbank(num_filters: usize, sample_rate: f64, kernel_len: usize) -> Result<SincFilterbank> {
    if num_filters == 0 {
        return Err(Error::invalid("filterbank needs at least one filter"));
    }
    if kernel_len % 2 == 0 {
        return Err(Error::invalid(format!("kernel length must be odd, got {kernel_len}")));
    }
    let nyquist = sample_rate / 2.0;
    if !(sample_rate.is_finite() && nyquist > MIN_BAND_HZ) {
        return Err(Error::invalid(format!("sample rate {sample_rate} too low")));
    }
    let (lo, hi) = (hz_to_mel(MIN_BAND_HZ), hz_to_mel(nyquist));
    let step = (hi - lo) / num_filters as f64;
    let mut edges: Vec<f64> = (0..=num_filters).map(|i| mel_to_hz(lo + step * i as f64)).collect();
    edges[0] = MIN_BAND_HZ;
    edges[num_filters] = nyquist;
    let narrowest = edges.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if narrowest < MIN_BAND_WIDTH_HZ {
        return Err(Error::invalid(format!(
            "{num_filters} filters leave a {narrowest:.3} Hz band; not resolvable"
        )));
    }
    Ok(SincFilterbank {
        num_filters,
        kernel_len,
        sample_rate,
        f_low: edges[..num_filters].to_vec(),
        f_high: edges[1..].to_vec(),
        trainable: false,
    })
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

impl SincFilterbank {
    /// Hamming-windowed band-pass kernels, shape `(F, 1, K)`.
    pub fn kernels(&self) -> Tensor {
        let k = self.kernel_len;
        let half = (k - 1) / 2;
        let mut data = vec![0.0; self.num_filters * k];
        for (f, row) in data.chunks_mut(k).enumerate() {
            let lo = self.f_low[f] / self.sample_rate;
            let hi = self.f_high[f] / self.sample_rate;
            for n in 0..=half {
                let t = n as f64;
                let window = if k == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * (half + n) as f64 / (k - 1) as f64).cos()
                };
                let v = (2.0 * hi * sinc(2.0 * hi * t) - 2.0 * lo * sinc(2.0 * lo * t)) * window;
                row[half + n] = v;
                row[half - n] = v;
            }
        }
        Tensor::new(vec![self.num_filters, 1, k], data).expect("kernel shape")
    }

    /// `(F', T')` after the filter stage and the (3, 3) pool.
    pub fn output_hw(&self, input_len: usize) -> Result<(usize, usize)> {
        if input_len < self.kernel_len {
            return Err(Error::shape("sinc", format!("waveform of {input_len} samples shorter than {}-tap kernel", self.kernel_len)));
        }
        Ok((self.num_filters / POOL.0, (input_len - self.kernel_len + 1) / POOL.1))
    }
}

/// Filterbank plus the pool, batch norm and SeLU that follow it.
#[derive(Clone, Debug)]
pub struct SincFrontend {
    pub fb: SincFilterbank,
    pub kernel: ParamId,
    pub bn: DualBatchNorm,
    pub magnitude: Magnitude,
}

impl SincFrontend {
    pub fn new(store: &mut ParamStore, fb: SincFilterbank, magnitude: Magnitude, bn_momentum: f64, bn_eps: f64) -> Self {
        let kernel = store.add("sinc.kernel", fb.kernels(), fb.trainable);
        let bn = DualBatchNorm::new(store, "sinc.bn", 1, bn_momentum, bn_eps);
        SincFrontend { fb, kernel, bn, magnitude }
    }

    /// Raw filter responses `(N, F, L - K + 1)` of a waveform batch `(N, L)`.
    pub fn filter(&self, p: &Binder<'_>, wave: Var) -> Result<Var> {
        let g = p.graph();
        let s = g.shape(wave);
        if s.len() != 2 {
            return Err(Error::shape("sinc", format!("expected (N, L) waveforms, got {s:?}")));
        }
        self.fb.output_hw(s[1])?;
        let x = g.reshape(wave, &[s[0], 1, s[1]])?;
        g.conv1d(x, p.var(self.kernel), None)
    }

    /// `(N, L)` -> `(N, 1, F/3, (L-K+1)/3)`.
    pub fn forward(&mut self, p: &Binder<'_>, wave: Var, ctx: BnContext) -> Result<Var> {
        let g = p.graph();
        let y = self.filter(p, wave)?;
        let y = match self.magnitude {
            Magnitude::Signed => y,
            Magnitude::Abs => g.abs(y)?,
        };
        let s = g.shape(y);
        let y = g.reshape(y, &[s[0], 1, s[1], s[2]])?;
        let y = g.max_pool2d(y, POOL)?;
        let y = self.bn.forward(p, y, ctx)?;
        g.selu(y)
    }
}
