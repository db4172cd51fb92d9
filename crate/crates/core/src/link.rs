//! Grid geometry and channel settings shared by training and evaluation.

use serde::{Deserialize, Serialize};

use crate::channel::{SampledProfile, TdlProfile};
use crate::classical_rx::ReceiverKind;
use crate::error::{Error, Result};
use crate::neural_mod::ModulationMode;
use crate::neural_rx::RxInput;
use crate::ofdm_grid::{PilotConfig, PilotPattern};
use crate::waveform::OfdmModem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_s: usize,
    pub n_t: usize,
    /// Cyclic prefix length in samples.
    pub n_cp: usize,
    pub subcarrier_spacing: f64,
    /// Bits per symbol.
    pub m: usize,
    pub pilots: PilotConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n_s: 128, n_t: 14, n_cp: 6, subcarrier_spacing: 15e3, m: 6, pilots: PilotConfig::TwoP }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s < 2 || self.n_t == 0 {
            return Err(Error::Config(format!("grid {}x{} is too small", self.n_s, self.n_t)));
        }
        if self.n_cp >= self.n_s {
            return Err(Error::Config(format!("cyclic prefix {} not shorter than {} subcarriers", self.n_cp, self.n_s)));
        }
        if !(self.subcarrier_spacing > 0.0) {
            return Err(Error::Config("subcarrier spacing must be positive".into()));
        }
        if self.m == 0 || self.m > 12 {
            return Err(Error::Config(format!("bits per symbol {} outside 1..=12", self.m)));
        }
        Ok(())
    }

    pub fn pattern(&self) -> Result<PilotPattern> {
        PilotPattern::new(self.pilots, self.n_s, self.n_t)
    }

    pub fn with_pilots(&self, pilots: PilotConfig) -> Self {
        GridConfig { pilots, ..self.clone() }
    }

    pub fn modem(&self) -> Result<OfdmModem> {
        OfdmModem::new(self.n_s, self.n_cp, self.subcarrier_spacing)
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / (self.n_s as f64 * self.subcarrier_spacing)
    }

    /// OFDM symbol duration including the cyclic prefix.
    pub fn symbol_duration(&self) -> f64 {
        (self.n_s + self.n_cp) as f64 * self.sample_period()
    }

    pub fn frame_samples(&self) -> usize {
        self.n_t * (self.n_s + self.n_cp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProfile {
    pub name: String,
    pub delays_ns: Vec<f64>,
    pub powers_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub carrier: f64,
    /// RMS delay spread the TDL-A profile is scaled to, in seconds.
    pub delay_spread: f64,
    /// Replaces TDL-A when set.
    pub profile: Option<CustomProfile>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { carrier: 2e9, delay_spread: 100e-9, profile: None }
    }
}

impl ChannelConfig {
    pub fn profile(&self) -> Result<TdlProfile> {
        match &self.profile {
            Some(p) => TdlProfile::from_db(&p.name, &p.delays_ns, &p.powers_db),
            None => {
                if !(self.delay_spread >= 0.0) {
                    return Err(Error::Config("delay spread must be non-negative".into()));
                }
                Ok(TdlProfile::tdl_a(self.delay_spread))
            }
        }
    }

    /// Profile on the sample grid. Logs a warning when the largest delay
    /// does not fit in the cyclic prefix.
    pub fn sampled(&self, grid: &GridConfig) -> Result<SampledProfile> {
        let s = self.profile()?.quantize(grid.sample_period());
        if s.max_delay() > grid.n_cp {
            log::warn!("largest tap delay {} exceeds the {}-sample cyclic prefix", s.max_delay(), grid.n_cp);
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationSettings {
    pub mode: ModulationMode,
    /// Modulator residual width; the input convolution has half as many.
    pub modulator_hidden: usize,
    /// Pilot energy fraction for superimposed pilots.
    pub sip_fraction: f64,
}

impl Default for ModulationSettings {
    fn default() -> Self {
        ModulationSettings { mode: ModulationMode::DeepOfdm, modulator_hidden: 48, sip_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSettings {
    pub kind: ReceiverKind,
    pub input: RxInput,
    /// Neural receiver residual width.
    pub hidden: usize,
    pub iedd_iterations: usize,
}

impl Default for ReceiverSettings {
    fn default() -> Self {
        ReceiverSettings { kind: ReceiverKind::Neural, input: RxInput::Pilots, hidden: 128, iedd_iterations: 3 }
    }
}
