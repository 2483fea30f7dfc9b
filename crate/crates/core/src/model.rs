//! The full model: encoder, spatial field, motion field and RGB decoder,
//! sharing one parameter store.

use rand::SeedableRng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{Checkpoint, Entry};
use crate::numerics::{ParamStore, Siren, SirenSpec, Tensor};
use crate::spatial_inr::{SpatialInr, SpatialInrConfig};
use crate::temporal_inr::{TemporalInr, TemporalInrConfig};

/// Architecture switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    /// Off: no motion flow; the time network emits a feature instead.
    pub use_flow: bool,
    /// Off: the decoder sees only the space-time feature.
    pub use_multiscale: bool,
    /// On: one network maps (cell vector, offset, time) straight to flows.
    pub single_network: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_flow: true,
            use_multiscale: true,
            single_network: false,
        }
    }
}

impl AblationFlags {
    /// Parses a variant tag: `full`, or any of `f`, `m`, `s` joined by `+`.
    pub fn from_variant(tag: &str) -> Result<Self> {
        let mut flags = Self::default();
        if tag == "full" {
            return Ok(flags);
        }
        for part in tag.split('+') {
            match part.trim().trim_start_matches('-') {
                "f" => flags.use_flow = false,
                "m" => flags.use_multiscale = false,
                "s" => flags.single_network = true,
                other => return Err(Error::Usage(format!("unknown variant `{other}`"))),
            }
        }
        Ok(flags)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if !self.use_flow {
            parts.push("-f");
        }
        if !self.use_multiscale {
            parts.push("-m");
        }
        if self.single_network {
            parts.push("-s");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 256, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub spatial: SpatialInrConfig,
    pub temporal: TemporalInrConfig,
    pub decoder: DecoderConfig,
    pub flags: AblationFlags,
    pub first_omega: f64,
    pub hidden_omega: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            spatial: SpatialInrConfig::default(),
            temporal: TemporalInrConfig::default(),
            decoder: DecoderConfig::default(),
            flags: AblationFlags::default(),
            first_omega: 30.0,
            hidden_omega: 1.0,
        }
    }
}

/// Where each part of the decoder input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub feat: usize,
    pub spatial: usize,
    pub flows: usize,
    /// Width of the space-time part.
    pub spacetime: usize,
    /// Width of the multi-scale part (0 when disabled).
    pub multiscale: usize,
    /// Output width of the time network.
    pub time_out: usize,
    /// Feature width fed to the time network (besides the time itself).
    pub time_in: usize,
}

impl Layout {
    pub fn decoder_in(&self) -> usize {
        self.spacetime + self.multiscale
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the CLI `--tiny` switch.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                feat_channels: 16,
                num_blocks: 2,
                ..EncoderConfig::default()
            },
            spatial: SpatialInrConfig {
                hidden: vec![32, 32],
                out_dim: 16,
                ..SpatialInrConfig::default()
            },
            temporal: TemporalInrConfig {
                hidden: vec![32, 32],
                ..TemporalInrConfig::default()
            },
            decoder: DecoderConfig {
                hidden: vec![32, 32],
            },
            ..Self::default()
        }
    }

    pub fn layout(&self) -> Layout {
        let c = self.encoder.feat_channels;
        let cs = self.spatial.out_dim;
        let nf = self.temporal.num_flows();
        let f = self.flags;
        let multiscale = if f.use_multiscale { c + 6 } else { 0 };
        let (time_in, time_out, spacetime) = match (f.single_network, f.use_flow) {
            (false, true) => (cs, 2 * nf, nf * cs),
            (false, false) => (cs, cs, 2 * cs),
            (true, true) => {
                let st = if nf == 2 { 2 * c + 6 } else { c + 6 };
                (self.spatial.in_dim(c), 2 * nf, st)
            }
            (true, false) => (self.spatial.in_dim(c), cs, cs),
        };
        Layout {
            feat: c,
            spatial: cs,
            flows: nf,
            spacetime,
            multiscale,
            time_out,
            time_in,
        }
    }

    /// `key=value` pairs covering every field.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("feat_channels".into(), self.encoder.feat_channels.to_string()),
            ("num_blocks".into(), self.encoder.num_blocks.to_string()),
            ("kernel_size".into(), self.encoder.kernel_size.to_string()),
            ("spatial_hidden".into(), list(&self.spatial.hidden)),
            ("spatial_out".into(), self.spatial.out_dim.to_string()),
            ("scaled_delta".into(), self.spatial.scaled_delta.to_string()),
            ("local_ensemble".into(), self.spatial.local_ensemble.to_string()),
            ("cell_decode".into(), self.spatial.cell_decode.to_string()),
            ("temporal_hidden".into(), list(&self.temporal.hidden)),
            ("dual_flow".into(), self.temporal.dual_flow.to_string()),
            ("flow_init_scale".into(), fmt_f64(self.temporal.output_init_scale)),
            ("decoder_hidden".into(), list(&self.decoder.hidden)),
            ("use_flow".into(), self.flags.use_flow.to_string()),
            ("use_multiscale".into(), self.flags.use_multiscale.to_string()),
            ("single_network".into(), self.flags.single_network.to_string()),
            ("first_omega".into(), fmt_f64(self.first_omega)),
            ("hidden_omega".into(), fmt_f64(self.hidden_omega)),
        ]
    }

    /// Sets one field; `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "feat_channels" => self.encoder.feat_channels = parse(key, value)?,
            "num_blocks" => self.encoder.num_blocks = parse(key, value)?,
            "kernel_size" => self.encoder.kernel_size = parse(key, value)?,
            "spatial_hidden" => self.spatial.hidden = parse_list(key, value)?,
            "spatial_out" => self.spatial.out_dim = parse(key, value)?,
            "scaled_delta" => self.spatial.scaled_delta = parse(key, value)?,
            "local_ensemble" => self.spatial.local_ensemble = parse(key, value)?,
            "cell_decode" => self.spatial.cell_decode = parse(key, value)?,
            "temporal_hidden" => self.temporal.hidden = parse_list(key, value)?,
            "dual_flow" => self.temporal.dual_flow = parse(key, value)?,
            "flow_init_scale" => self.temporal.output_init_scale = parse(key, value)?,
            "decoder_hidden" => self.decoder.hidden = parse_list(key, value)?,
            "use_flow" => self.flags.use_flow = parse(key, value)?,
            "use_multiscale" => self.flags.use_multiscale = parse(key, value)?,
            "single_network" => self.flags.single_network = parse(key, value)?,
            "first_omega" => self.first_omega = parse(key, value)?,
            "hidden_omega" => self.hidden_omega = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.in_channels != 6 {
            return Err(Error::Config("encoder input must be two stacked RGB frames (6 channels)".into()));
        }
        if self.encoder.feat_channels == 0 || self.spatial.out_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.encoder.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(self.first_omega.is_finite() && self.hidden_omega.is_finite() && self.hidden_omega > 0.0) {
            return Err(Error::Config("omegas must be finite and positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v:?}")
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    /// Absent in single-network mode.
    pub spatial: Option<SpatialInr>,
    /// Motion (or feature) network; named `single_inr` in single-network mode.
    pub temporal: TemporalInr,
    pub decoder: Siren,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = config.layout();
        let omegas = (config.first_omega, config.hidden_omega);
        let encoder = Encoder::new(&mut params, &config.encoder, &mut rng)?;
        let spatial = (!config.flags.single_network).then(|| {
            SpatialInr::new(&mut params, &config.spatial, layout.feat, omegas, &mut rng)
        });
        let (prefix, out_scale) = match (config.flags.single_network, config.flags.use_flow) {
            (false, true) => ("temporal_inr", config.temporal.output_init_scale),
            (false, false) => ("temporal_inr", 1.0),
            (true, true) => ("single_inr", config.temporal.output_init_scale),
            (true, false) => ("single_inr", 1.0),
        };
        let temporal = TemporalInr::new(
            &mut params,
            prefix,
            layout.time_in,
            layout.time_out,
            &config.temporal.hidden,
            omegas,
            out_scale,
            &mut rng,
        );
        let decoder = Siren::new(
            &mut params,
            "decoder",
            &SirenSpec {
                in_dim: layout.decoder_in(),
                hidden: config.decoder.hidden.clone(),
                out_dim: 3,
                first_omega: config.first_omega,
                hidden_omega: config.hidden_omega,
            },
            &mut rng,
        );
        assert_eq!(decoder.in_dim(), layout.decoder_in(), "decoder input width");
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            spatial,
            temporal,
            decoder,
        })
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    /// Checkpoint holding the config header, `extra` header pairs, every
    /// parameter, and `extra_entries`.
    pub fn to_checkpoint(&self, extra: &[(String, String)], extra_entries: Vec<Entry>) -> Checkpoint {
        let mut header = self.config.to_pairs();
        header.extend_from_slice(extra);
        let mut entries: Vec<Entry> = self
            .params
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        entries.extend(extra_entries);
        Checkpoint { header, entries }
    }

    /// Rebuilds a model from a checkpoint; unrelated header keys and entries
    /// are ignored, missing or mis-shaped parameters are errors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = ModelConfig::default();
        for (k, v) in &ck.header {
            config.set(k, v)?;
        }
        let mut model = Self::new(&config, 0)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let entry = ck
                .entry(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let t = model.params.get_mut(id);
            if entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&entry.values);
        }
        Ok(model)
    }

    /// Replaces every parameter value, keeping the architecture.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = other
                .find(&name)
                .map(|o| other.get(o))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.shape() != self.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            *self.params.get_mut(id) = Tensor::new(src.shape().to_vec(), src.data().to_vec())?.with_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_flags() -> Vec<AblationFlags> {
        let mut out = Vec::new();
        for use_flow in [true, false] {
            for use_multiscale in [true, false] {
                for single_network in [true, false] {
                    out.push(AblationFlags {
                        use_flow,
                        use_multiscale,
                        single_network,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn decoder_width_bookkeeping() {
        let mut cfg = ModelConfig::default();
        let (c, cs) = (64, 64);
        assert_eq!(cfg.layout().decoder_in(), 2 * cs + c + 6);
        cfg.flags.use_multiscale = false;
        assert_eq!(cfg.layout().decoder_in(), 2 * cs);
    }

    #[test]
    fn every_flag_combination_builds() {
        for dual in [true, false] {
            for flags in all_flags() {
                let mut cfg = ModelConfig::tiny();
                cfg.flags = flags;
                cfg.temporal.dual_flow = dual;
                let m = Model::new(&cfg, 1).unwrap();
                assert_eq!(m.decoder.in_dim(), cfg.layout().decoder_in());
                assert_eq!(m.spatial.is_none(), flags.single_network);
            }
        }
    }

    #[test]
    fn variant_tags() {
        assert_eq!(AblationFlags::from_variant("full").unwrap(), AblationFlags::default());
        let f = AblationFlags::from_variant("f").unwrap();
        assert!(!f.use_flow && f.use_multiscale && !f.single_network);
        assert_eq!(AblationFlags::from_variant("m+s").unwrap().label(), "-m-s");
        assert!(AblationFlags::from_variant("x").is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.flags.use_flow = false;
        cfg.temporal.output_init_scale = 0.1 + 0.2;
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("nonsense", "1").unwrap());
        assert!(back.set("feat_channels", "x").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = Model::new(&ModelConfig::tiny(), 9).unwrap();
        let bytes = m.to_checkpoint(&[], Vec::new()).to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for ((na, ta), (nb, tb)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            let a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }
}
