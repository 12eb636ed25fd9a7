//! Versioned TOML checkpoint for trained gains.
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! every parameter survives a write/read cycle bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::loss::PenaltyForm;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "contraction-observer-checkpoint";

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub system: String,
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub rho: Vec<f64>,
    pub penalty_form: PenaltyForm,
    pub seed: u64,
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
    pub epochs_completed: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Mlp,
    pub meta: TrainingMeta,
}

struct VersionProbe {
    format: Option<String>,
    version: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    #[allow(dead_code)]
    format: String,
    #[allow(dead_code)]
    version: u32,
    network: RawNetwork,
    training: TrainingMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    layer_dims: Vec<usize>,
    activation: String,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_array(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
    format!("[{}]", items.join(", "))
}

impl Checkpoint {
    pub fn to_toml(&self) -> String {
        let net = &self.net;
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "format = \"{FORMAT_TAG}\"");
        let _ = writeln!(s, "version = {CHECKPOINT_VERSION}");
        s.push('\n');
        let _ = writeln!(s, "[training]");
        let _ = writeln!(s, "system = \"{}\"", m.system);
        let _ = writeln!(s, "lambda = {}", fmt_f64(m.lambda));
        let _ = writeln!(s, "mu1 = {}", fmt_f64(m.mu1));
        let _ = writeln!(s, "mu2 = {}", fmt_f64(m.mu2));
        let _ = writeln!(s, "rho = {}", fmt_array(&m.rho));
        let _ = writeln!(s, "penalty_form = \"{}\"", m.penalty_form.tag());
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "adam_epochs = {}", m.adam_epochs);
        let _ = writeln!(s, "lbfgs_epochs = {}", m.lbfgs_epochs);
        let _ = writeln!(s, "epochs_completed = {}", m.epochs_completed);
        let _ = writeln!(s, "final_loss = {}", fmt_f64(m.final_loss));
        s.push('\n');
        let _ = writeln!(s, "[network]");
        let dims: Vec<String> = net.layer_dims().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "layer_dims = [{}]", dims.join(", "));
        let _ = writeln!(s, "activation = \"{}\"", net.activation().tag());
        for l in 0..net.num_layers() {
            let fan_in = net.layer_dims()[l];
            s.push('\n');
            let _ = writeln!(s, "[[network.layers]]");
            let _ = writeln!(s, "weights = [");
            for row in net.weights(l).chunks(fan_in) {
                let _ = writeln!(s, "  {},", fmt_array(row));
            }
            let _ = writeln!(s, "]");
            let _ = writeln!(s, "biases = {}", fmt_array(net.biases(l)));
        }
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        // check the version before the full schema so older/newer files get
        // a precise message instead of a field error
        let probe: toml::Table =
            toml::from_str(text).map_err(|e| Error::Format(format!("not a checkpoint: {e}")))?;
        let probe = VersionProbe {
            format: probe.get("format").and_then(|v| v.as_str()).map(str::to_owned),
            version: probe
                .get("version")
                .and_then(|v| v.as_integer())
                .and_then(|v| u32::try_from(v).ok()),
        };
        if probe.format.as_deref() != Some(FORMAT_TAG) {
            return Err(Error::Format(format!(
                "missing or unknown format tag (expected \"{FORMAT_TAG}\")"
            )));
        }
        match probe.version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "unsupported checkpoint version {v} (this build reads version {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(Error::Format("missing checkpoint version".into())),
        }
        let raw: RawCheckpoint =
            toml::from_str(text).map_err(|e| Error::Format(format!("malformed checkpoint: {e}")))?;
        let activation = Activation::from_tag(&raw.network.activation).ok_or_else(|| {
            Error::Format(format!("unknown activation \"{}\"", raw.network.activation))
        })?;
        let mut weights = Vec::with_capacity(raw.network.layers.len());
        let mut biases = Vec::with_capacity(raw.network.layers.len());
        for layer in raw.network.layers {
            weights.push(layer.weights.into_iter().flatten().collect());
            biases.push(layer.biases);
        }
        let net = Mlp::from_parts(&raw.network.layer_dims, weights, biases, activation)
            .map_err(|e| Error::Format(format!("inconsistent network: {e}")))?;
        Ok(Checkpoint {
            net,
            meta: raw.training,
        })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_toml())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    Checkpoint::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            net: Mlp::init(&[3, 4, 2], Activation::Tanh, 17).unwrap(),
            meta: TrainingMeta {
                system: "vanderpol".into(),
                lambda: 2.5,
                mu1: 1e-3,
                mu2: 1.0,
                rho: vec![1.0, 0.1],
                penalty_form: PenaltyForm::Hinge,
                seed: 42,
                adam_epochs: 500,
                lbfgs_epochs: 500,
                epochs_completed: 1000,
                final_loss: 0.012_345_678_901_234_567,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let text = ck.to_toml();
        let back = Checkpoint::from_toml(&text).unwrap();
        assert_eq!(back, ck);
        // 17 significant digits in the mantissa
        assert!(text.contains("1.0000000000000000e-3"));
    }

    #[test]
    fn rejects_other_versions() {
        let text = sample().to_toml().replace("version = 1", "version = 7");
        let err = Checkpoint::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("version 7")), "{err}");
    }

    #[test]
    fn rejects_garbage_and_bad_shapes() {
        assert!(matches!(Checkpoint::from_toml("not = [toml"), Err(Error::Format(_))));
        let text = sample().to_toml().replace("layer_dims = [3, 4, 2]", "layer_dims = [3, 5, 2]");
        assert!(matches!(Checkpoint::from_toml(&text), Err(Error::Format(_))));
        let text = sample().to_toml().replace("seed = 42", "seed = 42\nsurprise = 1");
        assert!(matches!(Checkpoint::from_toml(&text), Err(Error::Format(_))));
    }
}
