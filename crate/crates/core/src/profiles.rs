//! Bundled calibrated (model, device) profiles.
//!
//! Each profile file pairs a model's parameters with a device whose
//! `compute_efficiency` was fitted (see [`crate::cost::fit_compute_efficiency`])
//! so that an 8-GPU node reproduces the measured prefill KV-generation rate
//! for that pair. Qwen2-72B has no published rate; its efficiencies are
//! carried over from CodeLlama-34B on the same device (same hidden size and
//! GQA grouping).

use crate::cost::{DeviceProfile, ModelProfile, ProfileError};
use serde::Deserialize;

/// A calibrated model/device pairing as stored in profile files.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairProfile {
    pub model: ModelProfile,
    pub device: DeviceProfile<f64>,
}

macro_rules! bundled {
    ($($name:literal => $file:literal),+ $(,)?) => {
        /// Names of all bundled profiles, in lexical order.
        pub const BUNDLED: &[&str] = &[$($name),+];

        fn bundled_toml(name: &str) -> Option<&'static str> {
            match name {
                $($name => Some(include_str!(concat!("../profiles/", $file))),)+
                _ => None,
            }
        }
    };
}

bundled! {
    "codellama-34b-a800" => "codellama-34b-a800.toml",
    "codellama-34b-l20" => "codellama-34b-l20.toml",
    "llama-30b-a800" => "llama-30b-a800.toml",
    "llama-30b-l20" => "llama-30b-l20.toml",
    "qwen2-72b-a800" => "qwen2-72b-a800.toml",
    "qwen2-72b-l20" => "qwen2-72b-l20.toml",
}

/// Parse a profile file's contents.
pub fn parse(contents: &str) -> Result<PairProfile, ProfileError> {
    let pair: PairProfile = toml::from_str(contents).map_err(|e| ProfileError::InvalidInstance(
        format!("profile parse error: {e}"),
    ))?;
    pair.model.validate()?;
    pair.device.validate()?;
    Ok(pair)
}

/// Look up a bundled profile by name (e.g. `"llama-30b-l20"`).
pub fn bundled(name: &str) -> Result<PairProfile, ProfileError> {
    let contents = bundled_toml(name).ok_or_else(|| ProfileError::InvalidInstance(format!(
        "unknown bundled profile `{name}` (available: {})",
        BUNDLED.join(", ")
    )))?;
    parse(contents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_bundled_profiles_parse_and_validate() {
        for name in BUNDLED {
            let pair = bundled(name).unwrap();
            assert!(pair.device.compute_efficiency > 0.0 && pair.device.compute_efficiency <= 1.0);
        }
    }

    #[test]
    fn unknown_profile_is_an_error() {
        assert!(bundled("gpt-5-tpu").is_err());
    }

    #[test]
    fn llama_30b_kv_token_size_matches_published_value() {
        let pair = bundled("llama-30b-l20").unwrap();
        assert_eq!(pair.model.kv_bytes_per_token(), 1_597_440);
    }
}
