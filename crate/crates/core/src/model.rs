//! Trained models and their file format.
//!
//! A model file is a single JSON object:
//!
//! ```json
//! {
//!   "format": "shnn-model",
//!   "version": 1,
//!   "n_dim": 1, "L": 1, "M": 64,
//!   "scheme": "symplectic-euler",
//!   "h": 0.1,
//!   "seed": 0,
//!   "system": "spring",
//!   "correction": "none",
//!   "params": {
//!     "encoding": "f64-le-base64",
//!     "count": 257,
//!     "data": "..."
//!   }
//! }
//! ```
//!
//! `params.data` is the base64 encoding of the parameters as little-endian
//! `f64`, layer by layer from the input side, each layer contributing its
//! weight matrix (`out × in`, row-major) followed by its bias.

use std::fs;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::correction::{Correction, SeriesField};
use crate::diff_engine::Differentiable;
use crate::error::ShnnError;
use crate::field::ScalarField;
use crate::mlp::{Architecture, MlpParams};
use crate::systems::SystemKind;
use crate::training::Scheme;

const FORMAT: &str = "shnn-model";
const VERSION: u32 = 1;
const ENCODING: &str = "f64-le-base64";

/// Trained parameters together with the scheme and step they were trained
/// with and the correction applied at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedHamiltonian {
    pub params: MlpParams,
    pub scheme: Scheme,
    pub h: f64,
    pub correction: Correction,
    pub seed: u64,
    pub system: Option<SystemKind>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamBlob {
    encoding: String,
    count: usize,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    n_dim: usize,
    #[serde(rename = "L")]
    depth: usize,
    #[serde(rename = "M")]
    width: usize,
    scheme: Scheme,
    h: f64,
    seed: u64,
    #[serde(default)]
    system: Option<SystemKind>,
    #[serde(default)]
    correction: Correction,
    params: ParamBlob,
}

impl LearnedHamiltonian {
    pub fn new(params: MlpParams, scheme: Scheme, h: f64) -> Self {
        Self {
            params,
            scheme,
            h,
            correction: Correction::None,
            seed: 0,
            system: None,
        }
    }

    /// Sets the correction after checking it against the training scheme.
    pub fn with_correction(mut self, c: Correction) -> Result<Self, ShnnError> {
        c.check_scheme(self.scheme)?;
        self.correction = c;
        Ok(self)
    }

    /// The raw network `Ĥ` without correction.
    pub fn network(&self) -> &MlpParams {
        &self.params
    }

    fn field(&self) -> SeriesField<'_, MlpParams> {
        SeriesField::correction(&self.params, self.correction, self.h)
    }

    pub fn to_json(&self) -> Result<String, ShnnError> {
        let arch = self.params.arch;
        let file = ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            n_dim: arch.n_dim,
            depth: arch.depth,
            width: arch.width,
            scheme: self.scheme,
            h: self.h,
            seed: self.seed,
            system: self.system,
            correction: self.correction,
            params: ParamBlob {
                encoding: ENCODING.into(),
                count: self.params.num_params(),
                data: base64::engine::general_purpose::STANDARD.encode(self.params.to_le_bytes()),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ShnnError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(ShnnError::Format(format!(
                "expected {FORMAT} version {VERSION}, found {} version {}",
                file.format, file.version
            )));
        }
        if file.params.encoding != ENCODING {
            return Err(ShnnError::Format(format!(
                "unsupported parameter encoding `{}`",
                file.params.encoding
            )));
        }
        let arch = Architecture::new(file.n_dim, file.depth, file.width)?;
        if file.params.count != arch.param_dim() {
            return Err(ShnnError::Format(format!(
                "architecture needs {} parameters, file declares {}",
                arch.param_dim(),
                file.params.count
            )));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(file.params.data.as_bytes())
            .map_err(|e| ShnnError::Format(format!("parameter blob: {e}")))?;
        let params = MlpParams::from_le_bytes(arch, &bytes)?;
        file.correction.check_scheme(file.scheme)?;
        Ok(Self {
            params,
            scheme: file.scheme,
            h: file.h,
            correction: file.correction,
            seed: file.seed,
            system: file.system,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ShnnError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ShnnError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl ScalarField for LearnedHamiltonian {
    fn dim(&self) -> usize {
        self.params.arch.input_dim()
    }

    fn value(&self, y: &[f64]) -> f64 {
        self.field().value(y)
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        self.field().gradient(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::correct_se_order2;

    fn model() -> LearnedHamiltonian {
        let params = MlpParams::init(3, Architecture::new(1, 2, 5).unwrap());
        let mut m = LearnedHamiltonian::new(params, Scheme::SymplecticEuler, 0.2);
        m.seed = 3;
        m.system = Some(SystemKind::Pendulum);
        m
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = model().with_correction(Correction::SeOrder3).unwrap();
        let back = LearnedHamiltonian::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let y = [0.3, -1.2];
        assert_eq!(back.value(&y).to_bits(), m.value(&y).to_bits());
    }

    #[test]
    fn correction_is_applied_at_query_time() {
        let m = model();
        let y = [0.5, 0.25];
        assert_eq!(m.value(&y), m.params.forward(&y).unwrap());
        let c = m.clone().with_correction(Correction::SeOrder2).unwrap();
        assert!((c.value(&y) - correct_se_order2(&m.params, &y, 0.2)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_correction_rejected() {
        assert!(model().with_correction(Correction::MpOrder4).is_err());
        let text = model()
            .to_json()
            .unwrap()
            .replace("\"correction\": \"none\"", "\"correction\": \"mp_order4\"");
        assert!(LearnedHamiltonian::from_json(&text).is_err());
    }

    #[test]
    fn corrupted_files_rejected() {
        let text = model().to_json().unwrap();
        let bad_count = text.replace("\"count\": 51", "\"count\": 50");
        assert_ne!(bad_count, text);
        assert!(LearnedHamiltonian::from_json(&bad_count).is_err());
        assert!(LearnedHamiltonian::from_json(&text.replace("shnn-model", "other")).is_err());
        assert!(LearnedHamiltonian::from_json("{}").is_err());
    }
}
