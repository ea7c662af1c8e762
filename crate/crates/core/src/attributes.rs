use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ATTRIBUTES: usize = 12;

/// The fixed attribute schema, in conditioning order.
pub const ATTRIBUTE_NAMES: [&str; N_ATTRIBUTES] = [
    "Bald",
    "Bangs",
    "Black Hair",
    "Blond Hair",
    "Brown Hair",
    "Bushy Eyebrows",
    "Eyeglasses",
    "Male",
    "Mouth Open",
    "Mustache",
    "Pale",
    "Young",
];

/// Column names used for the schema attributes by `list_attr_celeba.txt`.
pub const CELEBA_COLUMNS: [&str; N_ATTRIBUTES] = [
    "Bald",
    "Bangs",
    "Black_Hair",
    "Blond_Hair",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Eyeglasses",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Pale_Skin",
    "Young",
];

/// Index of an attribute by schema name. Matching ignores case and treats
/// spaces and underscores alike; CelebA column names are accepted too.
pub fn attribute_index(name: &str) -> Option<usize> {
    let norm = |s: &str| s.trim().to_ascii_lowercase().replace(' ', "_");
    let key = norm(name);
    ATTRIBUTE_NAMES
        .iter()
        .position(|n| norm(n) == key)
        .or_else(|| CELEBA_COLUMNS.iter().position(|n| norm(n) == key))
}

/// Twelve attribute values in `[0, 1]`, ordered as [`ATTRIBUTE_NAMES`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AttributeVector([f64; N_ATTRIBUTES]);

impl AttributeVector {
    pub fn new(values: [f64; N_ATTRIBUTES]) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidAttributes(format!(
                "`{}` = {v} is outside [0, 1]",
                ATTRIBUTE_NAMES[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; N_ATTRIBUTES] = values.try_into().map_err(|_| {
            Error::InvalidAttributes(format!("expected {N_ATTRIBUTES} values, got {}", values.len()))
        })?;
        Self::new(arr)
    }

    pub fn zeros() -> Self {
        Self([0.0; N_ATTRIBUTES])
    }

    pub fn ones() -> Self {
        Self([1.0; N_ATTRIBUTES])
    }

    pub fn values(&self) -> &[f64; N_ATTRIBUTES] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Thresholds at 0.5.
    pub fn binarized(&self) -> Self {
        Self(self.0.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
    }

    /// Returns a copy with `name` set to `value`.
    pub fn with(&self, name: &str, value: f64) -> Result<Self> {
        let i = attribute_index(name).ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
        let mut v = self.0;
        v[i] = value;
        Self::new(v)
    }

    /// Randomized conditioning vector: independent fair coin flips, or
    /// independent uniform values when `continuous`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, continuous: bool) -> Self {
        let mut v = [0.0; N_ATTRIBUTES];
        for x in &mut v {
            *x = if continuous {
                rng.random::<f64>()
            } else if rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            };
        }
        Self(v)
    }
}

impl TryFrom<Vec<f64>> for AttributeVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<AttributeVector> for Vec<f64> {
    fn from(a: AttributeVector) -> Vec<f64> {
        a.0.to_vec()
    }
}
