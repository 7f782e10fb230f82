//! Registry of the 25 observation items scored by the encoder heads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of observation items, and therefore encoder heads.
pub const N_ITEMS: usize = 25;

const BUILTIN_ITEMS: &str = include_str!("../data/items.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instrument {
    Mqi,
    Class,
}

impl Instrument {
    pub const ALL: [Instrument; 2] = [Instrument::Mqi, Instrument::Class];

    pub fn as_str(self) -> &'static str {
        match self {
            Instrument::Mqi => "mqi",
            Instrument::Class => "class",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Instrument::Mqi => 0,
            Instrument::Class => 1,
        }
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Instrument {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mqi" => Ok(Instrument::Mqi),
            "class" => Ok(Instrument::Class),
            other => Err(Error::invalid(format!("unknown instrument {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub code: String,
    #[serde(default)]
    pub name: String,
    pub instrument: Instrument,
    pub scale_min: i32,
    pub scale_max: i32,
    #[serde(default)]
    pub reverse_coded: bool,
}

impl ItemSpec {
    /// Maps a raw score onto `[0, 1]`, higher meaning better instruction.
    pub fn normalize(&self, raw: f64) -> Result<f64> {
        let (lo, hi) = (self.scale_min as f64, self.scale_max as f64);
        if !raw.is_finite() || raw < lo || raw > hi {
            return Err(Error::invalid(format!(
                "score {raw} outside {}..={} for item {}",
                self.scale_min, self.scale_max, self.code
            )));
        }
        let x = (raw - lo) / (hi - lo);
        Ok(if self.reverse_coded { 1.0 - x } else { x })
    }

    /// Inverse of [`ItemSpec::normalize`].
    pub fn denormalize(&self, label: f64) -> f64 {
        let x = if self.reverse_coded { 1.0 - label } else { label };
        self.scale_min as f64 + x * (self.scale_max - self.scale_min) as f64
    }
}

#[derive(Deserialize)]
struct RegistryFile {
    item: Vec<ItemSpec>,
}

#[derive(Clone, Debug)]
pub struct ItemRegistry {
    items: Vec<ItemSpec>,
    by_code: HashMap<String, usize>,
}

impl ItemRegistry {
    /// The 13 MQI and 12 CLASS items shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_ITEMS).expect("builtin item registry is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("item registry: {e}")))?;
        Self::new(file.item)
    }

    pub fn new(items: Vec<ItemSpec>) -> Result<Self> {
        if items.len() != N_ITEMS {
            return Err(Error::invalid(format!(
                "item registry must hold {N_ITEMS} items, found {}",
                items.len()
            )));
        }
        let mut by_code = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            if item.scale_min >= item.scale_max {
                return Err(Error::invalid(format!(
                    "item {}: scale_min must be below scale_max",
                    item.code
                )));
            }
            if by_code.insert(item.code.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate item code {}", item.code)));
            }
        }
        Ok(ItemRegistry { items, by_code })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemSpec] {
        &self.items
    }

    pub fn item(&self, index: usize) -> &ItemSpec {
        &self.items[index]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    /// Head indices belonging to `instrument`, in registry order.
    pub fn indices(&self, instrument: Instrument) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.instrument == instrument)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|it| it.code.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_counts() {
        let reg = ItemRegistry::builtin();
        assert_eq!(reg.len(), 25);
        assert_eq!(reg.indices(Instrument::Mqi).len(), 13);
        assert_eq!(reg.indices(Instrument::Class).len(), 12);
    }

    #[test]
    fn builtin_reverse_coded_set() {
        let reg = ItemRegistry::builtin();
        let mut rev: Vec<&str> = reg
            .items()
            .iter()
            .filter(|i| i.reverse_coded)
            .map(|i| i.code.as_str())
            .collect();
        rev.sort();
        assert_eq!(rev, vec!["CLNC", "LANGIMP", "LCP", "MAJERR"]);
    }

    #[test]
    fn normalization_examples() {
        let reg = ItemRegistry::builtin();
        let expl = reg.item(reg.index_of("EXPL").unwrap());
        assert_eq!(expl.normalize(3.0).unwrap(), 1.0);
        let langimp = reg.item(reg.index_of("LANGIMP").unwrap());
        assert_eq!(langimp.normalize(langimp.scale_min as f64).unwrap(), 1.0);
        let clpc = reg.item(reg.index_of("CLPC").unwrap());
        assert_eq!(clpc.normalize(4.0).unwrap(), 0.5);
        assert!(clpc.normalize(8.0).is_err());
        assert!(clpc.normalize(0.0).is_err());
    }

    #[test]
    fn rejects_bad_registry() {
        let mut items = ItemRegistry::builtin().items().to_vec();
        items[0].scale_max = items[0].scale_min;
        assert!(ItemRegistry::new(items).is_err());
        let items = ItemRegistry::builtin().items()[..24].to_vec();
        assert!(ItemRegistry::new(items).is_err());
    }
}
