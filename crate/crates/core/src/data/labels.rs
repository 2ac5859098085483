use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four ICBHI cycle categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleClass {
    Normal,
    Crackle,
    Wheeze,
    Both,
}

impl CycleClass {
    pub const ALL: [CycleClass; 4] = [
        CycleClass::Normal,
        CycleClass::Crackle,
        CycleClass::Wheeze,
        CycleClass::Both,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Range(format!("class id {id} outside 0..4")))
    }

    /// Stable lowercase key used in documents and file names.
    pub fn key(self) -> &'static str {
        match self {
            CycleClass::Normal => "normal",
            CycleClass::Crackle => "crackle",
            CycleClass::Wheeze => "wheeze",
            CycleClass::Both => "both",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CycleClass::Normal => "Normal",
            CycleClass::Crackle => "Crackle",
            CycleClass::Wheeze => "Wheeze",
            CycleClass::Both => "Crackle&Wheeze",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        flags_from_class(self)
    }
}

impl fmt::Display for CycleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// (crackle, wheeze) -> class: (0,0) Normal, (1,0) Crackle, (0,1) Wheeze, (1,1) Both.
pub fn class_from_flags(crackle: bool, wheeze: bool) -> CycleClass {
    match (crackle, wheeze) {
        (false, false) => CycleClass::Normal,
        (true, false) => CycleClass::Crackle,
        (false, true) => CycleClass::Wheeze,
        (true, true) => CycleClass::Both,
    }
}

pub fn flags_from_class(class: CycleClass) -> (bool, bool) {
    match class {
        CycleClass::Normal => (false, false),
        CycleClass::Crackle => (true, false),
        CycleClass::Wheeze => (false, true),
        CycleClass::Both => (true, true),
    }
}

/// Multi-label target `(crackle, wheeze)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "[u8; 2]", into = "[u8; 2]")]
pub struct LabelVector {
    pub crackle: bool,
    pub wheeze: bool,
}

impl LabelVector {
    pub const LEN: usize = 2;

    /// From 0/1 bits; anything else is rejected.
    pub fn new(crackle: u8, wheeze: u8) -> Result<Self> {
        let bit = |v: u8, name: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Validation(format!("{name} bit must be 0 or 1, got {v}"))),
        };
        Ok(LabelVector {
            crackle: bit(crackle, "crackle")?,
            wheeze: bit(wheeze, "wheeze")?,
        })
    }

    pub fn from_class(class: CycleClass) -> Self {
        let (crackle, wheeze) = flags_from_class(class);
        LabelVector { crackle, wheeze }
    }

    pub fn class(self) -> CycleClass {
        class_from_flags(self.crackle, self.wheeze)
    }

    pub fn bits(self) -> [u8; 2] {
        [u8::from(self.crackle), u8::from(self.wheeze)]
    }
}

impl TryFrom<[u8; 2]> for LabelVector {
    type Error = Error;

    fn try_from(bits: [u8; 2]) -> Result<Self> {
        LabelVector::new(bits[0], bits[1])
    }
}

impl From<LabelVector> for [u8; 2] {
    fn from(v: LabelVector) -> Self {
        v.bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_mapping() {
        assert_eq!(class_from_flags(false, false).index(), 0);
        assert_eq!(class_from_flags(true, true).index(), 3);
        assert_eq!(class_from_flags(false, true).index(), 2);
        assert_eq!(class_from_flags(true, false).index(), 1);
    }

    #[test]
    fn bijection_over_all_inputs() {
        for c in [false, true] {
            for w in [false, true] {
                assert_eq!(flags_from_class(class_from_flags(c, w)), (c, w));
            }
        }
        for class in CycleClass::ALL {
            let (c, w) = flags_from_class(class);
            assert_eq!(class_from_flags(c, w), class);
            assert_eq!(CycleClass::from_index(class.index()).unwrap(), class);
        }
        assert!(CycleClass::from_index(4).is_err());
    }

    #[test]
    fn label_vector_bits() {
        let v = LabelVector::new(1, 0).unwrap();
        assert_eq!(v.bits(), [1, 0]);
        assert_eq!(v.class(), CycleClass::Crackle);
        assert!(LabelVector::new(2, 0).is_err());
        let json = serde_json::to_string(&LabelVector::from_class(CycleClass::Both)).unwrap();
        assert_eq!(json, "[1,1]");
        assert!(serde_json::from_str::<LabelVector>("[0,3]").is_err());
    }
}
