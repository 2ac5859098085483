use serde::{Deserialize, Serialize};

use super::labels::{class_from_flags, CycleClass, LabelVector};
use crate::error::{Error, Result};

/// One annotated respiratory cycle: `[start_s, end_s)` plus its two flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleAnnotation {
    pub start_s: f64,
    pub end_s: f64,
    #[serde(with = "bit")]
    pub crackle: bool,
    #[serde(with = "bit")]
    pub wheeze: bool,
}

impl CycleAnnotation {
    pub fn new(start_s: f64, end_s: f64, crackle: bool, wheeze: bool) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || end_s <= start_s {
            return Err(Error::Validation(format!(
                "cycle span [{start_s}, {end_s}) must satisfy 0 <= start < end"
            )));
        }
        Ok(CycleAnnotation {
            start_s,
            end_s,
            crackle,
            wheeze,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn class(&self) -> CycleClass {
        class_from_flags(self.crackle, self.wheeze)
    }

    pub fn labels(&self) -> LabelVector {
        LabelVector {
            crackle: self.crackle,
            wheeze: self.wheeze,
        }
    }

    /// Row in the annotation text format.
    pub fn to_line(&self) -> String {
        format!(
            "{:.3}\t{:.3}\t{}\t{}",
            self.start_s,
            self.end_s,
            u8::from(self.crackle),
            u8::from(self.wheeze)
        )
    }
}

mod bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(serde::de::Error::custom(format!("expected bit, got {v}"))),
        }
    }
}

/// Parses an ICBHI annotation file: one `begin end crackle wheeze` row per
/// cycle, whitespace separated. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_annotation_file(text: &str) -> Result<Vec<CycleAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 fields (begin end crackle wheeze), found {}",
                fields.len()
            )));
        }
        let time = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(format!("invalid time {s:?}")))
        };
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(parse_err(format!("invalid flag {s:?}, expected 0 or 1"))),
        };
        let annotation = CycleAnnotation::new(
            time(fields[0])?,
            time(fields[1])?,
            flag(fields[2])?,
            flag(fields[3])?,
        )
        .map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        out.push(annotation);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_rows() {
        let rows = parse_annotation_file("0.364\t1.812\t0\t0\n0.0\t2.5\t1\t1\n").unwrap();
        assert_eq!(rows[0], CycleAnnotation::new(0.364, 1.812, false, false).unwrap());
        assert_eq!(rows[1], CycleAnnotation::new(0.0, 2.5, true, true).unwrap());
    }

    #[test]
    fn reversed_span_is_a_validation_error() {
        assert!(matches!(
            parse_annotation_file("1.0\t0.5\t0\t0"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let err = parse_annotation_file("0.1 0.2 0 0\n\n0.3 0.4 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_annotation_file("0.1 x 0 0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_annotation_file("0.1 0.2 0 2").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn output_length_equals_nonempty_lines() {
        let text = "\n0.1 0.2 0 0\n   \n0.2 0.9 1 0\r\n0.9 1.4 0 1\n";
        assert_eq!(parse_annotation_file(text).unwrap().len(), 3);
    }

    #[test]
    fn line_round_trip() {
        let a = CycleAnnotation::new(0.25, 3.125, true, false).unwrap();
        assert_eq!(parse_annotation_file(&a.to_line()).unwrap()[0], a);
    }
}
