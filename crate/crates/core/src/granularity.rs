//! Mapping between continuous ages and class indices at several bin widths.
//!
//! Ages live on a contiguous integer grid `[age_min, age_max]` (1..=100 by
//! default). A [`GranularitySpec`] partitions that grid into equal bins of
//! `bin_width` years; class indices are zero-based, so age 44 falls into class
//! 43 at width 1, class 8 at width 5, class 4 at width 10 and class 2 at
//! width 20.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AGE_MIN: u32 = 1;
pub const AGE_MAX: u32 = 100;

/// Bin widths of the four classification branches, finest first.
pub const CANONICAL_WIDTHS: [u32; 4] = [1, 5, 10, 20];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GranularityError {
    #[error("bin width must be at least 1")]
    ZeroWidth,
    #[error("bin width {bin_width} does not divide the age span of {span} years")]
    Divisibility { bin_width: u32, span: u32 },
    #[error("invalid age range [{age_min}, {age_max}]")]
    InvalidRange { age_min: u32, age_max: u32 },
    #[error("age {0} is not finite")]
    NonFiniteAge(f64),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },
    #[error("width {coarse} is not a coarsening of width {fine} over the same age range")]
    NotNested { fine: u32, coarse: u32 },
}

/// An equal-width binning of the integer age grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GranularitySpec {
    bin_width: u32,
    num_classes: u32,
    age_min: u32,
    age_max: u32,
}

impl GranularitySpec {
    pub fn with_range(bin_width: u32, age_min: u32, age_max: u32) -> Result<Self, GranularityError> {
        if age_max < age_min {
            return Err(GranularityError::InvalidRange { age_min, age_max });
        }
        if bin_width == 0 {
            return Err(GranularityError::ZeroWidth);
        }
        let span = age_max - age_min + 1;
        if !span.is_multiple_of(bin_width) {
            return Err(GranularityError::Divisibility { bin_width, span });
        }
        Ok(Self {
            bin_width,
            num_classes: span / bin_width,
            age_min,
            age_max,
        })
    }

    pub fn bin_width(&self) -> u32 {
        self.bin_width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes as usize
    }

    pub fn age_min(&self) -> u32 {
        self.age_min
    }

    pub fn age_max(&self) -> u32 {
        self.age_max
    }

    /// Rounds (half away from zero) and clamps an age onto the integer grid.
    /// The flag reports whether clamping changed the rounded value.
    pub fn clamp_age(&self, age: AgeLabel) -> Result<(u32, bool), GranularityError> {
        let value = age.years();
        if !value.is_finite() {
            return Err(GranularityError::NonFiniteAge(value));
        }
        let rounded = value.round();
        let clamped = rounded.clamp(self.age_min as f64, self.age_max as f64);
        Ok((clamped as u32, clamped != rounded))
    }

    /// Representative ages of every class, in class order.
    pub fn representatives(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|k| self.representative_unchecked(k))
            .collect()
    }

    fn representative_unchecked(&self, class_index: usize) -> f64 {
        self.age_min as f64 + (class_index as f64) * self.bin_width as f64 + (self.bin_width as f64 - 1.0) / 2.0
    }
}

impl fmt::Display for GranularitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-year bins ({} classes)", self.bin_width, self.num_classes)
    }
}

/// A (possibly fractional) apparent age in years.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AgeLabel(f64);

impl AgeLabel {
    pub fn new(years: f64) -> Self {
        Self(years)
    }

    pub fn years(&self) -> f64 {
        self.0
    }

    /// True when the rounded age lies outside the default 1..=100 grid.
    pub fn is_out_of_range(&self) -> bool {
        let r = self.0.round();
        r < AGE_MIN as f64 || r > AGE_MAX as f64
    }
}

impl From<f64> for AgeLabel {
    fn from(years: f64) -> Self {
        Self(years)
    }
}

/// Builds a spec over the default 1..=100 age range.
pub fn make_spec(bin_width: u32) -> Result<GranularitySpec, GranularityError> {
    GranularitySpec::with_range(bin_width, AGE_MIN, AGE_MAX)
}

/// The four canonical specs, finest first.
pub fn canonical_specs() -> [GranularitySpec; 4] {
    CANONICAL_WIDTHS.map(|w| make_spec(w).expect("canonical widths divide the age span"))
}

pub fn quantize(age: AgeLabel, spec: &GranularitySpec) -> Result<usize, GranularityError> {
    let (years, _) = spec.clamp_age(age)?;
    Ok(((years - spec.age_min) / spec.bin_width) as usize)
}

/// Mean of the integer ages covered by `class_index`.
pub fn representative(class_index: usize, spec: &GranularitySpec) -> Result<f64, GranularityError> {
    if class_index >= spec.num_classes() {
        return Err(GranularityError::ClassOutOfRange {
            index: class_index,
            num_classes: spec.num_classes(),
        });
    }
    Ok(spec.representative_unchecked(class_index))
}

/// Maps a class of a fine binning onto the enclosing class of a coarser one.
pub fn coarsen(fine_index: usize, fine: &GranularitySpec, coarse: &GranularitySpec) -> Result<usize, GranularityError> {
    if !coarse.bin_width.is_multiple_of(fine.bin_width)
        || coarse.age_min != fine.age_min
        || coarse.age_max != fine.age_max
    {
        return Err(GranularityError::NotNested {
            fine: fine.bin_width,
            coarse: coarse.bin_width,
        });
    }
    if fine_index >= fine.num_classes() {
        return Err(GranularityError::ClassOutOfRange {
            index: fine_index,
            num_classes: fine.num_classes(),
        });
    }
    Ok(fine_index * fine.bin_width as usize / coarse.bin_width as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Enumerates every bin as an explicit interval and searches for the age.
    fn brute_force_class(age: u32, width: u32) -> usize {
        let mut lo = AGE_MIN;
        let mut class = 0;
        loop {
            let hi = lo + width - 1;
            if (lo..=hi).contains(&age) {
                return class;
            }
            lo = hi + 1;
            class += 1;
        }
    }

    #[test]
    fn class_counts() {
        assert_eq!(make_spec(1).unwrap().num_classes(), 100);
        assert_eq!(make_spec(5).unwrap().num_classes(), 20);
        assert_eq!(make_spec(10).unwrap().num_classes(), 10);
        assert_eq!(make_spec(20).unwrap().num_classes(), 5);
    }

    #[test]
    fn rejects_non_divisor() {
        assert_eq!(
            make_spec(7),
            Err(GranularityError::Divisibility {
                bin_width: 7,
                span: 100
            })
        );
        assert_eq!(make_spec(0), Err(GranularityError::ZeroWidth));
    }

    #[test]
    fn age_44_example() {
        let got: Vec<usize> = canonical_specs()
            .iter()
            .map(|s| quantize(AgeLabel::new(44.0), s).unwrap())
            .collect();
        assert_eq!(got, vec![43, 8, 4, 2]);
    }

    #[test]
    fn quantize_edges() {
        for spec in canonical_specs() {
            assert_eq!(quantize(AgeLabel::new(1.0), &spec).unwrap(), 0);
        }
        assert_eq!(quantize(AgeLabel::new(100.0), &make_spec(20).unwrap()).unwrap(), 4);
    }

    #[test]
    fn quantize_matches_enumeration() {
        for width in CANONICAL_WIDTHS {
            let spec = make_spec(width).unwrap();
            for age in AGE_MIN..=AGE_MAX {
                assert_eq!(
                    quantize(AgeLabel::new(age as f64), &spec).unwrap(),
                    brute_force_class(age, width),
                    "age {age} width {width}"
                );
            }
        }
    }

    #[test]
    fn rounding_and_clamping() {
        let spec = make_spec(1).unwrap();
        assert_eq!(quantize(AgeLabel::new(43.5), &spec).unwrap(), 43);
        assert_eq!(quantize(AgeLabel::new(43.49), &spec).unwrap(), 42);
        assert_eq!(quantize(AgeLabel::new(0.0), &spec).unwrap(), 0);
        assert_eq!(quantize(AgeLabel::new(-3.0), &spec).unwrap(), 0);
        assert_eq!(quantize(AgeLabel::new(130.0), &spec).unwrap(), 99);
        assert_eq!(spec.clamp_age(AgeLabel::new(0.2)).unwrap(), (1, true));
        assert_eq!(spec.clamp_age(AgeLabel::new(100.4)).unwrap(), (100, false));
        assert!(matches!(
            quantize(AgeLabel::new(f64::NAN), &spec),
            Err(GranularityError::NonFiniteAge(_))
        ));
        assert!(quantize(AgeLabel::new(f64::INFINITY), &spec).is_err());
    }

    #[test]
    fn representatives_are_bin_means() {
        for width in CANONICAL_WIDTHS {
            let spec = make_spec(width).unwrap();
            for k in 0..spec.num_classes() {
                let lo = AGE_MIN + k as u32 * width;
                let mean = (lo..lo + width).map(f64::from).sum::<f64>() / width as f64;
                assert_eq!(representative(k, &spec).unwrap(), mean);
            }
        }
        assert_eq!(representative(8, &make_spec(5).unwrap()).unwrap(), 43.0);
        assert_eq!(representative(43, &make_spec(1).unwrap()).unwrap(), 44.0);
        assert_eq!(representative(2, &make_spec(20).unwrap()).unwrap(), 50.5);
        assert!(representative(5, &make_spec(20).unwrap()).is_err());
    }

    #[test]
    fn coarsen_examples() {
        let w1 = make_spec(1).unwrap();
        let w5 = make_spec(5).unwrap();
        let w10 = make_spec(10).unwrap();
        let w20 = make_spec(20).unwrap();
        assert_eq!(coarsen(43, &w1, &w5).unwrap(), 8);
        assert_eq!(coarsen(8, &w5, &w20).unwrap(), 2);
        assert_eq!(coarsen(0, &w5, &w10).unwrap(), 0);
        assert_eq!(
            coarsen(3, &w10, &w5),
            Err(GranularityError::NotNested { fine: 10, coarse: 5 })
        );
        assert!(coarsen(5, &w10, &w20).is_ok());
        assert!(coarsen(10, &w10, &w20).is_err());
        let w25 = make_spec(25).unwrap();
        assert!(coarsen(1, &w10, &w25).is_err());
    }

    #[test]
    fn hierarchy_is_consistent() {
        let specs = canonical_specs();
        for fine in &specs {
            for coarse in &specs {
                if coarse.bin_width() % fine.bin_width() != 0 {
                    continue;
                }
                for age in AGE_MIN..=AGE_MAX {
                    let a = AgeLabel::new(age as f64);
                    assert_eq!(
                        coarsen(quantize(a, fine).unwrap(), fine, coarse).unwrap(),
                        quantize(a, coarse).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn representative_roundtrip_and_distance() {
        for spec in canonical_specs() {
            for k in 0..spec.num_classes() {
                let rep = representative(k, &spec).unwrap();
                assert_eq!(quantize(AgeLabel::new(rep), &spec).unwrap(), k);
            }
            let half = (spec.bin_width() as f64 - 1.0) / 2.0;
            for age in AGE_MIN..=AGE_MAX {
                let k = quantize(AgeLabel::new(age as f64), &spec).unwrap();
                assert!((representative(k, &spec).unwrap() - age as f64).abs() <= half);
            }
        }
    }
}
