//! Calendar months as (year, month) pairs with linear index arithmetic.
//!
//! All joins between series are by calendar pair; the linear index (months
//! since year 0) exists only for offset arithmetic, so monthly data never
//! touches day- or timezone-level ambiguity.

use serde::{Deserialize, Serialize};
use std::fmt;

/// A calendar month. Ordering follows chronology.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct MonthKey {
    pub year: i32,
    /// 1..=12
    pub month: u8,
}

impl MonthKey {
    pub fn new(year: i32, month: u8) -> Option<MonthKey> {
        if (1..=12).contains(&month) {
            Some(MonthKey { year, month })
        } else {
            None
        }
    }

    /// Months since January of year 0.
    pub fn index(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_index(idx: i64) -> MonthKey {
        MonthKey {
            year: idx.div_euclid(12) as i32,
            month: (idx.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn plus(self, months: i64) -> MonthKey {
        MonthKey::from_index(self.index() + months)
    }

    pub fn next(self) -> MonthKey {
        self.plus(1)
    }

    /// self - other, in whole months.
    pub fn diff(self, other: MonthKey) -> i64 {
        self.index() - other.index()
    }
}

impl fmt::Display for MonthKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trips() {
        for year in [-1, 0, 1999, 2015] {
            for month in 1..=12u8 {
                let m = MonthKey::new(year, month).unwrap();
                assert_eq!(MonthKey::from_index(m.index()), m);
            }
        }
    }

    #[test]
    fn plus_crosses_year_boundaries() {
        let m = MonthKey::new(2014, 11).unwrap();
        assert_eq!(m.plus(3), MonthKey::new(2015, 2).unwrap());
        assert_eq!(m.plus(-11), MonthKey::new(2013, 12).unwrap());
        assert_eq!(m.plus(3).diff(m), 3);
    }

    #[test]
    fn rejects_bad_month() {
        assert!(MonthKey::new(2015, 0).is_none());
        assert!(MonthKey::new(2015, 13).is_none());
    }

    #[test]
    fn ordering_is_chronological() {
        let a = MonthKey::new(2014, 12).unwrap();
        let b = MonthKey::new(2015, 1).unwrap();
        assert!(a < b);
    }
}
