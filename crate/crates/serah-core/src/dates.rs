//! Acquisition date codes: calendar year plus day-of-year.

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DateCode {
    pub year: i32,
    /// Day of year, 1..=366.
    pub doy: u32,
}

impl DateCode {
    pub fn new(year: i32, doy: u32) -> Result<DateCode> {
        if !(1..=366).contains(&doy) {
            return Err(Error::InvalidArgument(format!("day-of-year {doy} outside 1..=366")));
        }
        Ok(DateCode { year, doy })
    }

    pub fn from_iso(s: &str) -> Result<DateCode> {
        let d = chrono::NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
            .map_err(|e| Error::InvalidArgument(format!("bad ISO date {s:?}: {e}")))?;
        Ok(DateCode { year: d.year(), doy: d.ordinal() })
    }

    pub fn to_iso(self) -> String {
        let d = chrono::NaiveDate::from_yo_opt(self.year, self.doy).expect("valid date code");
        d.format("%Y-%m-%d").to_string()
    }

    /// Days since the common-era epoch; used for acquisition distances.
    pub fn abs_days(self) -> i64 {
        let d = chrono::NaiveDate::from_yo_opt(self.year, self.doy).expect("valid date code");
        d.num_days_from_ce() as i64
    }

    pub fn distance_days(self, other: DateCode) -> i64 {
        (self.abs_days() - other.abs_days()).abs()
    }

    /// Shifts by a signed number of days.
    pub fn offset_days(self, days: i64) -> DateCode {
        let d = chrono::NaiveDate::from_yo_opt(self.year, self.doy).expect("valid date code")
            + chrono::Duration::days(days);
        DateCode { year: d.year(), doy: d.ordinal() }
    }
}

impl TryFrom<String> for DateCode {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        DateCode::from_iso(&s).map_err(|e| e.to_string())
    }
}

impl From<DateCode> for String {
    fn from(d: DateCode) -> String {
        d.to_iso()
    }
}

impl std::fmt::Display for DateCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_iso())
    }
}
