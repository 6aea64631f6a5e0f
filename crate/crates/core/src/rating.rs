//! The five-level content rating scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Ordered audience-suitability label, `G < PG < M < MA15+ < R18+`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContentRating {
    G,
    PG,
    M,
    MA15,
    R18,
}

impl ContentRating {
    pub const ALL: [ContentRating; 5] = [
        ContentRating::G,
        ContentRating::PG,
        ContentRating::M,
        ContentRating::MA15,
        ContentRating::R18,
    ];
    pub const COUNT: usize = 5;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    /// Clamps an arbitrary signed score onto the scale.
    pub fn from_clamped(score: i32) -> Self {
        Self::ALL[score.clamp(0, 4) as usize]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContentRating::G => "G",
            ContentRating::PG => "PG",
            ContentRating::M => "M",
            ContentRating::MA15 => "MA15+",
            ContentRating::R18 => "R18+",
        }
    }
}

/// Signed ordinal distance `pred - declared`.
pub fn rating_distance(pred: ContentRating, declared: ContentRating) -> i32 {
    pred.ordinal() as i32 - declared.ordinal() as i32
}

impl fmt::Display for ContentRating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentRating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::UnknownRating(s.to_string()))
    }
}

impl Serialize for ContentRating {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ContentRating {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
