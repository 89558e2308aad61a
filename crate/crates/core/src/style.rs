use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bpe::special;

/// Style control input: SOURCE (informal) or TARGET (formal).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleLabel {
    Source,
    Target,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 2] = [StyleLabel::Source, StyleLabel::Target];

    pub fn opposite(self) -> StyleLabel {
        match self {
            StyleLabel::Source => StyleLabel::Target,
            StyleLabel::Target => StyleLabel::Source,
        }
    }

    /// Reserved control token id.
    pub fn token(self) -> u32 {
        match self {
            StyleLabel::Source => special::STYLE_SOURCE,
            StyleLabel::Target => special::STYLE_TARGET,
        }
    }

    pub fn index(self) -> usize {
        match self {
            StyleLabel::Source => 0,
            StyleLabel::Target => 1,
        }
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleLabel::Source => "source",
            StyleLabel::Target => "target",
        })
    }
}

impl FromStr for StyleLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "source" | "informal" => Ok(StyleLabel::Source),
            "t" | "target" | "formal" => Ok(StyleLabel::Target),
            other => Err(format!("unknown style {other:?} (expected s or t)")),
        }
    }
}

/// Transfer direction, named by the style it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "s2t")]
    SourceToTarget,
    #[serde(rename = "t2s")]
    TargetToSource,
}

impl Direction {
    pub fn to(self) -> StyleLabel {
        match self {
            Direction::SourceToTarget => StyleLabel::Target,
            Direction::TargetToSource => StyleLabel::Source,
        }
    }

    pub fn from(self) -> StyleLabel {
        self.to().opposite()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::SourceToTarget => "s2t",
            Direction::TargetToSource => "t2s",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s2t" => Ok(Direction::SourceToTarget),
            "t2s" => Ok(Direction::TargetToSource),
            other => Err(format!("unknown direction {other:?} (expected s2t or t2s)")),
        }
    }
}
