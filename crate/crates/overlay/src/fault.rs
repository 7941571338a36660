//! Scheduled kills of volunteers, as read from a JSON plan file:
//! `[{"at_ms": 5000, "select": "leaf", "count": 2}, ...]`.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::id::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Members processing jobs (no children).
    Leaf,
    /// Members with at least one child. Never the root.
    Coordinator,
    Id(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub at_ms: u64,
    pub select: Selector,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

impl Fault {
    pub fn at(&self) -> Duration {
        Duration::from_millis(self.at_ms)
    }
}

pub type FaultPlan = Vec<Fault>;

pub fn parse_plan(json: &str) -> Result<FaultPlan, serde_json::Error> {
    let mut plan: FaultPlan = serde_json::from_str(json)?;
    plan.sort_by_key(|f| f.at_ms);
    Ok(plan)
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Leaf => f.write_str("leaf"),
            Selector::Coordinator => f.write_str("coordinator"),
            Selector::Id(id) => write!(f, "id:{id}"),
        }
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leaf" => Ok(Selector::Leaf),
            "coordinator" => Ok(Selector::Coordinator),
            _ => s
                .strip_prefix("id:")
                .and_then(|h| h.parse().ok())
                .map(Selector::Id)
                .ok_or_else(|| {
                    format!("bad selector {s:?}: expected leaf, coordinator or id:<16 hex>")
                }),
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_plan_files() {
        let plan = parse_plan(
            r#"[{"at_ms":900,"select":"id:00000000000000ff","count":1},
                {"at_ms":100,"select":"leaf","count":3},
                {"at_ms":500,"select":"coordinator"}]"#,
        )
        .unwrap();
        assert_eq!(plan[0].select, Selector::Leaf);
        assert_eq!(plan[0].count, 3);
        assert_eq!(plan[1].count, 1);
        assert_eq!(plan[2].select, Selector::Id(NodeId(255)));
        assert!(parse_plan(r#"[{"at_ms":1,"select":"root"}]"#).is_err());
        assert!(parse_plan(r#"[{"at_ms":1,"select":"id:zz"}]"#).is_err());
    }
}
