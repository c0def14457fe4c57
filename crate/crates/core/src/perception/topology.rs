//! Service topology: alias table for entity resolution plus dependency edges.
//!
//! The file is TOML or JSON with an `entities` list (`kind`,
//! `canonical_name`, `aliases`) and an `edges` list (`from`, `to`). Cycles are
//! fine; real dependency graphs have them.

use super::types::{EntityKind, EntityRef, Observation};
use super::PerceptionError;
use crate::domain::phrase_haystack;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEntity {
    pub kind: EntityKind,
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEdge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    #[serde(default)]
    pub entities: Vec<TopologyEntity>,
    #[serde(default)]
    pub edges: Vec<TopologyEdge>,
}

#[derive(Debug, Clone)]
struct Alias {
    /// Padded, lowercased form as produced by [`phrase_haystack`].
    needle: String,
    surface: String,
    entity: usize,
}

/// Loaded topology with a longest-first alias table.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    file: TopologyFile,
    aliases: Vec<Alias>,
    neighbors: BTreeMap<String, BTreeSet<String>>,
}

impl Topology {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_file(file: TopologyFile) -> Self {
        let mut aliases = Vec::new();
        for (idx, e) in file.entities.iter().enumerate() {
            let mut surfaces = vec![e.canonical_name.clone()];
            surfaces.extend(e.aliases.iter().cloned());
            for surface in surfaces {
                let needle = phrase_haystack(&surface);
                if needle.trim().is_empty() {
                    continue;
                }
                aliases.push(Alias {
                    needle,
                    surface,
                    entity: idx,
                });
            }
        }
        // Longest alias first; ties resolved by text so the table is stable.
        aliases.sort_by(|a, b| {
            b.needle
                .len()
                .cmp(&a.needle.len())
                .then_with(|| a.needle.cmp(&b.needle))
                .then_with(|| a.entity.cmp(&b.entity))
        });
        let mut neighbors: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for edge in &file.edges {
            neighbors
                .entry(edge.from.clone())
                .or_default()
                .insert(edge.to.clone());
            neighbors
                .entry(edge.to.clone())
                .or_default()
                .insert(edge.from.clone());
        }
        Self {
            file,
            aliases,
            neighbors,
        }
    }

    pub fn parse(text: &str) -> Result<Self, PerceptionError> {
        let trimmed = text.trim_start();
        let file: TopologyFile = if trimmed.starts_with('{') {
            serde_json::from_str(text)
                .map_err(|e| PerceptionError::TopologyUnavailable(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| PerceptionError::TopologyUnavailable(e.to_string()))?
        };
        Ok(Self::from_file(file))
    }

    pub fn load(path: &Path) -> Result<Self, PerceptionError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PerceptionError::TopologyUnavailable(format!("{}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn file(&self) -> &TopologyFile {
        &self.file
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty()
    }

    /// Entity by exact canonical name or any alias, case-insensitively.
    pub fn resolve(&self, surface: &str) -> Option<&TopologyEntity> {
        let needle = phrase_haystack(surface);
        self.aliases
            .iter()
            .find(|a| a.needle == needle)
            .map(|a| &self.file.entities[a.entity])
    }

    /// Entities mentioned in `text`, longest alias first, non-overlapping.
    pub fn mentions(&self, text: &str) -> Vec<EntityRef> {
        let hay = phrase_haystack(text);
        let mut claimed: Vec<(usize, usize)> = Vec::new();
        let mut found: Vec<(usize, EntityRef)> = Vec::new();
        for alias in &self.aliases {
            let mut from = 0;
            while let Some(pos) = hay[from..].find(&alias.needle) {
                let start = from + pos;
                // Needles carry a leading and trailing space; the word span
                // excludes them so adjacent mentions do not overlap.
                let span = (start + 1, start + alias.needle.len() - 1);
                from = start + 1;
                if claimed.iter().any(|&(s, e)| span.0 < e && s < span.1) {
                    continue;
                }
                claimed.push(span);
                let entity = &self.file.entities[alias.entity];
                match found.iter_mut().find(|(_, r)| {
                    r.kind == entity.kind && r.canonical_name == entity.canonical_name
                }) {
                    Some((first, r)) => {
                        *first = (*first).min(span.0);
                        if !r.aliases_matched.contains(&alias.surface) {
                            r.aliases_matched.push(alias.surface.clone());
                        }
                    }
                    None => found.push((
                        span.0,
                        EntityRef {
                            kind: entity.kind,
                            canonical_name: entity.canonical_name.clone(),
                            aliases_matched: vec![alias.surface.clone()],
                            unresolved: false,
                        },
                    )),
                }
            }
        }
        found.sort_by_key(|(pos, _)| *pos);
        found.into_iter().map(|(_, r)| r).collect()
    }

    /// One-hop neighbors in either edge direction.
    pub fn neighbors(&self, canonical_name: &str) -> impl Iterator<Item = &String> {
        self.neighbors.get(canonical_name).into_iter().flatten()
    }
}

/// Attribute keys treated as explicit entity mentions.
const ENTITY_ATTRS: &[(&str, EntityKind)] = &[
    ("service", EntityKind::Service),
    ("region", EntityKind::Region),
    ("component", EntityKind::Component),
    ("team", EntityKind::Team),
];

/// Populates entities and 1-hop dependency context.
///
/// Payload mentions are resolved by longest alias match. Structured
/// attributes (`service`, `region`, ...) are resolved the same way, and when
/// the topology does not know them they are kept under their surface form and
/// flagged unresolved.
pub fn enrich(mut obs: Observation, topology: &Topology) -> Result<Observation, PerceptionError> {
    if topology.is_empty() {
        return Err(PerceptionError::TopologyUnavailable(
            "alias table is empty".into(),
        ));
    }
    let mut entities = topology.mentions(&obs.signal.payload);
    for (key, kind) in ENTITY_ATTRS {
        let Some(value) = obs.signal.attr(key) else {
            continue;
        };
        let resolved = topology.resolve(value).map(|e| EntityRef {
            kind: e.kind,
            canonical_name: e.canonical_name.clone(),
            aliases_matched: vec![value.to_string()],
            unresolved: false,
        });
        let entity = resolved.unwrap_or_else(|| EntityRef {
            kind: *kind,
            canonical_name: value.trim().to_string(),
            aliases_matched: vec![value.to_string()],
            unresolved: true,
        });
        if !entities.iter().any(|e| e.same_entity(&entity)) {
            entities.push(entity);
        }
    }
    let mut deps = BTreeSet::new();
    for e in entities.iter().filter(|e| !e.unresolved) {
        deps.extend(topology.neighbors(&e.canonical_name).cloned());
    }
    for e in &entities {
        deps.remove(&e.canonical_name);
    }
    obs.entities = entities;
    obs.dependency_context = deps.into_iter().collect();
    Ok(obs)
}

/// Attribute-only entities, used when no topology is loaded.
pub fn entities_from_attrs(obs: &Observation) -> Vec<EntityRef> {
    ENTITY_ATTRS
        .iter()
        .filter_map(|(key, kind)| {
            obs.signal.attr(key).map(|v| EntityRef {
                kind: *kind,
                canonical_name: v.trim().to_string(),
                aliases_matched: vec![v.to_string()],
                unresolved: true,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FIXTURE: &str = r#"
[[entities]]
kind = "component"
canonical_name = "DirectDrive"
aliases = ["dd-cluster", "direct drive"]

[[entities]]
kind = "service"
canonical_name = "Storage"
aliases = ["storage"]

[[entities]]
kind = "service"
canonical_name = "Compute"
aliases = []

[[entities]]
kind = "region"
canonical_name = "westus2"
aliases = ["west us 2"]

[[entities]]
kind = "team"
canonical_name = "Facilities"
aliases = ["facilities team", "dc ops"]

[[edges]]
from = "DirectDrive"
to = "Storage"

[[edges]]
from = "Compute"
to = "DirectDrive"
"#;

    #[test]
    fn longest_alias_wins() {
        let topo = Topology::parse(FIXTURE).unwrap();
        let m = topo.mentions("Facilities team reports dd-cluster hot in west us 2");
        let names: Vec<&str> = m.iter().map(|e| e.canonical_name.as_str()).collect();
        assert_eq!(names, ["Facilities", "DirectDrive", "westus2"]);
        assert_eq!(m[0].aliases_matched, ["facilities team"]);
    }

    #[test]
    fn alias_must_match_whole_words() {
        let topo = Topology::parse(FIXTURE).unwrap();
        assert!(topo
            .mentions("storageless compute")
            .iter()
            .all(|e| e.canonical_name != "Storage"));
    }

    #[test]
    fn json_topology_parses() {
        let json = r#"{"entities":[{"kind":"service","canonical_name":"A","aliases":["a-svc"]}],"edges":[]}"#;
        let topo = Topology::parse(json).unwrap();
        assert_eq!(topo.resolve("A-SVC").unwrap().canonical_name, "A");
    }

    #[test]
    fn neighbors_are_undirected() {
        let topo = Topology::parse(FIXTURE).unwrap();
        let n: Vec<&String> = topo.neighbors("DirectDrive").collect();
        assert_eq!(n, ["Compute", "Storage"]);
    }
}
