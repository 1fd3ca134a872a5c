use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChoiceDistribution, DecoderBackend, Query, Scores};
use crate::error::{BackendError, Result};
use crate::io::{read_jsonl, write_jsonl};

/// One row of an oracle table file. A row without `conditioning` is the
/// instance's default, answered for any conditioning text not listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<String>,
    pub probs: Vec<f64>,
}

/// Lookup-table decoder keyed by (instance id, conditioning text).
#[derive(Debug, Clone, Default)]
pub struct TableOracleBackend {
    id: String,
    table: HashMap<(String, String), ChoiceDistribution>,
    defaults: HashMap<String, ChoiceDistribution>,
}

impl TableOracleBackend {
    pub fn new(id: impl Into<String>) -> Self {
        TableOracleBackend {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, instance_id: &str, conditioning: &str, dist: ChoiceDistribution) {
        self.table
            .insert((instance_id.to_string(), conditioning.to_string()), dist);
    }

    pub fn insert_default(&mut self, instance_id: &str, dist: ChoiceDistribution) {
        self.defaults.insert(instance_id.to_string(), dist);
    }

    pub fn lookup(&self, instance_id: &str, conditioning: &str) -> Option<&ChoiceDistribution> {
        self.table
            .get(&(instance_id.to_string(), conditioning.to_string()))
            .or_else(|| self.defaults.get(instance_id))
    }

    pub fn len(&self) -> usize {
        self.table.len() + self.defaults.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self> {
        let mut backend = Self::new(id);
        for row in read_jsonl::<OracleRow>(path, &["instance_id", "conditioning", "probs"], true)? {
            let dist = ChoiceDistribution::from_probs(row.value.probs).map_err(|e| crate::error::Error::Parse {
                path: path.to_path_buf(),
                line: row.line,
                message: e.to_string(),
            })?;
            match row.value.conditioning {
                Some(text) => backend.insert(&row.value.instance_id, &text, dist),
                None => backend.insert_default(&row.value.instance_id, dist),
            }
        }
        Ok(backend)
    }

    /// Rows sorted by (instance, conditioning), defaults first.
    pub fn rows(&self) -> Vec<OracleRow> {
        let mut rows: Vec<OracleRow> = self
            .defaults
            .iter()
            .map(|(i, d)| OracleRow {
                instance_id: i.clone(),
                conditioning: None,
                probs: d.probs().to_vec(),
            })
            .chain(self.table.iter().map(|((i, c), d)| OracleRow {
                instance_id: i.clone(),
                conditioning: Some(c.clone()),
                probs: d.probs().to_vec(),
            }))
            .collect();
        rows.sort_by(|a, b| (&a.instance_id, &a.conditioning).cmp(&(&b.instance_id, &b.conditioning)));
        rows
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.rows())
    }
}

impl DecoderBackend for TableOracleBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score(&self, query: &Query<'_>) -> Result<Scores, BackendError> {
        self.lookup(&query.instance.id, query.conditioning)
            .map(|d| Scores::Probabilities(d.probs().to_vec()))
            .ok_or_else(|| {
                BackendError::Fatal(format!(
                    "oracle has no row for instance `{}` with conditioning {:?}",
                    query.instance.id, query.conditioning
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;

    #[test]
    fn defaults_answer_misses_and_roundtrip_through_disk() {
        let mut t = TableOracleBackend::new("o");
        t.insert("i", "g1", ChoiceDistribution::from_probs(vec![0.2, 0.8]).unwrap());
        t.insert_default("i", ChoiceDistribution::from_probs(vec![0.5, 0.5]).unwrap());
        let inst = Instance::new("i", "p", vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(
            t.score(&Query::new(&inst, "g1")).unwrap(),
            Scores::Probabilities(vec![0.2, 0.8])
        );
        assert_eq!(
            t.score(&Query::new(&inst, "zzz")).unwrap(),
            Scores::Probabilities(vec![0.5, 0.5])
        );
        let other = Instance::new("j", "p", vec!["a".into(), "b".into()]).unwrap();
        assert!(t.score(&Query::new(&other, "")).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.jsonl");
        t.save(&path).unwrap();
        let back = TableOracleBackend::load("o", &path).unwrap();
        assert_eq!(back.rows(), t.rows());
    }
}
