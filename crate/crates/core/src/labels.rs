use serde::{Deserialize, Serialize};

use crate::error::CorpusError;

/// The fourteen built-in destinations, in label order.
///
/// Spellings are kept verbatim; they double as on-disk directory names.
pub const DESTINATIONS: [(&str, &str); 14] = [
    ("Bragatheeswarar Temple", "India"),
    ("Giza Plateau", "Egypt"),
    ("Lake Pichhola", "India"),
    ("Machu Picchu", "Peru"),
    ("Mahabalipuram", "India"),
    ("Marina Beach", "India"),
    ("Meenakshiamman Temple", "India"),
    ("Nilgiri Railway", "India"),
    ("Taj Mahal", "India"),
    ("Pulpit Rock", "Norway"),
    ("Troll Tongue", "Norway"),
    ("Palace of LostCity", "South Africa"),
    ("Petra", "Jordan"),
    ("Leaning Tower of Pisa", "Italy"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub index: usize,
    pub name: String,
    pub country: String,
}

/// Ordered class list; indices are contiguous from 0 and names unique.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelEntry>", into = "Vec<LabelEntry>")]
pub struct LabelMap {
    entries: Vec<LabelEntry>,
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap::new(DESTINATIONS.iter().map(|&(n, c)| (n.to_string(), c.to_string())))
            .expect("built-in label map is valid")
    }
}

impl LabelMap {
    pub fn new(
        pairs: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CorpusError> {
        let entries: Vec<LabelEntry> = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (name, country))| LabelEntry {
                index,
                name,
                country,
            })
            .collect();
        Self::try_from(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&LabelEntry> {
        self.entries.get(index)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.get(index).map(|e| e.name.as_str())
    }

    pub fn country(&self, index: usize) -> Option<&str> {
        self.get(index).map(|e| e.country.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

impl TryFrom<Vec<LabelEntry>> for LabelMap {
    type Error = CorpusError;

    fn try_from(entries: Vec<LabelEntry>) -> Result<Self, Self::Error> {
        if entries.is_empty() {
            return Err(CorpusError::LabelMap("label map is empty".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(CorpusError::LabelMap(format!(
                    "entry {i} has index {}; indices must be contiguous from 0",
                    e.index
                )));
            }
            if e.name.is_empty() {
                return Err(CorpusError::LabelMap(format!("entry {i} has an empty name")));
            }
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(CorpusError::LabelMap(format!("duplicate name {:?}", e.name)));
            }
        }
        Ok(LabelMap { entries })
    }
}

impl From<LabelMap> for Vec<LabelEntry> {
    fn from(m: LabelMap) -> Self {
        m.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_destination_table() {
        let m = LabelMap::default();
        assert_eq!(m.len(), 14);
        assert_eq!(m.name(0), Some("Bragatheeswarar Temple"));
        assert_eq!(m.name(8), Some("Taj Mahal"));
        assert_eq!(m.country(8), Some("India"));
        assert_eq!(m.name(11), Some("Palace of LostCity"));
        assert_eq!(m.country(11), Some("South Africa"));
        assert_eq!(m.name(13), Some("Leaning Tower of Pisa"));
        assert_eq!(m.country(13), Some("Italy"));
        assert_eq!(m.index_of("Petra"), Some(12));
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(LabelMap::new(Vec::<(String, String)>::new()).is_err());
        let dup = vec![
            ("A".to_string(), "X".to_string()),
            ("A".to_string(), "Y".to_string()),
        ];
        assert!(LabelMap::new(dup).is_err());
    }

    #[test]
    fn serde_enforces_invariants() {
        let m = LabelMap::default();
        let json = serde_json::to_string(&m).unwrap();
        let back: LabelMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let gap = r#"[{"index":0,"name":"a","country":"x"},{"index":2,"name":"b","country":"y"}]"#;
        assert!(serde_json::from_str::<LabelMap>(gap).is_err());
    }
}
