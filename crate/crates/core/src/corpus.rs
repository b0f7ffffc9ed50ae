//! Record data model, CSV ingestion/export and the synthetic corruption
//! generator used for desk-scale experiments.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered attribute names shared by every record of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    attributes: Vec<String>,
}

impl Schema {
    pub fn new<S: Into<String>>(attributes: impl IntoIterator<Item = S>) -> Result<Self> {
        let attributes: Vec<String> = attributes.into_iter().map(Into::into).collect();
        if attributes.is_empty() {
            return Err(Error::Schema("schema has no attributes".into()));
        }
        let mut seen = HashSet::new();
        for name in &attributes {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("attribute `{name}` appears twice")));
            }
        }
        Ok(Self { attributes })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Attribute values aligned with the schema; an empty string is a missing value.
    pub values: Vec<String>,
    pub cluster_id: Option<String>,
}

impl Record {
    pub fn value<'a>(&'a self, schema: &Schema, attribute: &str) -> Option<&'a str> {
        schema.position(attribute).map(|i| self.values[i].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: Schema,
    pub records: Vec<Record>,
    pub has_truth: bool,
    /// Column names used on export.
    pub id_column: String,
    pub truth_column: String,
}

impl Corpus {
    /// Builds a corpus, checking record shape, id uniqueness and truth coverage.
    pub fn new(schema: Schema, records: Vec<Record>, has_truth: bool) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for record in &records {
            if record.values.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "record `{}` has {} values, schema has {}",
                    record.id,
                    record.values.len(),
                    schema.len()
                )));
            }
            if has_truth && record.cluster_id.is_none() {
                return Err(Error::Schema(format!("record `{}` has no cluster_id", record.id)));
            }
            if !ids.insert(record.id.as_str()) {
                return Err(Error::DuplicateId(record.id.clone()));
            }
        }
        Ok(Self {
            schema,
            records,
            has_truth,
            id_column: "id".into(),
            truth_column: "cluster_id".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Sub-corpus holding the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            has_truth: self.has_truth,
            id_column: self.id_column.clone(),
            truth_column: self.truth_column.clone(),
        }
    }

    /// Number of unordered record pairs that share a cluster.
    pub fn true_pair_count(&self) -> usize {
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.records {
            if let Some(c) = &r.cluster_id {
                *sizes.entry(c.as_str()).or_default() += 1;
            }
        }
        sizes.values().map(|&n| n * n.saturating_sub(1) / 2).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec![self.id_column.as_str()];
        header.extend(self.schema.attributes().iter().map(String::as_str));
        if self.has_truth {
            header.push(self.truth_column.as_str());
        }
        out.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<&str> = vec![r.id.as_str()];
            row.extend(r.values.iter().map(String::as_str));
            if self.has_truth {
                row.push(r.cluster_id.as_deref().unwrap_or(""));
            }
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a corpus from CSV. Attribute order is the header order with the id
/// and truth columns removed.
pub fn load_csv(path: impl AsRef<Path>, id_column: &str, truth_column: Option<&str>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, id_column, truth_column)
}

pub fn read_csv<R: Read>(reader: R, id_column: &str, truth_column: Option<&str>) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Ingest { row: 1, message: e.to_string() })?
        .clone();
    let id_idx = header
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| Error::Ingest { row: 1, message: format!("id column `{id_column}` not in header") })?;
    let truth_idx = match truth_column {
        Some(t) => Some(header.iter().position(|h| h == t).ok_or_else(|| Error::Ingest {
            row: 1,
            message: format!("truth column `{t}` not in header"),
        })?),
        None => None,
    };
    let attr_idx: Vec<usize> = (0..header.len())
        .filter(|&i| i != id_idx && Some(i) != truth_idx)
        .collect();
    let schema = Schema::new(attr_idx.iter().map(|&i| header[i].to_string()))?;

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Ingest { row: line, message: e.to_string() }
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != header.len() {
            return Err(Error::Ingest {
                row: line,
                message: format!("expected {} columns, found {}", header.len(), row.len()),
            });
        }
        let id = row[id_idx].to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let cluster_id = match truth_idx {
            Some(t) if row[t].is_empty() => {
                return Err(Error::Ingest { row: line, message: "empty truth cell".into() })
            }
            Some(t) => Some(row[t].to_string()),
            None => None,
        };
        records.push(Record {
            id,
            values: attr_idx.iter().map(|&i| row[i].to_string()).collect(),
            cluster_id,
        });
    }
    let mut corpus = Corpus::new(schema, records, truth_idx.is_some())?;
    corpus.id_column = id_column.to_string();
    if let Some(t) = truth_column {
        corpus.truth_column = t.to_string();
    }
    Ok(corpus)
}

/// Probabilities of each corruption operator, applied independently per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub typo_rate: f64,
    pub field_drop_rate: f64,
    pub abbreviation_rate: f64,
    pub numeric_reformat_rate: f64,
    pub duplicates_per_entity: usize,
    /// Probability that a new entity is a different edition of an earlier one
    /// (same title and author, different version marker and price). These
    /// produce look-alike non-duplicates.
    pub edition_variant_rate: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self::moderate(0)
    }
}

impl CorruptionConfig {
    pub fn none(duplicates_per_entity: usize, seed: u64) -> Self {
        Self {
            typo_rate: 0.0,
            field_drop_rate: 0.0,
            abbreviation_rate: 0.0,
            numeric_reformat_rate: 0.0,
            duplicates_per_entity,
            edition_variant_rate: 0.0,
            seed,
        }
    }

    /// The corruption level used by the standard experiment corpus.
    pub fn moderate(seed: u64) -> Self {
        Self {
            typo_rate: 0.2,
            field_drop_rate: 0.05,
            abbreviation_rate: 0.1,
            numeric_reformat_rate: 0.3,
            duplicates_per_entity: 2,
            edition_variant_rate: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("typo_rate", self.typo_rate),
            ("field_drop_rate", self.field_drop_rate),
            ("abbreviation_rate", self.abbreviation_rate),
            ("numeric_reformat_rate", self.numeric_reformat_rate),
            ("edition_variant_rate", self.edition_variant_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

const FIRST_NAMES: &[&str] = &[
    "alice", "bruno", "carmen", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas",
    "kavya", "liang", "marta", "nikolai", "olga", "pavel", "quinn", "rosa", "samir", "tomas",
    "ursula", "viktor", "wen", "ximena", "yusuf", "zora", "anders", "beatriz", "chen", "dario",
    "esther", "felix", "gordon", "helga", "igor", "julia", "kenji", "lucia", "mateo", "nadia",
];

const CATEGORY_HEADS: &[&str] = &[
    "dictionary", "handbook", "atlas", "novel", "anthology", "primer", "manual", "encyclopedia",
    "guide", "workbook", "reader", "grammar", "thesaurus", "almanac", "textbook", "compendium",
];

const CATEGORY_MODIFIERS: &[&str] = &[
    "medium-sized", "pocket", "illustrated", "concise", "student", "reference", "classic",
    "advanced", "junior", "bilingual", "historical", "technical", "practical", "annotated",
];

const ONSETS: &[&str] = &[
    "b", "br", "c", "ch", "d", "dr", "f", "g", "gr", "h", "j", "k", "l", "m", "n", "p", "pr", "qu",
    "r", "s", "sh", "st", "t", "tr", "v", "w", "x", "z",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ia", "ou", "ei"];
const CODAS: &[&str] = &["", "n", "r", "s", "l", "m", "nd", "ng", "t", "x"];

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(NUCLEI.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    w
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

const ORDINALS: &[&str] = &["1st", "2nd", "3rd", "4th", "5th", "6th", "7th", "8th"];

#[derive(Debug, Clone)]
struct Entity {
    base_title: String,
    author: String,
    category: String,
    version: Version,
    cents: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Version {
    None,
    Numbered(u32, u32),
    Edition(usize),
}

impl Entity {
    fn title(&self) -> String {
        match self.version {
            Version::None => self.base_title.clone(),
            Version::Numbered(major, minor) => format!("{} {major}.{minor}", self.base_title),
            Version::Edition(i) => format!("{} {} edition", self.base_title, ORDINALS[i]),
        }
    }

    fn price(&self) -> String {
        format!("{}.{:02}", self.cents / 100, self.cents % 100)
    }

    fn values(&self) -> Vec<String> {
        vec![self.title(), self.author.clone(), self.category.clone(), self.price()]
    }
}

fn fresh_entity<R: Rng>(rng: &mut R, lexicon: &[String], surnames: &[String]) -> Entity {
    let n_words = rng.random_range(2..=3);
    let words: Vec<String> = (0..n_words).map(|_| capitalize(lexicon.choose(rng).unwrap())).collect();
    let author = format!(
        "{} {}",
        capitalize(FIRST_NAMES.choose(rng).unwrap()),
        capitalize(surnames.choose(rng).unwrap())
    );
    let category = format!(
        "{} {}",
        capitalize(CATEGORY_MODIFIERS.choose(rng).unwrap()),
        CATEGORY_HEADS.choose(rng).unwrap()
    );
    let version = match rng.random_range(0..3) {
        0 => Version::None,
        1 => Version::Numbered(rng.random_range(1..10), rng.random_range(0..10)),
        _ => Version::Edition(rng.random_range(0..ORDINALS.len())),
    };
    // Whole or half units between 5 and 250.
    let cents = rng.random_range(10..500) * 50;
    Entity { base_title: words.join(" "), author, category, version, cents }
}

fn variant_of<R: Rng>(rng: &mut R, base: &Entity) -> Entity {
    let mut e = base.clone();
    e.version = loop {
        let v = match rng.random_range(0..2) {
            0 => Version::Numbered(rng.random_range(1..10), rng.random_range(0..10)),
            _ => Version::Edition(rng.random_range(0..ORDINALS.len())),
        };
        if v != base.version {
            break v;
        }
    };
    e.cents = loop {
        let c = rng.random_range(10..500) * 50;
        if c != base.cents {
            break c;
        }
    };
    e
}

fn typo<R: Rng>(rng: &mut R, value: &str) -> String {
    let mut tokens: Vec<String> = value.split(' ').map(str::to_string).collect();
    let candidates: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.chars().count() >= 3 && t.chars().all(char::is_alphabetic))
        .map(|(i, _)| i)
        .collect();
    let Some(&which) = candidates.choose(rng) else {
        return value.to_string();
    };
    let mut chars: Vec<char> = tokens[which].chars().collect();
    let pos = rng.random_range(0..chars.len() - 1);
    if rng.random_bool(0.5) {
        chars.swap(pos, pos + 1);
    } else {
        let replacement = (b'a' + rng.random_range(0..26u8)) as char;
        chars[pos + 1] = replacement;
    }
    tokens[which] = chars.into_iter().collect();
    tokens.join(" ")
}

fn abbreviate(value: &str) -> String {
    let mut tokens: Vec<&str> = value.split(' ').collect();
    let Some(first) = tokens.first() else {
        return value.to_string();
    };
    let mut chars = first.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() && first.chars().count() > 1 && !first.ends_with('.') => {
            let initial = format!("{c}.");
            tokens[0] = "";
            let rest = tokens[1..].join(" ");
            if rest.is_empty() {
                initial
            } else {
                format!("{initial} {rest}")
            }
        }
        _ => value.to_string(),
    }
}

/// "85.00" becomes "85" and "85" becomes "85.00"; other values pass through.
fn reformat_numeric(value: &str) -> String {
    if let Some(whole) = value.strip_suffix(".00") {
        if !whole.is_empty() && whole.chars().all(|c| c.is_ascii_digit()) {
            return whole.to_string();
        }
    }
    if !value.is_empty() && value.chars().all(|c| c.is_ascii_digit()) {
        return format!("{value}.00");
    }
    value.to_string()
}

fn corrupt<R: Rng>(rng: &mut R, values: &[String], config: &CorruptionConfig) -> Vec<String> {
    values
        .iter()
        .map(|v| {
            let mut v = v.clone();
            if rng.random_bool(config.typo_rate) {
                v = typo(rng, &v);
            }
            if rng.random_bool(config.abbreviation_rate) {
                v = abbreviate(&v);
            }
            if rng.random_bool(config.numeric_reformat_rate) {
                v = reformat_numeric(&v);
            }
            if rng.random_bool(config.field_drop_rate) {
                v.clear();
            }
            v
        })
        .collect()
}

/// Generates a book-catalogue corpus with known duplicate clusters.
///
/// Each entity produces one clean record `e{entity}-0` followed by
/// `duplicates_per_entity` corrupted copies `e{entity}-{copy}`, all sharing the
/// cluster id `c{entity}`.
pub fn generate_synthetic(n_entities: usize, config: &CorruptionConfig) -> Result<Corpus> {
    if n_entities == 0 {
        return Err(Error::config("n_entities", "must be positive"));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lexicon: Vec<String> = (0..2500).map(|_| pseudo_word(&mut rng, 2)).collect();
    let surnames: Vec<String> = (0..600).map(|_| pseudo_word(&mut rng, 2)).collect();

    let schema = Schema::new(["title", "author", "category", "price"])?;
    let mut entities: Vec<Entity> = Vec::with_capacity(n_entities);
    let mut records = Vec::with_capacity(n_entities * (config.duplicates_per_entity + 1));
    for e in 0..n_entities {
        let entity = if !entities.is_empty() && rng.random_bool(config.edition_variant_rate) {
            let base = entities.choose(&mut rng).unwrap().clone();
            variant_of(&mut rng, &base)
        } else {
            fresh_entity(&mut rng, &lexicon, &surnames)
        };
        let clean = entity.values();
        let cluster = format!("c{e}");
        records.push(Record { id: format!("e{e}-0"), values: clean.clone(), cluster_id: Some(cluster.clone()) });
        for copy in 1..=config.duplicates_per_entity {
            records.push(Record {
                id: format!("e{e}-{copy}"),
                values: corrupt(&mut rng, &clean, config),
                cluster_id: Some(cluster.clone()),
            });
        }
        entities.push(entity);
    }
    Corpus::new(schema, records, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_file_maps_directly() {
        let csv = "id,title,price\n1,Xinhua Dictionary 4.0,85.00\n2,Oxford Atlas,12\n";
        let corpus = read_csv(csv.as_bytes(), "id", None).unwrap();
        assert_eq!(corpus.schema.attributes(), ["title", "price"]);
        assert_eq!(corpus.len(), 2);
        assert!(!corpus.has_truth);
        assert_eq!(corpus.records[1].values, ["Oxford Atlas", "12"]);
    }

    #[test]
    fn wrong_column_count_names_row() {
        let csv = "id,title,price\n1,a,1\n2,b\n3,c,3\n";
        match read_csv(csv.as_bytes(), "id", None) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let csv = "id,title\n1,a\n1,b\n";
        assert!(matches!(read_csv(csv.as_bytes(), "id", None), Err(Error::DuplicateId(id)) if id == "1"));
    }

    #[test]
    fn missing_id_column_rejected() {
        let csv = "key,title\n1,a\n";
        assert!(matches!(read_csv(csv.as_bytes(), "id", None), Err(Error::Ingest { row: 1, .. })));
    }

    #[test]
    fn truth_column_is_split_off_and_missing_cells_are_empty() {
        let csv = "title,id,cluster,price\nA,1,x,\nB,2,x,3\n";
        let corpus = read_csv(csv.as_bytes(), "id", Some("cluster")).unwrap();
        assert_eq!(corpus.schema.attributes(), ["title", "price"]);
        assert_eq!(corpus.records[0].values, ["A", ""]);
        assert_eq!(corpus.records[0].cluster_id.as_deref(), Some("x"));
        assert_eq!(corpus.true_pair_count(), 1);
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(Schema::new(Vec::<String>::new()).is_err());
        assert!(Schema::new(["a", "a"]).is_err());
    }

    #[test]
    fn no_duplicates_requested() {
        let corpus = generate_synthetic(10, &CorruptionConfig::none(0, 1)).unwrap();
        assert_eq!(corpus.len(), 10);
        assert_eq!(corpus.true_pair_count(), 0);
    }

    #[test]
    fn zero_corruption_copies_are_identical() {
        let corpus = generate_synthetic(10, &CorruptionConfig::none(1, 1)).unwrap();
        assert_eq!(corpus.len(), 20);
        for pair in corpus.records.chunks(2) {
            assert_eq!(pair[0].values, pair[1].values);
            assert_eq!(pair[0].cluster_id, pair[1].cluster_id);
            assert_ne!(pair[0].id, pair[1].id);
        }
        assert_eq!(corpus.records[3].id, "e1-1");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = CorruptionConfig::moderate(42);
        let a = generate_synthetic(50, &cfg).unwrap();
        let b = generate_synthetic(50, &cfg).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn rates_are_validated() {
        let mut cfg = CorruptionConfig::none(1, 0);
        cfg.typo_rate = 1.5;
        assert!(matches!(generate_synthetic(3, &cfg), Err(Error::Config { field, .. }) if field == "typo_rate"));
        assert!(generate_synthetic(0, &CorruptionConfig::none(1, 0)).is_err());
    }

    #[test]
    fn corruption_operators() {
        assert_eq!(abbreviate("Xinhua Dictionary"), "X. Dictionary");
        assert_eq!(abbreviate("X. Dictionary"), "X. Dictionary");
        assert_eq!(abbreviate("85.00"), "85.00");
        assert_eq!(reformat_numeric("85.00"), "85");
        assert_eq!(reformat_numeric("85"), "85.00");
        assert_eq!(reformat_numeric("85.50"), "85.50");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = typo(&mut rng, "Xinhua 4.0");
        assert_ne!(t, "Xinhua 4.0");
        assert!(t.ends_with(" 4.0"));
    }
}
