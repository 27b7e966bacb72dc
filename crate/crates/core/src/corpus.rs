//! Review and metadata ingestion, per-user sequence building, attribute
//! flattening and the BM25 catalog corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::vocab::split_words;
use crate::error::{Error, Result};
use crate::rng;

pub const UNKNOWN: &str = "Unknown";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub brand: String,
    pub price: String,
    /// Path or URL of the MAIN-variant large image.
    pub image_ref: String,
    /// Filled by the image featurizer; empty until then.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Milliseconds since epoch.
    pub timestamp: i64,
    pub rating: f64,
}

/// One user's chronologically ordered items. The last item is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<Item>,
}

impl InteractionSequence {
    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn history(&self) -> &[Item] {
        &self.items[..self.items.len() - 1]
    }

    pub fn target(&self) -> &Item {
        self.items.last().expect("sequence is never empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub item_id: String,
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<String>,
}

/// Key names for metadata records. Dotted names reach into nested objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaFieldMap {
    pub id: String,
    pub title: String,
    pub category: String,
    pub brand: String,
    pub price: String,
    pub images: String,
    pub image_variant: String,
    pub image_large: String,
    pub main_variant: String,
}

impl Default for MetaFieldMap {
    fn default() -> Self {
        Self {
            id: "parent_asin".into(),
            title: "title".into(),
            category: "main_category".into(),
            brand: "store".into(),
            price: "price".into(),
            images: "images".into(),
            image_variant: "variant".into(),
            image_large: "large".into(),
            main_variant: "MAIN".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewFieldMap {
    pub user: String,
    pub item: String,
    pub timestamp: String,
    pub rating: String,
}

impl Default for ReviewFieldMap {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "parent_asin".into(),
            timestamp: "timestamp".into(),
            rating: "rating".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ParseOutcome<T> {
    pub records: Vec<T>,
    /// Well-formed records filtered out (imageless items).
    pub dropped: usize,
    pub errors: Vec<LineError>,
}

fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cur = record;
    for part in path.split('.') {
        cur = cur.get(part)?;
    }
    if cur.is_null() {
        None
    } else {
        Some(cur)
    }
}

fn text_field(record: &Value, path: &str) -> Option<String> {
    match lookup(record, path)? {
        Value::String(s) => {
            let s = s.trim();
            (!s.is_empty()).then(|| s.to_string())
        }
        Value::Number(n) => Some(n.to_string()),
        Value::Array(xs) => xs
            .iter()
            .filter_map(|x| x.as_str())
            .map(str::trim)
            .find(|s| !s.is_empty())
            .map(str::to_string),
        _ => None,
    }
}

fn price_field(record: &Value, path: &str) -> String {
    match lookup(record, path) {
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::String(s)) if s.trim().parse::<f64>().is_ok_and(f64::is_finite) => {
            s.trim().to_string()
        }
        _ => UNKNOWN.to_string(),
    }
}

fn main_image(record: &Value, fm: &MetaFieldMap) -> Option<String> {
    let images = lookup(record, &fm.images)?.as_array()?;
    images.iter().find_map(|img| {
        let variant = img.get(&fm.image_variant)?.as_str()?;
        if variant != fm.main_variant {
            return None;
        }
        let large = img.get(&fm.image_large)?.as_str()?.trim();
        (!large.is_empty()).then(|| large.to_string())
    })
}

/// Parse line-delimited metadata records, keeping items with a MAIN large image.
pub fn parse_metadata<R: BufRead>(reader: R, fm: &MetaFieldMap) -> Result<ParseOutcome<Item>> {
    let mut out = ParseOutcome {
        records: Vec::new(),
        dropped: 0,
        errors: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| LineError {
            line: i + 1,
            message,
        };
        let record: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.errors.push(err(format!("malformed record: {e}")));
                continue;
            }
        };
        let Some(item_id) = text_field(&record, &fm.id) else {
            out.errors.push(err(format!("missing `{}`", fm.id)));
            continue;
        };
        let Some(title) = text_field(&record, &fm.title) else {
            out.errors.push(err(format!("missing `{}`", fm.title)));
            continue;
        };
        let Some(image_ref) = main_image(&record, fm) else {
            out.dropped += 1;
            continue;
        };
        out.records.push(Item {
            item_id,
            title,
            category: text_field(&record, &fm.category).unwrap_or_else(|| UNKNOWN.into()),
            brand: text_field(&record, &fm.brand).unwrap_or_else(|| UNKNOWN.into()),
            price: price_field(&record, &fm.price),
            image_ref,
            image_features: Vec::new(),
        });
    }
    if out.records.is_empty() {
        return Err(Error::EmptyInput("metadata stream".into()));
    }
    Ok(out)
}

fn timestamp_field(record: &Value, path: &str) -> std::result::Result<i64, String> {
    let ts = match lookup(record, path) {
        Some(Value::Number(n)) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Some(Value::String(s)) => s.trim().parse::<i64>().ok(),
        _ => return Err(format!("missing `{path}`")),
    };
    match ts {
        Some(t) if t >= 0 => Ok(t),
        Some(t) => Err(format!("negative timestamp {t}")),
        None => Err(format!("unparseable `{path}`")),
    }
}

/// Parse line-delimited review records into interactions. Records without a
/// user, item or timestamp are reported and skipped.
pub fn parse_reviews<R: BufRead>(
    reader: R,
    fm: &ReviewFieldMap,
) -> Result<ParseOutcome<Interaction>> {
    let mut out = ParseOutcome {
        records: Vec::new(),
        dropped: 0,
        errors: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| LineError {
            line: i + 1,
            message,
        };
        let record: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.errors.push(err(format!("malformed record: {e}")));
                continue;
            }
        };
        let (Some(user_id), Some(item_id)) =
            (text_field(&record, &fm.user), text_field(&record, &fm.item))
        else {
            out.errors.push(err(format!("missing `{}` or `{}`", fm.user, fm.item)));
            continue;
        };
        let timestamp = match timestamp_field(&record, &fm.timestamp) {
            Ok(t) => t,
            Err(m) => {
                out.errors.push(err(m));
                continue;
            }
        };
        let rating = lookup(&record, &fm.rating)
            .and_then(Value::as_f64)
            .unwrap_or(0.0);
        out.records.push(Interaction {
            user_id,
            item_id,
            timestamp,
            rating,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub min_len: usize,
    pub sample_min: usize,
    pub sample_max: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            min_len: 2,
            sample_min: 2,
            sample_max: 6,
        }
    }
}

/// Group interactions per user and keep the k most recent image-bearing ones,
/// with k drawn uniformly from `[sample_min, min(sample_max, available)]`.
pub fn build_sequences(
    interactions: &[Interaction],
    items: &[Item],
    cfg: SequenceConfig,
    seed: u64,
) -> Result<Vec<InteractionSequence>> {
    if cfg.sample_min > cfg.sample_max {
        return Err(Error::Config(format!(
            "sample_min {} > sample_max {}",
            cfg.sample_min, cfg.sample_max
        )));
    }
    if cfg.min_len < 2 || cfg.sample_min < 1 {
        return Err(Error::Config("min_len must be >= 2 and sample_min >= 1".into()));
    }
    let catalog: HashMap<&str, &Item> = items
        .iter()
        .filter(|it| !it.image_ref.is_empty())
        .map(|it| (it.item_id.as_str(), it))
        .collect();

    let mut per_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for it in interactions {
        if catalog.contains_key(it.item_id.as_str()) {
            per_user.entry(it.user_id.as_str()).or_default().push(it);
        }
    }

    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for (user, mut events) in per_user {
        if events.len() < cfg.min_len {
            continue;
        }
        events.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.item_id.cmp(&b.item_id))
        });
        let available = events.len();
        let lo = cfg.sample_min.min(available);
        let hi = cfg.sample_max.min(available).max(lo);
        let k = rng.random_range(lo..=hi);
        let items = events[available - k..]
            .iter()
            .map(|e| catalog[e.item_id.as_str()].clone())
            .collect();
        out.push(InteractionSequence {
            user_id: user.to_string(),
            items,
        });
    }
    Ok(out)
}

/// Render an item as prompt text. Missing brand/price render as "Unknown".
pub fn flatten_item(item: &Item, include_image_placeholder: bool) -> String {
    let or_unknown = |s: &str| {
        if s.trim().is_empty() {
            UNKNOWN.to_string()
        } else {
            s.to_string()
        }
    };
    let mut s = format!(
        "Title: {}. Category: {}. Brand: {}. Price: {}.",
        item.title,
        or_unknown(&item.category),
        or_unknown(&item.brand),
        or_unknown(&item.price)
    );
    if include_image_placeholder {
        s.push_str(" Image: <image>");
    }
    s
}

/// Fields recovered from a flattened item string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatFields {
    pub title: String,
    pub category: String,
    pub brand: String,
    pub price: String,
    pub has_image: bool,
}

/// Inverse of [`flatten_item`] for strings it produced.
pub fn parse_flattened(text: &str) -> Option<FlatFields> {
    let rest = text.strip_prefix("Title: ")?;
    let (title, rest) = rest.split_once(". Category: ")?;
    let (category, rest) = rest.split_once(". Brand: ")?;
    let (brand, rest) = rest.split_once(". Price: ")?;
    let (price, has_image) = match rest.strip_suffix(". Image: <image>") {
        Some(p) => (p, true),
        None => (rest.strip_suffix('.')?, false),
    };
    Some(FlatFields {
        title: title.into(),
        category: category.into(),
        brand: brand.into(),
        price: price.into(),
        has_image,
    })
}

/// One corpus document per distinct item id (first occurrence wins).
pub fn build_corpus_docs(items: &[Item]) -> Result<Vec<CorpusDoc>> {
    if items.is_empty() {
        return Err(Error::EmptyInput("item catalog".into()));
    }
    let mut seen = HashSet::new();
    Ok(items
        .iter()
        .filter(|it| seen.insert(it.item_id.as_str()))
        .map(|it| {
            let text = flatten_item(it, false);
            let tokens = split_words(&text);
            CorpusDoc {
                item_id: it.item_id.clone(),
                text,
                tokens,
            }
        })
        .collect())
}

/// Deduplicate items by id, first occurrence wins.
pub fn dedup_items(items: Vec<Item>) -> Vec<Item> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|it| seen.insert(it.item_id.clone()))
        .collect()
}

/// On-disk form of a sequence: user id plus ordered item ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub user_id: String,
    pub item_ids: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Resolve stored sequence records against the item catalog.
pub fn resolve_sequences(
    records: &[SequenceRecord],
    items: &[Item],
    split: Split,
) -> Result<Vec<InteractionSequence>> {
    let catalog: HashMap<&str, &Item> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let items = r
                .item_ids
                .iter()
                .map(|id| {
                    catalog
                        .get(id.as_str())
                        .map(|it| (*it).clone())
                        .ok_or_else(|| Error::Invalid(format!("unknown item `{id}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(InteractionSequence {
                user_id: r.user_id.clone(),
                items,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, title: &str) -> Item {
        Item {
            item_id: id.into(),
            title: title.into(),
            category: "Boxes".into(),
            brand: "Acme".into(),
            price: "9.99".into(),
            image_ref: format!("{id}.jpg"),
            image_features: vec![],
        }
    }

    fn inter(user: &str, item: &str, ts: i64) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            timestamp: ts,
            rating: 5.0,
        }
    }

    #[test]
    fn main_variant_large_image_kept() {
        let line = r#"{"parent_asin":"X1","title":"T","images":[{"variant":"MAIN","large":"u.jpg"}]}"#;
        let out = parse_metadata(line.as_bytes(), &MetaFieldMap::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].image_ref, "u.jpg");
        assert_eq!(out.records[0].brand, UNKNOWN);
        assert_eq!(out.records[0].price, UNKNOWN);
    }

    #[test]
    fn imageless_record_dropped_and_counted() {
        let lines = concat!(
            r#"{"parent_asin":"A","title":"T","images":[]}"#,
            "\n",
            r#"{"parent_asin":"B","title":"T","images":[{"variant":"PT01","large":"b.jpg"}]}"#,
            "\n",
            r#"{"parent_asin":"C","title":"T","images":[{"variant":"MAIN","large":"c.jpg"}]}"#,
        );
        let out = parse_metadata(lines.as_bytes(), &MetaFieldMap::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.dropped, 2);
    }

    #[test]
    fn malformed_line_reported_with_number() {
        let lines = concat!(
            "{not json\n",
            r#"{"parent_asin":"C","title":"T","images":[{"variant":"MAIN","large":"c.jpg"}]}"#,
        );
        let out = parse_metadata(lines.as_bytes(), &MetaFieldMap::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].line, 1);
    }

    #[test]
    fn zero_surviving_items_is_error() {
        let line = r#"{"parent_asin":"A","title":"T","images":[]}"#;
        assert!(matches!(
            parse_metadata(line.as_bytes(), &MetaFieldMap::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn price_rendering() {
        let fm = MetaFieldMap::default();
        let rec = |p: &str| {
            format!(
                r#"{{"parent_asin":"A","title":"T","price":{p},"images":[{{"variant":"MAIN","large":"a"}}]}}"#
            )
        };
        let get = |p: &str| {
            parse_metadata(rec(p).as_bytes(), &fm).unwrap().records[0]
                .price
                .clone()
        };
        assert_eq!(get("9.99"), "9.99");
        assert_eq!(get("\"12.50\""), "12.50");
        assert_eq!(get("\"from $5\""), UNKNOWN);
        assert_eq!(get("null"), UNKNOWN);
    }

    #[test]
    fn reviews_empty_stream() {
        let out = parse_reviews("".as_bytes(), &ReviewFieldMap::default()).unwrap();
        assert!(out.records.is_empty());
    }

    #[test]
    fn reviews_missing_user_skipped() {
        let lines = concat!(
            r#"{"user_id":"u1","parent_asin":"A","timestamp":1}"#,
            "\n",
            r#"{"parent_asin":"B","timestamp":2}"#,
            "\n",
            r#"{"user_id":"u2","parent_asin":"C","timestamp":3}"#,
        );
        let out = parse_reviews(lines.as_bytes(), &ReviewFieldMap::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].line, 2);
    }

    #[test]
    fn reviews_string_timestamp_and_missing_timestamp() {
        let lines = concat!(
            r#"{"user_id":"u1","parent_asin":"A","timestamp":"1609459200000"}"#,
            "\n",
            r#"{"user_id":"u1","parent_asin":"A"}"#,
        );
        let out = parse_reviews(lines.as_bytes(), &ReviewFieldMap::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].timestamp, 1_609_459_200_000);
        assert_eq!(out.errors.len(), 1);
    }

    #[test]
    fn single_interaction_user_dropped() {
        let items = vec![item("a", "A"), item("b", "B")];
        let ints = vec![inter("u1", "a", 1), inter("u2", "a", 1), inter("u2", "b", 2)];
        let seqs = build_sequences(&ints, &items, SequenceConfig::default(), 7).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].user_id, "u2");
    }

    #[test]
    fn two_interactions_forced_length_two() {
        let items = vec![item("a", "A"), item("b", "B")];
        let ints = vec![inter("u", "b", 5), inter("u", "a", 1)];
        for seed in 0..20 {
            let seqs = build_sequences(&ints, &items, SequenceConfig::default(), seed).unwrap();
            assert_eq!(seqs[0].n(), 2);
            assert_eq!(seqs[0].target().item_id, "b");
        }
    }

    #[test]
    fn timestamp_ties_broken_by_item_id() {
        let items = vec![item("a", "A"), item("b", "B")];
        let ints = vec![inter("u", "b", 5), inter("u", "a", 5)];
        let seqs = build_sequences(&ints, &items, SequenceConfig::default(), 0).unwrap();
        let ids: Vec<_> = seqs[0].items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn most_recent_kept_and_bounds_hold() {
        let items: Vec<_> = (0..10).map(|i| item(&format!("i{i}"), "T")).collect();
        let ints: Vec<_> = (0..10).map(|i| inter("u", &format!("i{i}"), i)).collect();
        for seed in 0..50 {
            let s = &build_sequences(&ints, &items, SequenceConfig::default(), seed).unwrap()[0];
            assert!((2..=6).contains(&s.n()));
            assert_eq!(s.target().item_id, "i9");
            let first: usize = s.items[0].item_id[1..].parse().unwrap();
            assert_eq!(first, 10 - s.n());
        }
    }

    #[test]
    fn bad_sample_range_is_config_error() {
        let cfg = SequenceConfig {
            min_len: 2,
            sample_min: 5,
            sample_max: 3,
        };
        assert!(matches!(
            build_sequences(&[], &[], cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flatten_examples() {
        let it = Item {
            item_id: "x".into(),
            title: "A".into(),
            category: "B".into(),
            brand: "C".into(),
            price: "9.99".into(),
            image_ref: "x.jpg".into(),
            image_features: vec![],
        };
        assert_eq!(
            flatten_item(&it, true),
            "Title: A. Category: B. Brand: C. Price: 9.99. Image: <image>"
        );
        assert_eq!(
            flatten_item(&it, false),
            "Title: A. Category: B. Brand: C. Price: 9.99."
        );
        let no_brand = Item {
            brand: String::new(),
            ..it
        };
        assert!(flatten_item(&no_brand, true).contains("Brand: Unknown."));
    }

    #[test]
    fn corpus_dedup_and_no_placeholder() {
        let docs = build_corpus_docs(&[item("a", "A"), item("a", "Other")]).unwrap();
        assert_eq!(docs.len(), 1);
        assert!(!docs[0].text.contains("<image>"));
        assert!(docs[0].text.contains("Title: A."));
        assert!(build_corpus_docs(&[]).is_err());
    }
}
