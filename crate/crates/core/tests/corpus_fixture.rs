mod common;

use seqrec::cli::{PrepareStats, Workspace, PREPARE_STATS};
use seqrec::corpus::{parse_metadata, parse_reviews, MetaFieldMap, ReviewFieldMap, Split};
use seqrec::io;

#[test]
fn metadata_fixture_counts() {
    let out = parse_metadata(io::open_lines(&common::fixtures().join("meta.jsonl")).unwrap(), &MetaFieldMap::default())
        .unwrap();
    let ids: Vec<&str> = out.records.iter().map(|i| i.item_id.as_str()).collect();
    assert_eq!(ids, ["B001", "B002", "B003", "B006", "B008", "B010"]);
    assert_eq!(out.dropped, 4);
    assert!(out.errors.is_empty());
    let b003 = out.records.iter().find(|i| i.item_id == "B003").unwrap();
    assert_eq!(b003.price, "Unknown");
}

#[test]
fn review_fixture_counts() {
    let out = parse_reviews(
        io::open_lines(&common::fixtures().join("reviews.jsonl")).unwrap(),
        &ReviewFieldMap::default(),
    )
    .unwrap();
    assert_eq!(out.records.len(), 38);
    let lines: Vec<usize> = out.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, [6, 12]);
}

#[test]
fn prepare_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::fixture_config(dir.path(), &[]);
    let ws = Workspace { cfg: &cfg, dir: dir.path() };
    ws.prepare().unwrap();
    let stats: PrepareStats = io::read_json(&dir.path().join(PREPARE_STATS)).unwrap();
    assert_eq!(stats.items_kept, 6);
    assert_eq!(stats.items_dropped_no_image, 4);
    assert_eq!(stats.interactions, 38);
    assert_eq!(stats.review_errors.len(), 2);
    assert_eq!(stats.sequences, 10);
    assert_eq!(stats.corpus_docs, 6);
    assert_eq!(stats.train_sequences + stats.test_sequences, 10);

    let items = ws.items().unwrap();
    let train = ws.sequences(&items, Split::Train).unwrap();
    let test = ws.sequences(&items, Split::Test).unwrap();
    assert_eq!(train.len(), stats.train_sequences);
    assert_eq!(test.len(), stats.test_sequences);
    for s in train.iter().chain(&test) {
        assert!(s.n() >= 2);
        assert!(!["u07", "u08"].contains(&s.user_id.as_str()));
        assert!(s.items.iter().all(|i| i.image_features.len() == cfg.model.d_img));
    }
}
