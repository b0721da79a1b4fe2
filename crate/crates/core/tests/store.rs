mod common;

use common::synthetic_entry;
use perfmine::store::{parse_entry, EntryFilter, Store, StoreError, Verification};

fn filter() -> EntryFilter {
    EntryFilter::default()
}

#[test]
fn put_get_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    let entry = synthetic_entry("acme", "lib", 1, 2, true);
    let path = store.put(&entry, "diff --git a/x b/x\n").unwrap();
    assert_eq!(path, store.entry_path(&entry.patch_id));
    let back = store.get(&entry.patch_id).unwrap();
    assert_eq!(back, entry);
    assert_eq!(store.read_patch(&back).unwrap(), "diff --git a/x b/x\n");
    assert!(matches!(store.get("acme__lib__missing"), Err(StoreError::NotFound(_))));
}

#[test]
fn filters_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    store.put(&synthetic_entry("acme", "lib", 1, 1, false), "").unwrap();
    store.put(&synthetic_entry("acme", "lib", 2, 3, false), "").unwrap();
    store.put(&synthetic_entry("other", "tool", 3, 1, true), "").unwrap();

    let multi = store.query(&EntryFilter { multi_file: Some(true), ..filter() }).unwrap();
    assert_eq!(multi.entries.len(), 1);
    let acme = store.query(&EntryFilter { repo: Some("acme/lib".into()), ..filter() }).unwrap();
    assert_eq!(acme.entries.len(), 2);
    let sig = store.query(&EntryFilter { repo: Some("acme/lib".into()), has_significant_test: Some(true), ..filter() }).unwrap();
    assert!(sig.entries.is_empty());
    let all = store.query(&filter()).unwrap();
    let ids: Vec<_> = all.entries.iter().map(|e| e.patch_id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn dataset_sized_store() {
    // 347 patches, 136 multi-file, 35 with a significant test.
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    for i in 0..347 {
        let files = if i < 136 { 2 } else { 1 };
        store.put(&synthetic_entry("acme", "lib", i, files, i % 10 == 3), "").unwrap();
    }
    let count = |f: EntryFilter| store.query(&f).unwrap().entries.len();
    assert_eq!(count(filter()), 347);
    assert_eq!(count(EntryFilter { multi_file: Some(true), ..filter() }), 136);
    assert_eq!(count(EntryFilter { multi_file: Some(false), ..filter() }), 211);
    assert_eq!(count(EntryFilter { has_significant_test: Some(true), ..filter() }), 35);
}

#[test]
fn review_transitions() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    let e = synthetic_entry("acme", "lib", 7, 1, false);
    store.put(&e, "").unwrap();
    assert!(matches!(store.mark_verified(&e.patch_id, Verification::Unreviewed, None), Err(StoreError::Schema { .. })));
    let done = store.mark_verified(&e.patch_id, Verification::Accepted, Some("message mentions speed")).unwrap();
    assert_eq!(done.verified, Verification::Accepted);
    assert_eq!(store.get(&e.patch_id).unwrap().review_note.as_deref(), Some("message mentions speed"));
    assert!(matches!(
        store.mark_verified(&e.patch_id, Verification::Rejected, None),
        Err(StoreError::AlreadyReviewed { state: Verification::Accepted, .. })
    ));
    let accepted = store.query(&EntryFilter { verified: Some(Verification::Accepted), ..filter() }).unwrap();
    assert_eq!(accepted.entries.len(), 1);
}

#[test]
fn bad_files_are_reported_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path());
    store.put(&synthetic_entry("acme", "lib", 1, 1, false), "").unwrap();
    std::fs::write(store.entries_dir().join("broken.json"), "{ not json").unwrap();
    let result = store.query(&filter()).unwrap();
    assert_eq!(result.entries.len(), 1);
    assert_eq!(result.errors.len(), 1);
}

#[test]
fn schema_checks() {
    let mut e = synthetic_entry("acme", "lib", 1, 1, true);
    let mut v = serde_json::to_value(&e).unwrap();
    v["schema_version"] = 99.into();
    assert!(matches!(parse_entry(&v.to_string()), Err(StoreError::UnsupportedSchema { .. })));

    e.has_significant_test = false;
    assert!(matches!(e.validate(), Err(StoreError::Schema { .. })));
    let mut e = synthetic_entry("acme", "lib", 1, 1, true);
    e.timing[0].pre_ms[0] += 1.0;
    assert!(e.validate().is_err());
    let mut e = synthetic_entry("acme", "lib", 1, 1, true);
    e.build.image = "perfmine/other".into();
    assert!(e.validate().is_err());
}

#[test]
fn missing_store_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::new(tmp.path().join("absent"));
    assert!(matches!(store.query(&filter()), Err(StoreError::MissingStore(_))));
    let empty = Store::new(tmp.path());
    assert!(empty.query(&filter()).unwrap().entries.is_empty());
}
