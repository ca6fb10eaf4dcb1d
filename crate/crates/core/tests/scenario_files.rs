use std::path::Path;

use metaverify::corpus::{load_corpus, random_scenario, write_corpus, RandomParams};
use metaverify::scenario::{load_scenario, save_scenario, ScenarioError, ScenarioFile};

#[test]
fn shipped_samples_validate_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let corpus = load_corpus(&dir).unwrap();
    assert_eq!(corpus.len(), 3);
    let tmp = tempfile::tempdir().unwrap();
    for (name, sc) in corpus {
        let path = tmp.path().join(format!("{name}.json"));
        save_scenario(&path, &sc.file).unwrap();
        let again = load_scenario(&path).unwrap();
        assert_eq!(again.file, sc.file, "{name}");
    }
}

#[test]
fn generated_corpus_survives_disk() {
    let files: Vec<ScenarioFile> = (0..10).map(|i| random_scenario(&RandomParams::default(), 1, i)).collect();
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(tmp.path(), &files).unwrap();
    let back = load_corpus(tmp.path()).unwrap();
    assert_eq!(back.len(), files.len());
    for ((_, sc), f) in back.iter().zip(&files) {
        assert_eq!(&sc.file, f);
    }
}

#[test]
fn validation_errors_name_the_offending_key() {
    let bad = r#"{
        "query": "q",
        "dag": {"steps": ["a"], "edges": []},
        "experts": [{"id": "e001", "class": "radical", "temperature": 0.5,
            "traces": [{"intermediates": {"a": {"value": 1, "confidence": 1.2}}, "response": 1}]}]
    }"#;
    match ScenarioFile::from_json(bad).unwrap().validate() {
        Err(ScenarioError::Validation { key, .. }) => assert_eq!(key, "experts[0].traces[0]"),
        other => panic!("expected a validation error, got {other:?}"),
    }

    let cyclic = r#"{"query": "q", "dag": {"steps": ["a", "b"], "edges": [["a", "b"], ["b", "a"]]},
        "experts": [{"id": "e001", "class": "radical", "temperature": 0.5,
            "traces": [{"intermediates": {}, "response": 1}]}]}"#;
    match ScenarioFile::from_json(cyclic).unwrap().validate() {
        Err(ScenarioError::Validation { key, .. }) => assert_eq!(key, "dag"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}
