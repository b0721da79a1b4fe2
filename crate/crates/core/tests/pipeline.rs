mod common;

use perfmine::hosting::{FixtureTransport, GithubClient, Transcript};
use perfmine::pipeline::{cmd_mine, MineServices, PipelineError};
use perfmine::store::{EntryFilter, Store};

#[test]
fn fixture_mine_stores_the_perf_commit() {
    let tmp = tempfile::tempdir().unwrap();
    let mined = common::mine_fixture(tmp.path());
    let f = &mined.summary.funnel;
    assert_eq!((f.scanned, f.structural, f.classified, f.built, f.stored), (5, 1, 1, 1, 1), "{:#?}", mined.summary);
    assert_eq!(mined.summary.repositories_found, 1);
    assert_eq!(mined.summary.entries, [mined.fixture.patch_id()]);

    let store = Store::new(&mined.out);
    let entry = store.get(&mined.fixture.patch_id()).unwrap();
    entry.validate().unwrap();
    assert!(entry.has_significant_test);
    let planted = entry.timing.iter().find(|t| t.test_name == common::PLANTED_TEST).unwrap();
    assert!(planted.result.significant);
    assert!((planted.result.relative_improvement - 0.2).abs() < 0.03);
    let control = entry.timing.iter().find(|t| t.test_name == "unit_basic").unwrap();
    assert!(!control.result.significant);
    assert_eq!(entry.measurement.runs_recorded, 30);
    assert!(store.read_patch(&entry).unwrap().contains("+// perfmine-fake: test=bench_sort cost_ms=40"));
    assert!(mined.out.join("logs").join(entry.patch_id.as_str()).join("original").is_dir());
    assert!(mined.out.join("mine-summary.json").is_file());

    let only = store.query(&EntryFilter { has_significant_test: Some(true), ..Default::default() }).unwrap();
    assert_eq!(only.entries.len(), 1);
}

#[test]
fn empty_discovery_gives_an_empty_funnel() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::fixture_config(&tmp.path().join("out"));
    let github = GithubClient::new(Box::new(FixtureTransport::new(Transcript::default())), None);
    let backend = perfmine::backend::ScriptedBackend::default();
    // The runtime is never contacted when nothing is found.
    let runtime = perfmine::runtime::FakeRuntime::unreachable(tmp.path().join("rt"));
    let table = perfmine::deptable::DependencyTable::default();
    let prompts = perfmine::classifier::PromptSet::default();
    let services = MineServices { github: &github, backend: &backend, runtime: &runtime, table: &table, prompts: &prompts };
    // Unknown URLs answer 404, which discovery reports; an empty page is
    // the empty result.
    let empty = Transcript {
        responses: vec![perfmine::hosting::TranscriptEntry {
            url: perfmine::discovery::search_url(perfmine::hosting::DEFAULT_API_BASE, &config.discovery, 1),
            status: 200,
            headers: Default::default(),
            body: serde_json::json!({"total_count": 0, "items": []}),
        }],
    };
    assert!(cmd_mine(&config, &services).is_err());
    let github = GithubClient::new(Box::new(FixtureTransport::new(empty)), None);
    let services = MineServices { github: &github, ..services };
    let summary = cmd_mine(&config, &services).unwrap();
    assert_eq!(summary.funnel, Default::default());
}

#[test]
fn zero_max_files_fails_before_any_request() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = common::fixture_config(tmp.path());
    config.harvest.max_files = 0;
    let transport = std::sync::Arc::new(FixtureTransport::new(Transcript::default()));
    struct Shared(std::sync::Arc<FixtureTransport>);
    impl perfmine::hosting::HttpTransport for Shared {
        fn get(&self, url: &str, h: &[(String, String)]) -> Result<perfmine::hosting::HttpResponse, perfmine::hosting::ApiError> {
            self.0.get(url, h)
        }
    }
    let github = GithubClient::new(Box::new(Shared(transport.clone())), None);
    let backend = perfmine::backend::ScriptedBackend::default();
    let runtime = perfmine::runtime::FakeRuntime::new(tmp.path().join("rt"));
    let table = perfmine::deptable::DependencyTable::default();
    let prompts = perfmine::classifier::PromptSet::default();
    let services = MineServices { github: &github, backend: &backend, runtime: &runtime, table: &table, prompts: &prompts };
    assert!(matches!(cmd_mine(&config, &services), Err(PipelineError::Config(_))));
    assert!(transport.requests().is_empty());
}
