mod common;

use std::path::Path;

use perfmine::backend::{ScriptFile, Scripted, ScriptedBackend};
use perfmine::classifier::PromptTemplate;
use perfmine::deptable::DependencyTable;
use perfmine::harvest::CommitRecord;
use perfmine::orchestrator::{image_tag, Orchestrator, OrchestratorConfig, OrchestratorError, RepairModel, Session, Version};
use perfmine::runtime::{ContainerRuntime, FakeRuntime};

const TIMED: &str = "// perfmine-fake: test=t_main cost_ms=20\nint f() { return 1; }\n";

fn prepare(o: &Orchestrator<'_>, dir: &Path, commit: &CommitRecord) -> Session {
    o.prepare_environment(commit, &common::descriptor(dir), &dir.display().to_string(), Some(common::MINIMAL_CMAKE))
        .unwrap()
}

#[test]
fn checkouts_match_parent_and_commit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED)], &[("src/a.cpp", "// perfmine-fake: test=t_main cost_ms=10\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let s = prepare(&o, &dir, &commit);
    let read = |p: &str| String::from_utf8(rt.read_file(&s.container, p).unwrap()).unwrap();
    assert_eq!(read("/work/meta/original.sha").trim(), commit.parent_sha);
    assert_eq!(read("/work/meta/patched.sha").trim(), commit.sha);
    assert!(read("/work/original/src/a.cpp").contains("cost_ms=20"));
    assert!(read("/work/patched/src/a.cpp").contains("cost_ms=10"));
    o.close(s).unwrap();
}

#[test]
fn missing_header_is_repaired_in_one_round() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let needs = "// perfmine-fake: requires=zlib.h package=zlib1g-dev\n#include <zlib.h>\n";
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED), ("src/z.cpp", needs)], &[("src/a.cpp", TIMED.replace("20", "19").as_str())]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let mut s = prepare(&o, &dir, &commit);
    o.build_both(&mut s).unwrap();
    assert_eq!(s.plan.install_packages, ["zlib1g-dev"]);
    assert_eq!(s.plan.repair_rounds_used, 1);
    assert_eq!(s.built_plan(Version::Original), s.built_plan(Version::Patched));
    o.close(s).unwrap();
}

#[test]
fn clean_project_needs_no_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED)], &[("src/b.cpp", "int g();\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let mut s = prepare(&o, &dir, &commit);
    o.build_both(&mut s).unwrap();
    assert_eq!(s.plan.repair_rounds_used, 0);
    assert!(s.plan.install_packages.is_empty());
    o.close(s).unwrap();
}

#[test]
fn bogus_model_suggestion_exhausts_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let needs = "// perfmine-fake: requires=quux/quux.h package=libquux-dev\n";
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED), ("src/q.cpp", needs)], &[("src/b.cpp", "int g();\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let config = OrchestratorConfig { max_repair_rounds: 2, ..Default::default() };
    let table = DependencyTable::default();
    let mut script = ScriptFile::default();
    script.commits.insert(commit.sha.clone(), [("repair".to_owned(), Scripted::One("libnotreal-dev".into()))].into_iter().collect());
    let backend = ScriptedBackend::new(script);
    let prompt = PromptTemplate::new("repair", "Build log:\n{{build_log}}\nPackages?");
    let o = Orchestrator::new(&rt, &config, &table).with_repair_model(RepairModel {
        backend: &backend,
        model: "m",
        prompt: &prompt,
        temperature: 0.0,
    });
    let mut s = prepare(&o, &dir, &commit);
    let err = o.build_both(&mut s).unwrap_err();
    assert!(matches!(err, OrchestratorError::RepairBudgetExhausted { rounds: 2, .. }), "{err}");
    assert_eq!(backend.captured().len(), 2);
    assert!(backend.captured()[0].prompt.contains("quux/quux.h"));
    o.close(s).unwrap();
}

#[test]
fn no_remedy_is_unrepairable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let needs = "// perfmine-fake: requires=quux/quux.h package=libquux-dev\n";
    let commit = common::project_repo(&dir, &[("src/q.cpp", needs)], &[("src/b.cpp", "int g();\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let mut s = prepare(&o, &dir, &commit);
    assert!(matches!(o.build_both(&mut s), Err(OrchestratorError::Unrepairable { .. })));
    o.close(s).unwrap();
}

#[test]
fn warm_up_is_discarded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED)], &[("src/b.cpp", "int g();\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let mut s = prepare(&o, &dir, &commit);
    o.build_both(&mut s).unwrap();
    for runs in [2, 5, 31] {
        let out = o.run_tests_repeatedly(&mut s, Version::Original, runs).unwrap();
        assert!(out.qualified);
        assert_eq!(out.runs_recorded, runs - 1);
        assert_eq!(out.test("t_main").unwrap().wall_ms.len(), runs - 1);
        let ms = &out.test("t_main").unwrap().wall_ms;
        assert!(ms.iter().all(|v| (v - 20.0).abs() < 0.5), "{ms:?}");
    }
    o.close(s).unwrap();
}

#[test]
fn a_flaky_run_disqualifies() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let flaky = "// perfmine-fake: test=t_flaky cost_ms=3 fail_run=17\n";
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED), ("src/f.cpp", flaky)], &[("src/b.cpp", "int g();\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let mut s = prepare(&o, &dir, &commit);
    o.build_both(&mut s).unwrap();
    let out = o.run_tests_repeatedly(&mut s, Version::Original, 31).unwrap();
    assert!(!out.qualified);
    assert!(out.disqualified_reason.as_deref().unwrap().contains("t_flaky"), "{:?}", out.disqualified_reason);
    assert!(out.runs_recorded < 30);
    assert!(matches!(o.snapshot_image(&s, "acme__demo__x", &[&out]), Err(OrchestratorError::Precondition(_))));
    o.close(s).unwrap();
}

#[test]
fn root_commit_is_rejected_before_the_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let mut commit = common::project_repo(&dir, &[("src/a.cpp", TIMED)], &[("src/b.cpp", "int g();\n")]);
    commit.parent_sha.clear();
    // An unreachable runtime would fail differently if it were contacted.
    let rt = FakeRuntime::unreachable(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let err = o.prepare_environment(&commit, &common::descriptor(&dir), &dir.display().to_string(), None).unwrap_err();
    assert!(matches!(err, OrchestratorError::Precondition(_)), "{err}");
}

#[test]
fn unreachable_runtime_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED)], &[("src/b.cpp", "int g();\n")]);
    let rt = FakeRuntime::unreachable(tmp.path().join("rt"));
    let (config, table) = (OrchestratorConfig::default(), DependencyTable::default());
    let o = Orchestrator::new(&rt, &config, &table);
    let err = o.prepare_environment(&commit, &common::descriptor(&dir), &dir.display().to_string(), None).unwrap_err();
    assert!(matches!(err, OrchestratorError::Runtime(_)), "{err}");
}

#[test]
fn snapshot_replays_and_retags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let commit = common::project_repo(&dir, &[("src/a.cpp", TIMED)], &[("src/a.cpp", "// perfmine-fake: test=t_main cost_ms=15\n")]);
    let rt = FakeRuntime::new(tmp.path().join("rt"));
    let config = OrchestratorConfig { runs: 5, ..Default::default() };
    let table = DependencyTable::default();
    let o = Orchestrator::new(&rt, &config, &table);
    let id = "acme__demo__abc";
    for _ in 0..2 {
        let mut s = prepare(&o, &dir, &commit);
        o.build_both(&mut s).unwrap();
        let a = o.run_tests_repeatedly(&mut s, Version::Original, 5).unwrap();
        let b = o.run_tests_repeatedly(&mut s, Version::Patched, 5).unwrap();
        assert_eq!(o.snapshot_image(&s, id, &[&a, &b]).unwrap(), image_tag(id));
        o.close(s).unwrap();
    }
    assert!(rt.image_exists(&image_tag(id)).unwrap());

    let plan = perfmine::orchestrator::BuildPlan::for_project(Some(common::MINIMAL_CMAKE), &config.configure_args);
    let mut s = o.open_snapshot(&image_tag(id), &plan, &commit.sha, "/work/logs/replay").unwrap();
    let read = |p: &str| String::from_utf8(rt.read_file(&s.container, p).unwrap()).unwrap();
    assert_eq!(read("/work/meta/patched.sha").trim(), commit.sha);
    assert!(o.build_once(&mut s, Version::Patched).unwrap().success());
    let out = o.run_tests_repeatedly(&mut s, Version::Patched, 3).unwrap();
    assert!(out.qualified);
    assert!(out.test("t_main").unwrap().wall_ms.iter().all(|v| (v - 15.0).abs() < 0.5));
    o.close(s).unwrap();
}
