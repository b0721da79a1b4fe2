mod common;

use std::process::Command;

use perfmine::deptable::DependencyTable;
use perfmine::eval::{evaluate, EvalError, EvaluationReport, Verdict};
use perfmine::orchestrator::{Orchestrator, OrchestratorConfig};
use perfmine::runtime::FakeRuntime;
use perfmine::stats::StatConfig;
use perfmine::store::Store;

const CONFLICT: &str = "diff --git a/src/sort.cpp b/src/sort.cpp
--- a/src/sort.cpp
+++ b/src/sort.cpp
@@ -1,3 +1,3 @@
-// this line is not in the file
+// neither is this one
 #include <vector>
 
";

#[test]
fn verdicts_for_ground_truth_empty_and_conflicting_diffs() {
    let tmp = tempfile::tempdir().unwrap();
    let mined = common::mine_fixture(tmp.path());
    let store = Store::new(&mined.out);
    let id = mined.fixture.patch_id();
    let entry = store.get(&id).unwrap();
    let diff = store.read_patch(&entry).unwrap();
    let rt = FakeRuntime::new(mined.out.join(".fake-runtime"));
    let (config, table, stats) = (OrchestratorConfig::default(), DependencyTable::default(), StatConfig::default());
    let o = Orchestrator::new(&rt, &config, &table);

    let (report, path) = evaluate(&id, &diff, &store, &o, &stats).unwrap();
    assert_eq!(report.verdict, Verdict::Improves, "{report:#?}");
    assert_eq!(report.original_session, report.candidate_session);
    assert_eq!(report.candidate_files, ["src/sort.cpp"]);
    let on_disk: EvaluationReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    on_disk.validate().unwrap();

    let (report, _) = evaluate(&id, "", &store, &o, &stats).unwrap();
    assert_eq!(report.verdict, Verdict::FunctionalOnly, "{report:#?}");
    assert!(report.all_tests_pass);

    let (report, _) = evaluate(&id, CONFLICT, &store, &o, &stats).unwrap();
    assert_eq!(report.verdict, Verdict::Broken);
    assert!(!report.applied_ok);

    assert!(matches!(evaluate("acme__sorter__nope", "", &store, &o, &stats), Err(EvalError::MissingEntry(_))));
    // The mined logs are kept beside the evaluation logs.
    assert!(mined.out.join("logs").join(&id).join("original").is_dir());
    assert!(mined.out.join("logs").join(&id).join("evaluation").is_dir());
}

#[test]
fn cli_exit_codes_follow_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let mined = common::mine_fixture(tmp.path());
    let store = Store::new(&mined.out);
    let id = mined.fixture.patch_id();
    let diff = store.read_patch(&store.get(&id).unwrap()).unwrap();
    let run = |text: &str| {
        let patch = tmp.path().join("candidate.patch");
        std::fs::write(&patch, text).unwrap();
        Command::new(env!("CARGO_BIN_EXE_perfmine"))
            .args(["evaluate", "--fake-runtime", "--patch-id", &id, "--runs", "11"])
            .arg("--patch-file")
            .arg(&patch)
            .arg("--out")
            .arg(&mined.out)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(run(&diff), Some(0));
    assert_eq!(run(""), Some(10));
    assert_eq!(run(CONFLICT), Some(20));
}
