mod common;

use perfmine::deptable::DependencyTable;
use perfmine::orchestrator::{Orchestrator, OrchestratorConfig, Version};
use perfmine::runtime::LocalRuntime;
use perfmine::stats::{judge, StatConfig, TimingSeries};

fn have(tool: &str) -> bool {
    std::process::Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn real_cmake_project_on_the_host() {
    if !(have("cmake") && have("ctest") && have("c++")) {
        eprintln!("skipping: cmake, ctest or a C++ compiler is missing");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("repo");
    let commit = common::spin_repo(&dir);
    let rt = LocalRuntime::new(tmp.path().join("rt"));
    let config = OrchestratorConfig { runs: 11, ..Default::default() };
    let table = DependencyTable::default();
    let o = Orchestrator::new(&rt, &config, &table);
    let mut s = o
        .prepare_environment(&commit, &common::descriptor(&dir), &dir.display().to_string(), Some(common::SPIN_CMAKE))
        .unwrap();
    o.build_both(&mut s).unwrap();
    let pre = o.run_tests_repeatedly(&mut s, Version::Original, 11).unwrap();
    let post = o.run_tests_repeatedly(&mut s, Version::Patched, 11).unwrap();
    o.close(s).unwrap();
    assert!(pre.qualified && post.qualified);
    assert_eq!(pre.runs_recorded, 10);
    let series = TimingSeries {
        test_name: "spin_test".into(),
        pre_ms: pre.test("spin_test").unwrap().wall_ms.clone(),
        post_ms: post.test("spin_test").unwrap().wall_ms.clone(),
    };
    let result = judge(&series, &StatConfig::default()).unwrap();
    assert!(result.significant, "{series:?} {result:?}");
}
