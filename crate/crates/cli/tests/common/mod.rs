pub mod newton;

use reserve_cli::{run_training, RunConfig, TrainSummary};
use reserve_core::ddpg::TrainOutcome;
use std::io::Write;
use std::sync::OnceLock;

/// Writes a verdict line straight to stderr so it shows even when the test
/// harness captures output, then fails the test if the check did not pass.
pub fn verdict(criterion: &str, passed: bool, detail: &str) {
    let _ = writeln!(
        std::io::stderr(),
        "{} {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "{criterion}: {detail}");
}

pub const TWO_NODE: &str = "\
[system]
name two-node
base_kva 1000
substation 1
source_pu 1.0
[nodes]
1 12.47 abc
2 12.47 abc
[configs]
L z a 0.3+0.6j 0.1+0.2j 0.1+0.2j
L z b 0.1+0.2j 0.3+0.6j 0.1+0.2j
L z c 0.1+0.2j 0.1+0.2j 0.3+0.6j
[branches]
1 2 1 L
[loads]
spot 2 Y-PQ 100 50 100 50 100 50
[ders]
1 2 abc
";

/// Lateral, line charging, a capacitor, every wye load model, a delta load
/// and a distributed load.
pub const FIVE_NODE: &str = "\
[system]
name five-node
base_kva 3000
substation 1
source_pu 1.02
[nodes]
1 12.47 abc
2 12.47 abc
3 12.47 abc
4 12.47 a
5 12.47 abc
[configs]
M z a 0.35+1.02j 0.16+0.50j 0.15+0.38j
M z b 0.16+0.50j 0.34+1.05j 0.16+0.42j
M z c 0.15+0.38j 0.16+0.42j 0.35+1.04j
M y a 0+5.7j 0-1.9j 0-0.7j
M y b 0-1.9j 0+5.9j 0-1.2j
M y c 0-0.7j 0-1.2j 0+5.6j
S z a 1.33+1.35j 0 0
S z b 0 0 0
S z c 0 0 0
S y a 0+4.5j 0 0
S y b 0 0 0
S y c 0 0 0
[branches]
1 2 2.0 M
2 3 1.5 M
2 4 3000ft S
3 5 0.8 M
[capacitors]
5 150 150 150
[loads]
spot 3 Y-Z 300 150 250 120 200 100
spot 4 Y-I 120 60 0 0 0 0
spot 5 D-PQ 400 200 350 180 380 190
spot 5 Y-PQ 150 70 0 0 90 40
dist 2 3 Y-PQ 90 40 60 30 75 35
[ders]
1 5 abc
";

/// Strongly unbalanced chain with two DER sites, one single-phase.
pub const SIX_NODE: &str = "\
[system]
name six-node
base_kva 5000
substation 10
source_pu 1.0
[nodes]
10 24.9 abc
11 24.9 abc
12 24.9 abc
13 24.9 abc
14 24.9 c
15 24.9 abc
[configs]
A z a 1.34+1.33j 0.21+0.58j 0.21+0.50j
A z b 0.21+0.58j 1.32+1.36j 0.21+0.46j
A z c 0.21+0.50j 0.21+0.46j 1.33+1.35j
A y a 0+5.3j 0-1.5j 0-1.0j
A y b 0-1.5j 0+5.1j 0-0.6j
A y c 0-1.0j 0-0.6j 0+4.9j
C z a 0 0 0
C z b 0 0 0
C z c 0 0 1.92+1.42j
[branches]
10 11 1.2 A
11 12 2.5 A
12 13 1.0 A
13 14 5280ft C
12 15 0.6 A
[loads]
spot 11 Y-PQ 40 20 10 5 60 30
spot 13 Y-PQ 300 120 20 10 150 60
spot 14 Y-Z 0 0 0 0 80 40
spot 15 Y-I 100 50 200 90 20 10
[ders]
1 13 abc
2 14 c
";

pub struct SharedRun {
    _dir: tempfile::TempDir,
    pub cfg: RunConfig,
    pub outcome: TrainOutcome<f64>,
    pub summary: TrainSummary,
}

/// One seeded default-configuration training run shared by the tests that
/// need a trained agent.
pub fn shared_run() -> &'static SharedRun {
    static RUN: OnceLock<SharedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let (outcome, summary) = run_training(&cfg).expect("default training run");
        SharedRun {
            _dir: dir,
            cfg,
            outcome,
            summary,
        }
    })
}
