//! Shared fixtures for the criterion benches.

use ara_core::attacks::{AttackConfig, AttackProblem, LabelInfo};
use ara_core::dataio::MaskedRecords;
use ara_core::fedsim::{resolve_window, WindowName};
use ara_core::harness::{prepare_run, ExperimentConfig, PreparedRun};

/// A finished 10-round federation over a 50-record victim with one hidden
/// layer of 128 units.
pub fn prepared() -> PreparedRun {
    let cfg = ExperimentConfig::from_toml(
        r#"
        seed = 1
        [dataset]
        kind = "synthetic"
        n = 2000
        attributes = 16
        [federation]
        rounds = 10
        [attack]
        windows = ["pre5"]
        "#,
    )
    .expect("bench config");
    prepare_run(&cfg, 0).expect("federation")
}

pub fn masked(run: &PreparedRun) -> MaskedRecords {
    MaskedRecords::from_dataset(&run.victim, run.codebook.column()).expect("masking")
}

pub fn problem<'a>(run: &'a PreparedRun, records: &'a MaskedRecords, iterations: usize) -> AttackProblem<'a> {
    AttackProblem {
        records,
        labels: LabelInfo::Known {
            labels: run.victim.labels().to_vec(),
        },
        codebook: &run.codebook,
        store: &run.store,
        window: resolve_window(&run.store, WindowName::Pre5).expect("window"),
        prior: None,
        config: AttackConfig {
            iterations,
            ..AttackConfig::default()
        },
    }
}
