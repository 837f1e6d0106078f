mod common;

use common::small_run;
use exagree_cli::pipeline::{self, TargetInput};
use exagree_core::attribution::BaselineKind;
use exagree_core::saem::ExplainerKind;
use exagree_core::MhmnConfig;

fn swapped_target() -> TargetInput {
    let mut ranking: Vec<usize> = (1..=20).collect();
    ranking.swap(2, 3);
    TargetInput::Ranking {
        ranking,
        signs: None,
        stakeholder_id: Some("analyst".into()),
    }
}

#[test]
fn audit_scores_every_model_and_explainer() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_run(&dir.path().join("run"), 1);
    let rec = pipeline::target(&mut run, &swapped_target(), None, None).unwrap();
    let cfg = MhmnConfig {
        heads: 6,
        epochs: 30,
        ..Default::default()
    };
    pipeline::search(&mut run, Some(&rec.target_id), cfg, &|_, _| {}).unwrap();

    let explainers = [
        ExplainerKind::PermutationFis,
        ExplainerKind::Baseline(BaselineKind::Random),
        ExplainerKind::Baseline(BaselineKind::GradXInput),
    ];
    let out = pipeline::audit(&mut run, &[0.25, 0.5], &explainers, 0).unwrap();
    assert!(out.fairness.is_empty());
    let models: Vec<&str> = out.audit.blocks.iter().map(|b| b.model_id.as_str()).collect();
    let saem = format!("saem:{}", rec.target_id);
    assert_eq!(models, ["reference", "reference", &saem, &saem]);
    for block in &out.audit.blocks {
        assert_eq!(block.rows.len(), explainers.len());
        assert_eq!(block.best.len(), explainers.len());
        for row in &block.rows {
            for m in ["fa", "ra", "sa", "sra", "pra"] {
                let v = row.metric(m).unwrap();
                assert!((0.0..=1.0).contains(&v), "{m} = {v}");
            }
        }
        // A linear reference has exact gradients, so gradient times input
        // recovers the top features at least as well as noise does.
        let fa = |name: &str| block.rows.iter().find(|r| r.method == name).unwrap().fa;
        assert!(fa("grad_x_input") >= fa("random"), "{block:?}");
    }
    for f in ["reports/audit.json", "reports/audit.txt"] {
        assert!(run.path(f).exists(), "{f}");
    }
}

#[test]
fn ablation_forks_one_child_per_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_run(&dir.path().join("run"), 5);
    pipeline::target(&mut run, &swapped_target(), None, None).unwrap();
    let ks = [0.25, 1.0];
    let report = pipeline::ablate(&mut run, &[0.02, 0.1], &ks, &|_| {}).unwrap();
    assert_eq!(report.rows.len(), 4);
    for (i, row) in report.rows.iter().enumerate() {
        assert_eq!(row.epsilon, [0.02, 0.1][i / 2]);
        assert_eq!(row.k, ks[i % 2]);
        assert_eq!(row.masks, 200);
        assert!(row.spearman_vs_target >= row.identity_spearman, "{row:?}");
    }
    for eps in ["0.02", "0.1"] {
        let child = run.path(&format!("ablation/eps_{eps}"));
        assert!(child.join("manifest.json").exists());
        assert_eq!(
            std::fs::read(child.join("dataset.csv")).unwrap(),
            std::fs::read(run.path("dataset.csv")).unwrap()
        );
    }
    let text = std::fs::read_to_string(run.path("reports/ablation.txt")).unwrap();
    assert_eq!(text.lines().count(), 2 + report.rows.len());
    assert!(pipeline::ablate(&mut run, &[], &ks, &|_| {}).is_err());
}
