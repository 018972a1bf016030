use tailsampler::sim::{self, compare::CompareError, Strategy};
use tailsampler::{compare_strategies, reference, Bin};

fn run(strategy: Strategy) -> tailsampler::SimulationReport {
    let (ds, bins) = reference::dataset().unwrap();
    let mut cfg = reference::sim_config(strategy);
    cfg.epochs = 3;
    sim::run(&ds, &bins, &cfg).unwrap()
}

#[test]
fn self_comparison_has_no_deltas() {
    let r = run(Strategy::Rio);
    let table = compare_strategies(&[r.clone(), r]).unwrap();
    for row in &table.fig4b {
        assert_eq!(row.gt_change_pct, 0.0);
        assert_eq!(row.effective_change_pct, 0.0);
    }
    let half = table.fig4d.len() / 2;
    assert_eq!(table.fig4d[..half].len(), table.fig4d[half..].len());
    for (a, b) in table.fig4d[..half].iter().zip(&table.fig4d[half..]) {
        assert_eq!((a.gt_per_epoch, a.effective_per_epoch), (b.gt_per_epoch, b.effective_per_epoch));
    }
}

#[test]
fn different_datasets_are_rejected() {
    let a = run(Strategy::Baseline);
    let mut b = a.clone();
    b.meta.dataset_digest = "0".repeat(64);
    b.meta.epochs += 1;
    match compare_strategies(&[a, b]) {
        Err(CompareError::Mismatch { index, fields }) => {
            assert_eq!(index, 1);
            assert!(fields.iter().any(|f| f.starts_with("dataset_digest")));
            assert!(fields.iter().any(|f| f.starts_with("epochs")));
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn rfs_adds_frequent_instances_over_baseline() {
    let base = run(Strategy::Baseline);
    let rfs = run(Strategy::Rfs);
    let table = compare_strategies(&[base.clone(), rfs.clone()]).unwrap();
    let row = table.bin_row(1, Bin::Frequent).unwrap();
    let a = base.bin_total(Bin::Frequent).gt_instances as f64;
    let b = rfs.bin_total(Bin::Frequent).gt_instances as f64;
    assert!(row.gt_change_pct > 0.0);
    assert!((row.gt_change_pct - 100.0 * (b - a) / a).abs() < 1e-9);
}
