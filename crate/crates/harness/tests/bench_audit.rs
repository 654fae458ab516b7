use ssmixer::audit::{audit, breakdown};
use ssmixer::bench::{parse_sizes, run, BenchOptions, Component};
use ssmixer::experiment::{ExperimentConfig, Model};
use ssmixer_core::{ParamStore, SplitMix64};

#[test]
fn sizes_double_between_bounds() {
    assert_eq!(parse_sizes("1024:8192").unwrap(), vec![1024, 2048, 4096, 8192]);
    assert_eq!(parse_sizes("3:20").unwrap(), vec![3, 6, 12]);
    assert_eq!(parse_sizes("16:16").unwrap(), vec![16]);
    for bad in ["", "8", "0:4", "9:4", "a:b"] {
        assert!(parse_sizes(bad).is_err(), "{bad}");
    }
}

#[test]
fn components_parse_and_print() {
    for c in [Component::Token, Component::Channel, Component::Block] {
        assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
    }
    assert!("mixer".parse::<Component>().is_err());
}

#[test]
fn bench_rows_chain_ratios() {
    let opts = BenchOptions { reps: 1, warmup: 0, work_per_sample: 64 };
    for c in [Component::Token, Component::Channel, Component::Block] {
        let rows = run(c, &[16, 32], &opts).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].ratio.is_none());
        let r = rows[1].ratio.unwrap();
        assert!((r - rows[1].median_seconds / rows[0].median_seconds).abs() < 1e-12);
        assert!(rows.iter().all(|x| x.median_seconds > 0.0 && x.component == c));
    }
}

#[test]
fn audit_totals_match_the_store() {
    let cfg = ExperimentConfig::tsm2_desk().model;
    let (rows, total) = audit(&cfg, 1).unwrap();
    assert_eq!(rows.iter().map(|r| r.scalars).sum::<usize>(), total);
    let mut store = ParamStore::new();
    Model::build(&cfg, &mut store, &mut SplitMix64::new(5)).unwrap();
    assert_eq!(store.num_scalars(), total);
    assert_eq!(rows.iter().map(|r| r.tensors).sum::<usize>(), store.iter().count());
    let deep = breakdown(&store, 8);
    assert_eq!(deep.len(), store.iter().count());
    let mut names: Vec<_> = rows.iter().map(|r| r.module.clone()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), rows.len());
}
