use ssmixer::verify::{run, run_with, scan_equivalence, write_report, Selection, Suite};
use ssmixer_core::ssm::{combine, Pair};

fn swapped(later: Pair, earlier: Pair) -> Pair {
    combine(earlier, later)
}

#[test]
fn scan_check_catches_a_swapped_combine() {
    let good = scan_equivalence(6, 0, combine).unwrap();
    let bad = scan_equivalence(6, 0, swapped).unwrap();
    assert!(good <= 1e-10, "{good}");
    assert!(bad > 1e-3, "{bad}");
    let report = run_with(Selection(Some(Suite::Scan)), swapped).unwrap();
    let scan = report.iter().find(|r| r.check == "scan_parallel_vs_sequential").unwrap();
    assert!(!scan.passed());
}

#[test]
fn selections_parse() {
    assert_eq!("all".parse::<Selection>().unwrap(), Selection(None));
    assert_eq!("grad".parse::<Selection>().unwrap(), Selection(Some(Suite::Grad)));
    assert_eq!("props".parse::<Selection>().unwrap(), Selection(Some(Suite::Props)));
    assert!("everything".parse::<Selection>().is_err());
}

#[test]
fn count_suite_passes_and_reports_csv() {
    let results = run(Selection(Some(Suite::Count))).unwrap();
    assert!(results.iter().all(|r| r.passed() && r.suite == Suite::Count));
    let mut buf = Vec::new();
    write_report(&mut buf, &results).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "check,suite,measured,tolerance,status");
    assert!(text.contains("coefficient_count_mismatches,count,0.0"));
    assert_eq!(lines.count(), results.len());
}

#[test]
fn causal_suite_passes() {
    assert!(run(Selection(Some(Suite::Causal))).unwrap().iter().all(|r| r.passed()));
}

#[test]
fn every_suite_is_populated_and_passes() {
    let results = run(Selection(None)).unwrap();
    for s in Suite::ALL {
        assert!(results.iter().any(|r| r.suite == s), "{s} is empty");
    }
    let mut names: Vec<_> = results.iter().map(|r| r.check).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), results.len(), "duplicate check names");
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.check).collect();
    assert!(failed.is_empty(), "{failed:?}");
}
