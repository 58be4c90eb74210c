#![no_main]

use libfuzzer_sys::fuzz_target;
use segattack::metrics::{rank_rows, TieRule};
use segattack::report::WideTable;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(t) = WideTable::parse(s) else { return };
    assert_eq!(WideTable::parse(&t.to_csv().unwrap()).unwrap(), t);
    for rule in [TieRule::Min, TieRule::Average] {
        if let Ok(r) = rank_rows(&t.rows, rule) {
            let n = t.attacks.len() as f64;
            assert!(r.avg_acc.iter().chain(&r.avg_miou).all(|v| (1.0..=n).contains(v)));
            let _ = t.ranks_csv(&r).unwrap();
        }
    }
});
