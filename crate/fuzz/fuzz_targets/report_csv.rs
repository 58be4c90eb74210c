#![no_main]

use libfuzzer_sys::fuzz_target;
use segattack::report;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = report::parse_report_csv(s) {
        let _ = report::report_csv(&rows).unwrap();
    }
    if let Ok(rows) = report::parse_sea_csv(s) {
        let _ = report::sea_csv(&rows).unwrap();
    }
    if let Ok(rows) = report::parse_detail_csv(s) {
        let _ = report::detail_csv(&rows).unwrap();
    }
    if let Ok(rows) = report::parse_attack_csv(s) {
        let _ = report::attack_csv(&rows).unwrap();
    }
    if let Ok(rows) = report::parse_curves_csv(s) {
        let _ = report::curves_csv(&rows).unwrap();
    }
});
