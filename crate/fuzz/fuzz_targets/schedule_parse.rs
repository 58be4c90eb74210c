#![no_main]

use libfuzzer_sys::fuzz_target;
use segattack::attack::AttackLoss;
use segattack::metrics::TieRule;
use segattack::objectives::LossKind;
use segattack::schedules::{parse_eps, EpsPhases, QSchedule};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(q) = s.parse::<QSchedule>() {
        assert_eq!(q.to_string().parse::<QSchedule>().unwrap(), q);
        for t in 0..4 {
            assert!(q.q_at(t, 4).unwrap() <= 1.0);
        }
    }
    if let Ok(p) = s.parse::<EpsPhases>() {
        let b = p.boundaries(100);
        assert_eq!(b.last(), Some(&100));
    }
    if let Ok(e) = parse_eps(s) {
        assert!(e > 0.0 && e <= 1.0);
    }
    if let Ok(k) = s.parse::<LossKind>() {
        let _ = k.to_string().parse::<LossKind>().unwrap();
    }
    if let Ok(a) = s.parse::<AttackLoss>() {
        assert_eq!(a.to_string().parse::<AttackLoss>().unwrap(), a);
    }
    let _ = s.parse::<TieRule>();
});
