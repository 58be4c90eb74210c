#![no_main]

use libfuzzer_sys::fuzz_target;
use segattack::config::BenchConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = BenchConfig::parse(s) {
        let again = BenchConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }
});
