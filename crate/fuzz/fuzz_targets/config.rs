#![no_main]

use libfuzzer_sys::fuzz_target;
use simreg::config::parse_key_values;
use simreg::trainer::TrainingConfig;

fuzz_target!(|text: &str| {
    let _ = parse_key_values(text);
    if let Ok(c) = TrainingConfig::from_text(text) {
        // Compared as text: NaN fields make struct equality useless.
        let snapshot = c.to_text();
        let again = TrainingConfig::from_text(&snapshot).expect("snapshot reparses");
        assert_eq!(snapshot, again.to_text());
        let _ = c.validate();
    }
});
