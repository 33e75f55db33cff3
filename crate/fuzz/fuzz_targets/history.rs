#![no_main]

use libfuzzer_sys::fuzz_target;
use simreg::trainer::TrainingHistory;

fuzz_target!(|text: &str| {
    if let Ok(h) = TrainingHistory::parse_jsonl(text) {
        let again = TrainingHistory::parse_jsonl(&h.to_jsonl()).expect("written history reparses");
        assert_eq!(h.steps.len(), again.steps.len());
        assert_eq!(h.epochs.len(), again.epochs.len());
    }
});
