#![no_main]

use libfuzzer_sys::fuzz_target;
use simreg::data::DatasetManifest;

fuzz_target!(|text: &str| {
    if let Ok(m) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&m.to_csv()).expect("written manifest reparses");
        assert_eq!(m.rows, again.rows);
        assert_eq!(m.class_names, again.class_names);
    }
});
