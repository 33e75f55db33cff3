#![no_main]

use libfuzzer_sys::fuzz_target;
use simreg::archive::Archive;
use simreg::siamese::InferenceModel;
use simreg::trainer::Checkpoint;

fuzz_target!(|bytes: &[u8]| {
    let Ok(ar) = Archive::from_bytes(bytes) else { return };
    let again = Archive::from_bytes(&ar.to_bytes()).expect("encoded archive decodes");
    assert_eq!(ar.to_bytes(), again.to_bytes());
    let _ = Checkpoint::from_archive(&ar);
    let _ = InferenceModel::from_archive(&ar);
});
