#![no_main]

use gpdit::model::{decode_checkpoint, GPDiTModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    let _: Result<GPDiTModel<f32>, _> = decode_checkpoint(bytes);
});
