#![no_main]

use crowdcast::annotations::AnnotationStream;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(stream) = AnnotationStream::from_csv_bytes(data) else {
        return;
    };
    // Written output parses back to the same records.
    let text = stream.to_csv_string().expect("valid streams serialize");
    let again = AnnotationStream::from_csv_bytes(text.as_bytes())
        .expect("written CSV parses");
    assert_eq!(again.records(), stream.records());
    let _ = stream.check_bounds(80, 80);
});
