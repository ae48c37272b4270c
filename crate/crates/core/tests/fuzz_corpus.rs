//! Replays the checked-in fuzz seeds through the same properties the fuzz
//! targets assert.

use std::path::PathBuf;

use crowdcast::annotations::AnnotationStream;
use crowdcast::density::{decode_sequence, encode_sequence};
use crowdcast::model::Checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

#[test]
fn cdmf_seeds() {
    let mut decoded = 0;
    for (name, bytes) in seeds("decode_cdmf") {
        if let Ok(seq) = decode_sequence(&bytes) {
            assert_eq!(encode_sequence(&seq), bytes, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (name, bytes) in seeds("decode_checkpoint") {
        if let Ok(ck) = Checkpoint::decode(&bytes) {
            assert_eq!(ck.encode().unwrap(), bytes, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn annotation_seeds() {
    let mut parsed = 0;
    for (name, bytes) in seeds("parse_annotations") {
        if let Ok(stream) = AnnotationStream::from_csv_bytes(&bytes) {
            let text = stream.to_csv_string().unwrap();
            let again = AnnotationStream::from_csv_bytes(text.as_bytes()).unwrap();
            assert_eq!(again.records(), stream.records(), "{name}");
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}
