//! Corrupted manifests: every invariant violation is rejected with a data
//! error, and arbitrary byte damage never panics.

use proptest::prelude::*;

use xdepict::data::DatasetManifest;
use xdepict::Error;

const HEADER: &str = r#"{"manifest":{"split":"train","styles":["filled","outline"]}}"#;
const GOOD: [&str; 2] = [
    r#"{"path":"images/a.png","width":64,"height":48,"style":"filled","boxes":[{"x1":1.0,"y1":2.0,"x2":30.0,"y2":40.0,"difficult":false,"style":"filled"}]}"#,
    r#"{"path":"images/b.png","width":32,"height":32,"boxes":[{"x1":0.0,"y1":0.0,"x2":32.0,"y2":32.0,"difficult":true,"style":"outline"}]}"#,
];

fn manifest(lines: &[&str]) -> String {
    let mut s = String::from(HEADER);
    for l in lines {
        s.push('\n');
        s.push_str(l);
    }
    s.push('\n');
    s
}

fn parse(text: &str) -> xdepict::Result<DatasetManifest> {
    DatasetManifest::parse(text, ".", "fuzz.jsonl")
}

#[test]
fn baseline_parses() {
    let m = parse(&manifest(&GOOD)).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(parse(&m.to_jsonl().unwrap()).unwrap(), m);
}

/// One targeted corruption per invariant, applied to the first entry.
#[test]
fn every_invariant_violation_is_rejected() {
    let g = GOOD[0];
    let cases: Vec<(&str, String)> = vec![
        ("x2 <= x1", g.replace(r#""x2":30.0"#, r#""x2":1.0"#)),
        ("x2 < x1", g.replace(r#""x2":30.0"#, r#""x2":0.5"#)),
        ("y2 <= y1", g.replace(r#""y2":40.0"#, r#""y2":2.0"#)),
        ("right of image", g.replace(r#""x2":30.0"#, r#""x2":64.5"#)),
        ("below image", g.replace(r#""y2":40.0"#, r#""y2":49.0"#)),
        ("negative x", g.replace(r#""x1":1.0"#, r#""x1":-1.0"#)),
        ("negative y", g.replace(r#""y1":2.0"#, r#""y1":-0.5"#)),
        ("zero width image", g.replace(r#""width":64"#, r#""width":0"#)),
        ("zero height image", g.replace(r#""height":48"#, r#""height":0"#)),
        ("negative size", g.replace(r#""width":64"#, r#""width":-64"#)),
        ("empty path", g.replace("images/a.png", "")),
        ("box style outside vocabulary", g.replace(r#""difficult":false,"style":"filled""#, r#""difficult":false,"style":"cubist""#)),
        ("image style outside vocabulary", g.replace(r#""style":"filled","boxes""#, r#""style":"cubist","boxes""#)),
        ("unknown field", g.replace(r#""width":64"#, r#""width":64,"depth":3"#)),
        ("unknown box field", g.replace(r#""difficult":false"#, r#""difficult":false,"truncated":1"#)),
        ("missing path", g.replace(r#""path":"images/a.png","#, "")),
        ("missing coordinate", g.replace(r#""x1":1.0,"#, "")),
        ("string coordinate", g.replace(r#""x1":1.0"#, r#""x1":"1.0""#)),
        ("difficult not bool", g.replace(r#""difficult":false"#, r#""difficult":"no""#)),
        ("truncated line", g[..g.len() - 5].to_string()),
        ("not an object", "[1,2,3]".to_string()),
        ("bare text", "hello".to_string()),
        ("duplicate path", GOOD[1].replace("images/b.png", "images/a.png")),
    ];
    for (what, line) in cases {
        let text = if what == "duplicate path" {
            manifest(&[GOOD[0], &line])
        } else {
            manifest(&[&line, GOOD[1]])
        };
        match parse(&text) {
            Err(Error::Data(msg)) => assert!(msg.contains("fuzz.jsonl: line"), "{what}: {msg}"),
            other => panic!("{what}: expected a data error, got {other:?}"),
        }
    }
}

#[test]
fn error_names_the_image_and_line() {
    let bad = GOOD[1].replace(r#""x2":32.0"#, r#""x2":0.0"#);
    let err = parse(&manifest(&[GOOD[0], &bad])).unwrap_err().to_string();
    assert!(err.contains("images/b.png") && err.contains("line 3"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    /// Random byte edits: parsing returns either a manifest that satisfies
    /// every invariant or an error; it never panics.
    #[test]
    fn damaged_bytes_never_panic(edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 1..8)) {
        let mut bytes = manifest(&GOOD).into_bytes();
        for (at, byte, op) in edits {
            if bytes.is_empty() {
                break;
            }
            let i = at.index(bytes.len());
            match op {
                0 => bytes[i] = byte,
                1 => { bytes.remove(i); }
                _ => bytes.insert(i, byte),
            }
        }
        let text = String::from_utf8_lossy(&bytes);
        if let Ok(m) = parse(&text) {
            prop_assert!(m.validate().is_ok());
            for e in &m.entries {
                for b in &e.boxes {
                    prop_assert!(b.x2 > b.x1 && b.y2 > b.y1);
                    prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= e.width as f64 && b.y2 <= e.height as f64);
                }
            }
        }
    }

    /// Random numeric values for one box: accepted exactly when the box is
    /// valid and inside the image.
    #[test]
    fn coordinates_accepted_iff_valid(x1 in -10.0..80.0f64, y1 in -10.0..60.0f64, x2 in -10.0..80.0f64, y2 in -10.0..60.0f64) {
        let line = format!(
            r#"{{"path":"p.png","width":64,"height":48,"boxes":[{{"x1":{x1},"y1":{y1},"x2":{x2},"y2":{y2},"difficult":false,"style":"filled"}}]}}"#
        );
        let valid = x2 > x1 && y2 > y1 && x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 48.0;
        prop_assert_eq!(parse(&manifest(&[&line])).is_ok(), valid);
    }
}
