//! Parses a few layout documents and lists every rule they break.
//! Pass file paths to check your own.

use cirfuse::layout::serialize_layout;
use cirfuse::{duplicate_image_instances, parse_layout, Error};

const SAMPLES: &[(&str, &str)] = &[
    (
        "ok",
        r#"{"scene":"a kitchen","instances":[
            {"desc":"red kettle","bbox":[0.1,0.2,0.4,0.5],"modality":"image"},
            {"desc":"window","bbox":[0.5,0.0,0.9,0.3],"modality":"text"}]}"#,
    ),
    (
        "bad box",
        r#"{"scene":"a beach","instances":[{"desc":"ball","bbox":[0.7,0.2,0.4,1.2],"modality":"text"}]}"#,
    ),
    ("no scene", r#"{"scene":"","instances":[]}"#),
    ("broken", r#"{"scene": "x", "instances": ["#),
];

fn main() {
    let files: Vec<String> = std::env::args().skip(1).collect();
    let docs: Vec<(String, String)> = if files.is_empty() {
        SAMPLES
            .iter()
            .map(|(n, d)| (n.to_string(), d.to_string()))
            .collect()
    } else {
        files
            .into_iter()
            .map(|f| {
                let text = std::fs::read_to_string(&f).unwrap_or_default();
                (f, text)
            })
            .collect()
    };

    for (name, text) in docs {
        match parse_layout(&text) {
            Ok(l) => {
                let dup = duplicate_image_instances(&l);
                println!(
                    "{name}: ok, {} instances ({} after duplication)",
                    l.instances.len(),
                    dup.instances.len()
                );
                println!("{}", serialize_layout(&dup));
            }
            Err(Error::Validation(found)) => {
                for v in found {
                    println!("{name}: {v}");
                }
            }
            Err(e) => println!("{name}: {e}"),
        }
    }
}
