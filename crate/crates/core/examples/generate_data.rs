//! Regenerate the sample datasets under `data/` at the workspace root.
//!
//! ```sh
//! cargo run -p lexgrad --example generate_data
//! ```

use lexgrad::synth::{synthetic_ner, synthetic_nli};
use std::io::Write;
use std::path::Path;

fn main() -> std::io::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    std::fs::create_dir_all(&root)?;

    let ner = synthetic_ner(120, 2024);
    let mut f = std::fs::File::create(root.join("ner_sample.jsonl"))?;
    for rec in &ner {
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }

    let nli = synthetic_nli(40, 2024);
    let mut f = std::fs::File::create(root.join("nli_sample.tsv"))?;
    writeln!(f, "premise\thypothesis\tlabel\tlegal_act")?;
    for rec in &nli {
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            rec.premise, rec.hypothesis, rec.label, rec.legal_act
        )?;
    }

    println!(
        "wrote {} tagging records and {} pair records to {}",
        ner.len(),
        nli.len(),
        root.display()
    );
    Ok(())
}
