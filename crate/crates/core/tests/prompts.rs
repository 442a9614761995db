use std::path::{Path, PathBuf};

use timesaf::preprocess::load_csv;
use timesaf::prompts::{render_prompt, PromptTemplateSpec, PromptVariant};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(rel)
}

/// One prompt per channel of the bundled example window, newline-terminated.
fn render_example(variant: PromptVariant) -> String {
    let series = load_csv(fixture("data/example_window.csv"), b',').unwrap();
    let spec = PromptTemplateSpec {
        variant,
        ..Default::default()
    };
    let (first, last) = (&series.timestamps[0], series.timestamps.last().unwrap());
    series
        .channels
        .iter()
        .map(|c| render_prompt(c, first, last, &spec) + "\n")
        .collect()
}

#[test]
fn rendered_prompts_match_goldens() {
    for variant in PromptVariant::ALL {
        let golden = std::fs::read(fixture(&format!("golden/{}.txt", variant.as_str()))).unwrap();
        assert_eq!(
            render_example(variant).as_bytes(),
            golden.as_slice(),
            "{} prompt drifted from its golden",
            variant.as_str()
        );
    }
}
