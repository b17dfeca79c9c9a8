// Byte-for-byte check of the rendered prompt catalog against the frozen
// golden file. Regenerate deliberately with:
//   FAIRGEN_BLESS=1 cargo test -p fairgen --test golden_prompts
// and review the diff before committing.

use std::path::Path;

use fairgen::prompt::catalog_text;

#[test]
fn prompt_catalog_matches_golden_file() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompts.txt");
    let rendered = catalog_text();
    if std::env::var_os("FAIRGEN_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &rendered).unwrap();
    }
    let golden = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden file {}: {e}", path.display()));
    assert_eq!(
        rendered,
        golden,
        "rendered prompt catalog diverges from {}",
        path.display()
    );
}
