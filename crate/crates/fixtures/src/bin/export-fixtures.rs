use std::path::PathBuf;

fn main() {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(camrefine_fixtures::bundle_dir);
    if let Err(e) = camrefine_fixtures::export::export(&dir) {
        eprintln!("export-fixtures: {e}");
        std::process::exit(1);
    }
    println!("wrote fixture bundle to {}", dir.display());
}
