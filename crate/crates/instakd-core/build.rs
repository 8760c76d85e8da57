use sha2::{Digest, Sha256};
use std::fs;
use std::path::PathBuf;

// Embed a content hash of the crate sources so run records can pin the exact
// code state they were produced by.
fn main() {
    let src = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    collect_rs(&src, &mut files);
    files.sort();

    let mut hasher = Sha256::new();
    for f in &files {
        hasher.update(f.to_string_lossy().as_bytes());
        if let Ok(bytes) = fs::read(f) {
            hasher.update(&bytes);
        }
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=INSTAKD_SRC_HASH={}", &hex[..16]);
    println!("cargo:rerun-if-changed=src");
}

fn collect_rs(dir: &PathBuf, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect_rs(&path, out);
        } else if path.extension().is_some_and(|e| e == "rs") {
            out.push(path);
        }
    }
}
