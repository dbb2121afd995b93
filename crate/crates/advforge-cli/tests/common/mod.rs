//! Shared plumbing for the CLI integration tests: locating (or unpacking)
//! the MNIST files, spawning the binary, and parsing its CSV outputs.

#![allow(dead_code)] // each test binary uses its own subset of these helpers

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Directory holding the raw IDX files. `ADVFORGE_DATA` wins when set;
/// otherwise the gzipped copies vendored under `data/mnist/` are unpacked
/// once into the target tmpdir.
pub fn data_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        if let Some(dir) = std::env::var_os("ADVFORGE_DATA") {
            return PathBuf::from(dir);
        }
        let vendored = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data/mnist")
            .canonicalize()
            .expect("vendored data directory exists");
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("mnist");
        std::fs::create_dir_all(&out).unwrap();
        for name in IDX_FILES {
            let dst = out.join(name);
            if dst.exists() {
                continue;
            }
            let gz = std::fs::File::open(vendored.join(format!("{name}.gz")))
                .unwrap_or_else(|e| panic!("opening vendored {name}.gz: {e}"));
            let mut raw = Vec::new();
            flate2::read::GzDecoder::new(gz)
                .read_to_end(&mut raw)
                .unwrap_or_else(|e| panic!("unpacking {name}.gz: {e}"));
            let tmp = out.join(format!(".{name}.tmp"));
            std::fs::write(&tmp, raw).unwrap();
            std::fs::rename(&tmp, &dst).unwrap();
        }
        out
    })
}

/// A `Command` for the compiled binary with the data directory preset.
pub fn advforge() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_advforge"));
    cmd.env("ADVFORGE_DATA", data_dir());
    cmd
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning advforge");
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        cmd.get_args().collect::<Vec<_>>(),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn run_expect_code(cmd: &mut Command, code: i32) -> Output {
    let out = cmd.output().expect("spawning advforge");
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?}: expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        cmd.get_args().collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Accuracy matrix as written by `eval`: `cells[(row_id, col_id)]`.
pub struct Matrix {
    pub row_kind: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: HashMap<(String, String), f64>,
}

impl Matrix {
    pub fn get(&self, row: &str, col: &str) -> f64 {
        *self
            .cells
            .get(&(row.to_string(), col.to_string()))
            .unwrap_or_else(|| panic!("no cell ({row}, {col}); rows {:?} cols {:?}", self.rows, self.cols))
    }
}

pub fn read_matrix(path: &Path) -> Matrix {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("matrix header").split(',').collect();
    let row_kind = header[0].to_string();
    let cols: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut cells = HashMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), cols.len() + 1, "ragged matrix row: {line}");
        let row = fields[0].to_string();
        for (col, v) in cols.iter().zip(&fields[1..]) {
            let parsed: f64 = v.parse().unwrap_or_else(|e| panic!("cell {v}: {e}"));
            cells.insert((row.clone(), col.clone()), parsed);
        }
        rows.push(row);
    }
    Matrix {
        row_kind,
        rows,
        cols,
        cells,
    }
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(
        &std::fs::read_to_string(path)
            .unwrap_or_else(|e| panic!("reading {}: {e}", path.display())),
    )
    .unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}
