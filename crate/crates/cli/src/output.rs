//! Artifact writers. JSON keys follow struct field order; floats use the shortest
//! round-trip representation so repeated runs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Writes artifacts into one directory and remembers their names.
#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    written: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(ArtifactDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.root.join(name), text)?;
        self.record(name);
        Ok(())
    }

    /// Floats use the shortest round-trip form; NaN becomes an empty cell.
    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        let mut w = csv::Writer::from_path(self.root.join(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v:?}") }))?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }
}

/// Up to `max_layers` evenly spaced layer indices in `0..=n`, always with both ends.
pub fn thin_layers(n: usize, max_layers: usize) -> Vec<usize> {
    let stride = n.div_ceil(max_layers.max(2) - 1).max(1);
    let mut ks: Vec<usize> = (0..=n).step_by(stride).collect();
    if ks.last() != Some(&n) {
        ks.push(n);
    }
    ks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_keep_both_ends() {
        assert_eq!(thin_layers(10, 65), (0..=10).collect::<Vec<_>>());
        assert_eq!(thin_layers(1024, 65), (0..=1024).step_by(16).collect::<Vec<_>>());
        let ks = thin_layers(100, 8);
        assert_eq!((ks[0], *ks.last().unwrap()), (0, 100));
        assert!(ks.len() <= 9);
    }

    #[test]
    fn writes_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = ArtifactDir::create(&dir.path().join("nested")).unwrap();
        out.csv("a.csv", &["x", "y"], vec![vec![0.1, 2.0], vec![f64::NAN, 1e-20]]).unwrap();
        assert_eq!(fs::read_to_string(out.root().join("a.csv")).unwrap(), "x,y\n0.1,2.0\n,1e-20\n");
        out.json("b.json", &serde_json::json!({"k": 1.5})).unwrap();
        out.csv("a.csv", &["x", "y"], vec![vec![0.1, 2.0]]).unwrap();
        assert_eq!(out.written(), &["a.csv", "b.json"]);
    }
}
