//! Per-epoch checkpoints of the flattened prompt.
//!
//! Row 0 is the initialization, row `t >= 1` the prompt at the end of epoch
//! `t`. On disk:
//!
//! ```text
//! SUBPT-TRAJ 1 <row_count> <param_dim>
//! # <config fingerprint>
//! <row 0>
//! ...
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::textio;

pub const MAGIC: &str = "SUBPT-TRAJ";

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    param_dim: usize,
    rows: Vec<Vec<f64>>,
    fingerprint: String,
}

impl Trajectory {
    /// Empty trajectory; `fingerprint` identifies the producing run and must
    /// fit on one line.
    pub fn new(param_dim: usize, fingerprint: impl Into<String>) -> Result<Self> {
        if param_dim == 0 {
            return Err(Error::ZeroDimension("trajectory param_dim"));
        }
        let fingerprint = fingerprint.into().replace(['\n', '\r'], " ");
        Ok(Self {
            param_dim,
            rows: Vec::new(),
            fingerprint,
        })
    }

    pub fn from_rows(param_dim: usize, fingerprint: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut t = Self::new(param_dim, fingerprint)?;
        for r in rows {
            t.record(r)?;
        }
        Ok(t)
    }

    /// Appends `v` as the newest checkpoint. On error the trajectory is unchanged.
    pub fn record(&mut self, v: impl Into<Vec<f64>>) -> Result<()> {
        let v = v.into();
        if v.len() != self.param_dim {
            return Err(Error::DimensionMismatch {
                what: "checkpoint length",
                expected: self.param_dim,
                got: v.len(),
            });
        }
        if !all_finite(&v) {
            return Err(Error::NonFinite("checkpoint"));
        }
        self.rows.push(v);
        Ok(())
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Index of the last recorded epoch (row count minus one).
    pub fn last_epoch(&self) -> Option<usize> {
        self.rows.len().checked_sub(1)
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MAGIC} 1 {} {}\n# {}\n",
            self.rows.len(),
            self.param_dim,
            self.fingerprint
        );
        for r in &self.rows {
            s.push_str(&textio::fmt_row(r));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = textio::check_header(lines.next(), MAGIC, origin)?;
        if head.len() != 2 {
            return Err(Error::bad_format(
                origin,
                "dimension line must be <row_count> <param_dim>",
            ));
        }
        let count = textio::parse_usize(Some(head[0]), origin, "row count")?;
        let dim = textio::parse_usize(Some(head[1]), origin, "param_dim")?;
        if count == 0 || dim == 0 {
            return Err(Error::bad_format(origin, "row count and param_dim must be positive"));
        }
        let fingerprint = match lines.next() {
            Some(l) if l.starts_with('#') => l.trim_start_matches('#').trim_start().to_string(),
            _ => return Err(Error::bad_format(origin, "line 2 must be a '# fingerprint' comment")),
        };
        let mut t = Self::new(dim, fingerprint)?;
        for i in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::bad_format(origin, format!("missing row {i}")))?;
            t.rows.push(textio::parse_row(line, dim, origin, "trajectory row")?);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::bad_format(origin, "trailing data after last row"));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::ConfigInvalid("cannot save an empty trajectory".into()));
        }
        textio::write(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&textio::read(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_appends_in_order() {
        let mut t = Trajectory::new(2, "x").unwrap();
        t.record(vec![1.0, 2.0]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.row(0).unwrap(), &[1.0, 2.0]);
        for k in 0..4 {
            t.record(vec![k as f64, 0.0]).unwrap();
        }
        assert_eq!(t.len(), 5);
        assert_eq!(t.row(4).unwrap(), &[3.0, 0.0]);
    }

    #[test]
    fn record_rejects_nan_and_wrong_length() {
        let mut t = Trajectory::new(2, "x").unwrap();
        t.record(vec![1.0, 2.0]).unwrap();
        let before = t.clone();
        assert!(matches!(t.record(vec![f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(t.record(vec![0.0]), Err(Error::DimensionMismatch { .. })));
        assert_eq!(t, before);
    }

    #[test]
    fn golden_file() {
        let text = "SUBPT-TRAJ 1 2 3\n# golden\n1 0 0\n0 1 0\n";
        let t = Trajectory::from_text(text, "golden").unwrap();
        assert_eq!(t.param_dim(), 3);
        assert_eq!(t.rows(), &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(t.fingerprint(), "golden");
    }

    #[test]
    fn rejects_unknown_version_and_bad_headers() {
        for text in [
            "SUBPT-TRAJ 9 1 1\n# x\n0\n",
            "SUBPT-TASK 1 1 1\n# x\n0\n",
            "SUBPT-TRAJ 1 1\n# x\n0\n",
            "SUBPT-TRAJ 1 2 1\n# x\n0\n",
            "SUBPT-TRAJ 1 1 2\n# x\n0\n",
            "SUBPT-TRAJ 1 1 1\n0\n",
        ] {
            assert!(
                matches!(Trajectory::from_text(text, "t"), Err(Error::BadFormat { .. })),
                "{text:?}"
            );
        }
        assert!(matches!(
            Trajectory::from_text("SUBPT-TRAJ 1 1 1\n# x\nNaN\n", "t"),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let t = Trajectory::from_rows(
            5,
            "seed=3",
            (0..3)
                .map(|i| (0..5).map(|j| ((i * 5 + j) as f64).sin() / 7.0).collect())
                .collect(),
        )
        .unwrap();
        t.save(&path).unwrap();
        let back = Trajectory::load(&path).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            Trajectory::load(dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn text_is_canonical(
            rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 4), 1..6)
        ) {
            let t = Trajectory::from_rows(4, "p", rows).unwrap();
            let text = t.to_text();
            let back = Trajectory::from_text(&text, "p").unwrap();
            for (a, b) in back.rows().iter().flatten().zip(t.rows().iter().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
