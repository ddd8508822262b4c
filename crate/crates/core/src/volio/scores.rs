//! Case-level score tables: per-case labels and one classifier score per
//! dataset variant (at least original / rigid / deformable).

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volio::atomic_write;

pub const REQUIRED_VARIANTS: [&str; 3] = ["original", "rigid", "deformable"];

/// Rows of (case id, csPCa label, score per variant). Scores are in [0, 1];
/// labels are {0, 1} with 1 = clinically significant cancer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    case_ids: Vec<String>,
    labels: Vec<u8>,
    variants: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn new(
        case_ids: Vec<String>,
        labels: Vec<u8>,
        variants: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = case_ids.len();
        if labels.len() != n {
            return Err(Error::invalid("labels and case_ids differ in length"));
        }
        let mut seen = HashSet::new();
        for id in &case_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate case_id {id:?}")));
            }
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        for (name, scores) in &variants {
            if scores.len() != n {
                return Err(Error::invalid(format!("variant {name:?} has {} scores for {n} cases", scores.len())));
            }
            if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::invalid(format!("variant {name:?} has scores outside [0, 1]")));
            }
        }
        Ok(ScoreTable { case_ids, labels, variants })
    }

    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn variant(&self, name: &str) -> Option<&[f64]> {
        self.variants.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }

    pub fn variant_names(&self) -> Vec<&str> {
        self.variants.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Read `case_id,label,score_original,score_rigid,score_deformable[,score_*...]`.
/// Parse failures name the offending 1-based line.
pub fn read_scores_csv(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format("line 1: empty file, expected header"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 || columns[0] != "case_id" || columns[1] != "label" {
        return Err(Error::format(
            "line 1: header must start with case_id,label".to_string(),
        ));
    }
    let mut variant_names = Vec::new();
    for col in &columns[2..] {
        match col.strip_prefix("score_") {
            Some(name) if !name.is_empty() => variant_names.push(name.to_string()),
            _ => return Err(Error::format(format!("line 1: unexpected column {col:?}, expected score_*"))),
        }
    }
    for required in REQUIRED_VARIANTS {
        if !variant_names.iter().any(|n| n == required) {
            return Err(Error::format(format!("line 1: missing column score_{required}")));
        }
    }

    let mut case_ids = Vec::new();
    let mut labels = Vec::new();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); variant_names.len()];
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::format(format!(
                "line {lineno}: expected {} fields, got {}",
                columns.len(),
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if case_ids.contains(&id) {
            return Err(Error::format(format!("line {lineno}: duplicate case_id {id:?}")));
        }
        let label: i64 = fields[1]
            .parse()
            .map_err(|_| Error::format(format!("line {lineno}: label {:?} is not an integer", fields[1])))?;
        if label != 0 && label != 1 {
            return Err(Error::format(format!("line {lineno}: label must be 0 or 1, got {label}")));
        }
        for (k, field) in fields[2..].iter().enumerate() {
            let s: f64 = field
                .parse()
                .map_err(|_| Error::format(format!("line {lineno}: score {field:?} is not a number")))?;
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::format(format!("line {lineno}: score {s} outside [0, 1]")));
            }
            scores[k].push(s);
        }
        case_ids.push(id);
        labels.push(label as u8);
    }

    ScoreTable::new(
        case_ids,
        labels,
        variant_names.into_iter().zip(scores).collect(),
    )
}

/// Write a table back; floats use shortest round-trip formatting so a
/// read/write cycle preserves every score exactly.
pub fn write_scores_csv(table: &ScoreTable, path: &Path) -> Result<()> {
    let mut out = String::from("case_id,label");
    for name in table.variant_names() {
        out.push_str(",score_");
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..table.len() {
        out.push_str(&table.case_ids()[i]);
        out.push(',');
        out.push_str(&table.labels()[i].to_string());
        for (_, scores) in &table.variants {
            out.push(',');
            out.push_str(&scores[i].to_string());
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn reads_two_rows() {
        let (_d, path) = write(
            "case_id,label,score_original,score_rigid,score_deformable\n\
             a,1,0.9,0.8,0.95\n\
             b,0,0.1,0.2,0.05\n",
        );
        let t = read_scores_csv(&path).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.labels(), &[1, 0]);
        assert_eq!(t.variant("original").unwrap(), &[0.9, 0.1]);
    }

    #[test]
    fn duplicate_case_id_names_the_id() {
        let (_d, path) = write(
            "case_id,label,score_original,score_rigid,score_deformable\n\
             a,1,0.9,0.8,0.95\n\
             a,0,0.1,0.2,0.05\n",
        );
        let err = read_scores_csv(&path).unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn bad_label_reports_line() {
        let (_d, path) = write(
            "case_id,label,score_original,score_rigid,score_deformable\n\
             a,2,0.9,0.8,0.95\n",
        );
        let err = read_scores_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn score_out_of_range_reports_line() {
        let (_d, path) = write(
            "case_id,label,score_original,score_rigid,score_deformable\n\
             a,1,0.9,1.5,0.95\n",
        );
        let err = read_scores_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_required_column_is_rejected() {
        let (_d, path) = write("case_id,label,score_original,score_rigid\na,1,0.9,0.8\n");
        let err = read_scores_csv(&path).unwrap_err();
        assert!(err.to_string().contains("score_deformable"), "{err}");
    }

    #[test]
    fn extra_variant_columns_are_allowed() {
        let (_d, path) = write(
            "case_id,label,score_original,score_rigid,score_deformable,score_ensemble\n\
             a,1,0.9,0.8,0.95,0.97\n",
        );
        let t = read_scores_csv(&path).unwrap();
        assert_eq!(t.variant("ensemble").unwrap(), &[0.97]);
    }

    #[test]
    fn round_trip_preserves_scores_exactly() {
        let table = ScoreTable::new(
            vec!["x".into(), "y".into(), "z".into()],
            vec![1, 0, 1],
            vec![
                ("original".into(), vec![0.123456789012345678, 0.5, 1.0 / 3.0]),
                ("rigid".into(), vec![1e-17, 0.25, 0.7500000000000001]),
                ("deformable".into(), vec![0.9999999999999999, 0.0, 1.0]),
            ],
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_scores_csv(&table, &path).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back, table);
    }
}
