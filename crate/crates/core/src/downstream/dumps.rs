use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::CaptionPrediction;
use crate::error::{ensure, Error, Result};
use crate::image::Mask;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_field(s: &str, sep: char) -> Result<()> {
    ensure!(!s.contains(sep) && !s.contains('\n'), Data, "field `{s}` contains a separator");
    Ok(())
}

/// Per-sample classification predictions with class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationDump {
    pub class_names: Vec<String>,
    pub sample_ids: Vec<String>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    /// `N × C`
    pub scores: Array2<f64>,
}

impl ClassificationDump {
    pub fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        let c = self.class_names.len();
        ensure!(self.truth.len() == n && self.predicted.len() == n, Shape, "dump columns differ in length");
        ensure!(self.scores.dim() == (n, c), Shape, "scores are {:?}, expected ({n}, {c})", self.scores.dim());
        ensure!(
            self.truth.iter().chain(&self.predicted).all(|&l| l < c),
            Data,
            "label outside the {c} classes"
        );
        Ok(())
    }

    /// CSV with header `sample_id,true,predicted,score_<class>…`; scores are
    /// written with round-trip precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut s = String::from("sample_id,true,predicted");
        for c in &self.class_names {
            check_field(c, ',')?;
            write!(s, ",score_{c}").unwrap();
        }
        s.push('\n');
        for (i, id) in self.sample_ids.iter().enumerate() {
            check_field(id, ',')?;
            write!(s, "{id},{},{}", self.truth[i], self.predicted[i]).unwrap();
            for v in self.scores.row(i) {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        write(path, &s)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
        let cols: Vec<&str> = header.split(',').collect();
        ensure!(
            cols.len() >= 3 && cols[..3] == ["sample_id", "true", "predicted"],
            Data,
            "{}: unexpected header",
            path.display()
        );
        let class_names: Vec<String> = cols[3..]
            .iter()
            .map(|c| c.strip_prefix("score_").map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Data(format!("{}: score columns must start with score_", path.display())))?;
        let c = class_names.len();
        let (mut ids, mut truth, mut pred, mut flat) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 3 + c, Data, "{} line {}: {} fields", path.display(), ln + 2, f.len());
            let bad = |_| Error::Data(format!("{} line {}: bad number", path.display(), ln + 2));
            ids.push(f[0].to_string());
            truth.push(f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?);
            pred.push(f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?);
            for v in &f[3..] {
                flat.push(v.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            }
        }
        let n = ids.len();
        let dump = ClassificationDump {
            class_names,
            sample_ids: ids,
            truth,
            predicted: pred,
            scores: Array2::from_shape_vec((n, c), flat).expect("row lengths checked"),
        };
        dump.validate()?;
        Ok(dump)
    }
}

/// One predicted mask per sample as a PNG file under `dir`, plus
/// `index.tsv` mapping sample ids to files.
pub fn write_seg_dump(dir: &Path, sample_ids: &[String], masks: &[Mask]) -> Result<()> {
    ensure!(sample_ids.len() == masks.len(), Shape, "{} ids for {} masks", sample_ids.len(), masks.len());
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("sample_id\tfile\n");
    for (id, m) in sample_ids.iter().zip(masks) {
        check_field(id, '\t')?;
        ensure!(!id.contains('/'), Data, "sample id `{id}` contains a path separator");
        let file = format!("{id}.png");
        m.save_png(&dir.join(&file))?;
        writeln!(index, "{id}\t{file}").unwrap();
    }
    write(&dir.join("index.tsv"), &index)
}

pub fn read_seg_dump(dir: &Path) -> Result<Vec<(String, Mask)>> {
    let index: PathBuf = dir.join("index.tsv");
    let text = read(&index)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let (id, file) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}: malformed line `{line}`", index.display())))?;
            Ok((id.to_string(), Mask::load_png(&dir.join(file))?))
        })
        .collect()
}

/// Tab-separated `(sample_id, reference, hypothesis)` table with
/// space-joined tokens.
pub fn write_caption_dump(path: &Path, preds: &[CaptionPrediction]) -> Result<()> {
    let mut s = String::from("sample_id\treference\thypothesis\n");
    for p in preds {
        check_field(&p.sample_id, '\t')?;
        for t in p.reference.iter().chain(&p.hypothesis) {
            check_field(t, '\t')?;
            ensure!(!t.contains(' '), Data, "token `{t}` contains a space");
        }
        writeln!(s, "{}\t{}\t{}", p.sample_id, p.reference.join(" "), p.hypothesis.join(" ")).unwrap();
    }
    write(path, &s)
}

pub fn read_caption_dump(path: &Path) -> Result<Vec<CaptionPrediction>> {
    let text = read(path)?;
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            ensure!(f.len() == 3, Data, "{}: malformed line `{line}`", path.display());
            Ok(CaptionPrediction {
                sample_id: f[0].to_string(),
                reference: words(f[1]),
                hypothesis: words(f[2]),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("hpl-dump-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let d = ClassificationDump {
            class_names: vec!["a".into(), "b".into()],
            sample_ids: vec!["x".into(), "y".into()],
            truth: vec![0, 1],
            predicted: vec![1, 1],
            scores: ndarray::array![[0.1, 0.9], [1.0 / 3.0, 2.0 / 3.0]],
        };
        let p = dir.join("c.csv");
        d.write_csv(&p).unwrap();
        assert_eq!(ClassificationDump::read_csv(&p).unwrap(), d);
        let caps = vec![CaptionPrediction {
            sample_id: "s".into(),
            reference: vec!["a".into(), "b".into()],
            hypothesis: vec![],
        }];
        write_caption_dump(&dir.join("c.tsv"), &caps).unwrap();
        assert_eq!(read_caption_dump(&dir.join("c.tsv")).unwrap(), caps);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
