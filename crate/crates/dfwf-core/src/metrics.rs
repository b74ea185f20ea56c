//! Scores, equal error rate, averaged EER, score-file round-trips, and a
//! deterministic 2-D principal-component projection for embedding reports.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class label of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Spoof,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Genuine => write!(f, "genuine"),
            Label::Spoof => write!(f, "spoof"),
        }
    }
}

/// One scored trial. Higher scores mean "more genuine"; the trainer emits the
/// genuine-class log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub label: Label,
    pub score: f64,
}

/// EER with its operating threshold and the class counts behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_spoof: usize,
}

/// Equal error rate by threshold sweep over the observed scores.
///
/// A trial is accepted as genuine when `score > threshold`. FAR and FRR are
/// step functions of the threshold; the EER is read off where their
/// difference changes sign, linearly interpolated between the two adjacent
/// operating points.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<EvalReport> {
    let n_genuine = records.iter().filter(|r| r.label == Label::Genuine).count();
    let n_spoof = records.len() - n_genuine;
    if n_genuine == 0 {
        return Err(Error::SingleClass("no genuine records"));
    }
    if n_spoof == 0 {
        return Err(Error::SingleClass("no spoof records"));
    }
    if let Some(bad) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score for {}", bad.utt_id)));
    }

    let mut thresholds: Vec<f64> = records.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    // operating point at threshold t: (FAR, FRR)
    let point = |t: f64| -> (f64, f64) {
        let fa = records
            .iter()
            .filter(|r| r.label == Label::Spoof && r.score > t)
            .count();
        let fr = records
            .iter()
            .filter(|r| r.label == Label::Genuine && r.score <= t)
            .count();
        (fa as f64 / n_spoof as f64, fr as f64 / n_genuine as f64)
    };

    // start below every score: FAR = 1, FRR = 0
    let mut prev_t = thresholds[0] - 1.0;
    let (mut prev_far, mut prev_frr) = (1.0, 0.0);
    for &t in &thresholds {
        let (far, frr) = point(t);
        if frr >= far {
            let d_prev = prev_frr - prev_far; // < 0
            let d_cur = frr - far; // >= 0
            let (eer, threshold) = if d_cur == d_prev {
                (far, t)
            } else {
                let u = -d_prev / (d_cur - d_prev);
                (prev_far + u * (far - prev_far), prev_t + u * (t - prev_t))
            };
            return Ok(EvalReport { eer, threshold, n_genuine, n_spoof });
        }
        prev_t = t;
        prev_far = far;
        prev_frr = frr;
    }
    // FRR reaches 1 and FAR reaches 0 at the top threshold, so the sweep
    // always crosses; reaching here would mean the step functions are broken.
    unreachable!("FAR/FRR sweep must cross");
}

/// Arithmetic mean of per-task EERs.
pub fn avg_eer(eers: &[f64]) -> Result<f64> {
    if eers.is_empty() {
        return Err(Error::EmptyInput("avg_eer"));
    }
    Ok(eers.iter().sum::<f64>() / eers.len() as f64)
}

/// Mean-centered projection of `n x d` row-major embeddings onto their top-2
/// principal components. The sign of each component is fixed so its
/// largest-magnitude loading is positive. Returns `n x 2` row-major data.
pub fn project_embeddings_2d(embeddings: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || embeddings.len() % dim != 0 {
        return Err(Error::ShapeMismatch {
            context: "project_embeddings_2d",
            expected: format!("length divisible by dim {dim}"),
            got: format!("{}", embeddings.len()),
        });
    }
    let n = embeddings.len() / dim;
    if n < 2 {
        return Err(Error::EmptyInput("need at least 2 embeddings to project"));
    }

    let mut mean = vec![0.0; dim];
    for row in embeddings.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = embeddings
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();

    let cov = covariance(&centered, n, dim);
    let (eigvals, eigvecs) = jacobi_eigen_symmetric(&cov, dim);
    if eigvals[0] <= 0.0 {
        return Err(Error::Numeric("rank-0 input: all embeddings identical".into()));
    }

    let mut out = vec![0.0; n * 2];
    for comp in 0..2 {
        let mut axis: Vec<f64> = (0..dim).map(|i| eigvecs[i * dim + comp]).collect();
        // largest-magnitude loading positive
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, row) in centered.chunks_exact(dim).enumerate() {
            out[i * 2 + comp] = row.iter().zip(&axis).map(|(v, a)| v * a).sum();
        }
    }
    Ok(out)
}

/// Eigenvalues of the covariance of `n x d` row-major embeddings, descending.
/// Exposed so reports can state how much variance the 2-D projection keeps.
pub fn embedding_eigenvalues(embeddings: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || embeddings.len() % dim != 0 {
        return Err(Error::ShapeMismatch {
            context: "embedding_eigenvalues",
            expected: format!("length divisible by dim {dim}"),
            got: format!("{}", embeddings.len()),
        });
    }
    let n = embeddings.len() / dim;
    if n < 2 {
        return Err(Error::EmptyInput("need at least 2 embeddings"));
    }
    let mut mean = vec![0.0; dim];
    for row in embeddings.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = embeddings
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let cov = covariance(&centered, n, dim);
    let (vals, _) = jacobi_eigen_symmetric(&cov, dim);
    Ok(vals)
}

fn covariance(centered: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut cov = vec![0.0; dim * dim];
    for row in centered.chunks_exact(dim) {
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += row[i] * row[j];
            }
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[i * dim + j] *= scale;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }
    cov
}

/// Cyclic Jacobi rotations for a symmetric matrix. Returns eigenvalues in
/// descending order and the matching eigenvectors as columns.
fn jacobi_eigen_symmetric(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].partial_cmp(&a[i * d + i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vecs = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..d {
            vecs[k * d + new_col] = v[k * d + old_col];
        }
    }
    (vals, vecs)
}

// ----- score files ----------------------------------------------------------

/// Write scores as tab-separated `utt_id<TAB>label<TAB>score` with 6-decimal
/// scores.
pub fn write_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{}\t{}\t{:.6}\n", r.utt_id, r.label, r.score));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fail = |reason: &str| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.split('\t');
        let utt_id = parts.next().ok_or_else(|| fail("missing utt_id"))?.to_string();
        let label = match parts.next() {
            Some("genuine") => Label::Genuine,
            Some("spoof") => Label::Spoof,
            Some(other) => return Err(fail(&format!("unknown label {other:?}"))),
            None => return Err(fail("missing label")),
        };
        let score: f64 = parts
            .next()
            .ok_or_else(|| fail("missing score"))?
            .parse()
            .map_err(|_| fail("unparsable score"))?;
        if parts.next().is_some() {
            return Err(fail("too many fields"));
        }
        records.push(ScoreRecord { utt_id, label, score });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: Label, score: f64) -> ScoreRecord {
        ScoreRecord { utt_id: format!("u{score}"), label, score }
    }

    #[test]
    fn perfect_separation_is_zero() {
        let records = vec![
            rec(Label::Genuine, 0.9),
            rec(Label::Genuine, 0.8),
            rec(Label::Spoof, 0.1),
            rec(Label::Spoof, 0.2),
        ];
        let r = compute_eer(&records).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!(r.n_genuine, 2);
        assert_eq!(r.n_spoof, 2);
    }

    #[test]
    fn total_inversion_is_one() {
        let records = vec![
            rec(Label::Spoof, 0.9),
            rec(Label::Spoof, 0.8),
            rec(Label::Genuine, 0.1),
            rec(Label::Genuine, 0.2),
        ];
        let r = compute_eer(&records).unwrap();
        assert_eq!(r.eer, 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let records = vec![rec(Label::Genuine, 0.5)];
        assert!(matches!(compute_eer(&records), Err(Error::SingleClass(_))));
    }

    #[test]
    fn avg_eer_of_published_rows() {
        // mean of {21.22, 4.61} rounds to 12.92; {19.78, 6.74} to 13.26
        let a = avg_eer(&[21.22, 4.61]).unwrap();
        assert!((a - 12.92).abs() <= 0.005 + 1e-9);
        let b = avg_eer(&[19.78, 6.74]).unwrap();
        assert!((b - 13.26).abs() <= 0.005 + 1e-9);
    }

    #[test]
    fn avg_eer_single_and_empty() {
        assert_eq!(avg_eer(&[7.5]).unwrap(), 7.5);
        assert!(avg_eer(&[]).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.txt");
        write_scores(&p, &[]).unwrap();
        assert!(read_scores(&p).unwrap().is_empty());

        let records = vec![rec(Label::Genuine, -1.25), rec(Label::Spoof, 0.5)];
        write_scores(&p, &records).unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].utt_id, records[0].utt_id);
        assert_eq!(back[0].label, records[0].label);
        assert!((back[0].score - records[0].score).abs() < 5e-7);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, "a\tgenuine\t0.1\nb\tnope\t0.2\n").unwrap();
        match read_scores(&p) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_rows_project_identically() {
        let base: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut doubled = Vec::new();
        for row in base.chunks_exact(4) {
            doubled.extend_from_slice(row);
            doubled.extend_from_slice(row);
        }
        let proj = project_embeddings_2d(&doubled, 4).unwrap();
        for i in 0..5 {
            assert!((proj[4 * i] - proj[4 * i + 2]).abs() < 1e-9);
            assert!((proj[4 * i + 1] - proj[4 * i + 3]).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_embeddings_are_degenerate() {
        let data = vec![1.0; 6 * 3];
        assert!(matches!(
            project_embeddings_2d(&data, 3),
            Err(Error::Numeric(_))
        ));
    }
}
