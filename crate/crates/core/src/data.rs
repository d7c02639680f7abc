//! Vertically partitioned datasets: synthetic generation, CSV ingestion and
//! per-client minibatch sampling.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{config_err, data_err, Error, Result};
use crate::model::sigmoid;
use crate::numerics::{streams, Matrix, Rng};

/// Features split column-wise across clients; labels stay with the server.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    blocks: Vec<Matrix>,
    labels: Vec<f64>,
    split: Vec<Range<usize>>,
}

impl VerticalDataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clients(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_features(&self) -> usize {
        self.split.last().map_or(0, |r| r.end)
    }

    /// Feature block `x_{., m}` (N x p_m) held by client `m`.
    pub fn block(&self, m: usize) -> &Matrix {
        &self.blocks[m]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Column range of the original table owned by each client.
    pub fn feature_split(&self) -> &[Range<usize>] {
        &self.split
    }

    pub fn widths(&self) -> Vec<usize> {
        self.split.iter().map(|r| r.len()).collect()
    }

    /// Concatenates the client blocks back into the full `N x p` table.
    pub fn reassemble(&self) -> Matrix {
        let n = self.n_samples();
        let p = self.n_features();
        let mut out = Matrix::zeros(n, p);
        for (block, range) in self.blocks.iter().zip(&self.split) {
            for r in 0..n {
                out.row_mut(r)[range.clone()].copy_from_slice(block.row(r));
            }
        }
        out
    }

    /// Centers every column and scales it to unit variance. Constant
    /// columns are only centered.
    pub fn standardize(&mut self) {
        let n = self.n_samples() as f64;
        if n == 0.0 {
            return;
        }
        for block in &mut self.blocks {
            for c in 0..block.cols() {
                let mean = (0..block.rows()).map(|r| block.get(r, c)).sum::<f64>() / n;
                let var = (0..block.rows())
                    .map(|r| (block.get(r, c) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let sd = var.sqrt();
                let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
                for r in 0..block.rows() {
                    let v = block.get(r, c);
                    block.set(r, c, (v - mean) * scale);
                }
            }
        }
    }

    /// Splits off the last `test_fraction` of samples as a held-out set.
    pub fn split_holdout(&self, test_fraction: f64) -> Result<(VerticalDataset, VerticalDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(config_err!("test fraction must lie in [0, 1), got {test_fraction}"));
        }
        let n = self.n_samples();
        let n_test = (n as f64 * test_fraction).floor() as usize;
        let n_train = n - n_test;
        if n_train == 0 {
            return Err(config_err!("holdout leaves no training samples"));
        }
        let train_idx: Vec<usize> = (0..n_train).collect();
        let test_idx: Vec<usize> = (n_train..n).collect();
        Ok((self.subset(&train_idx), self.subset(&test_idx)))
    }

    pub fn subset(&self, idx: &[usize]) -> VerticalDataset {
        VerticalDataset {
            blocks: self.blocks.iter().map(|b| b.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split.clone(),
        }
    }

    /// Writes `label,x_1,...,x_p` rows with a header. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let full = self.reassemble();
        let mut header = String::from("label");
        for c in 0..full.cols() {
            header.push_str(&format!(",x{}", c + 1));
        }
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for r in 0..full.rows() {
            let mut line = format!("{}", self.labels[r]);
            for v in full.row(r) {
                line.push(',');
                line.push_str(&format!("{v}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Assigns contiguous column blocks of `table` to clients in order.
pub fn vertical_partition(table: &Matrix, labels: Vec<f64>, widths: &[usize]) -> Result<VerticalDataset> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(config_err!("every client needs at least one feature column"));
    }
    let total: usize = widths.iter().sum();
    if total != table.cols() {
        return Err(config_err!(
            "split widths sum to {total} but the table has {} columns",
            table.cols()
        ));
    }
    if labels.len() != table.rows() {
        return Err(data_err!(
            "{} labels for {} rows",
            labels.len(),
            table.rows()
        ));
    }
    let mut split = Vec::with_capacity(widths.len());
    let mut at = 0;
    for &w in widths {
        split.push(at..at + w);
        at += w;
    }
    let blocks = split.iter().map(|r| table.column_block(r.start, r.end)).collect();
    Ok(VerticalDataset { blocks, labels, split })
}

/// Widths for splitting `p` columns as evenly as possible over `m` clients,
/// earlier clients taking the remainder.
pub fn even_split(p: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || p < m {
        return Err(config_err!("cannot split {p} features over {m} clients"));
    }
    Ok((0..m).map(|i| p / m + usize::from(i < p % m)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Logistic,
    Regression,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "logistic" | "classification" => Some(Task::Logistic),
            "regression" => Some(Task::Regression),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub clients: usize,
    pub task: Task,
    pub noise_std: f64,
    pub seed: u64,
}

/// Standard Gaussian features and a Gaussian ground-truth weight vector.
/// Logistic labels are drawn from `sigmoid(x . w)`; regression labels are
/// `x . w` plus Gaussian noise.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<VerticalDataset> {
    if spec.n == 0 || spec.p == 0 || spec.clients == 0 {
        return Err(config_err!("synthetic data needs N, p, M >= 1"));
    }
    if !spec.noise_std.is_finite() || spec.noise_std < 0.0 {
        return Err(config_err!("noise_std must be finite and >= 0"));
    }
    let widths = even_split(spec.p, spec.clients)?;
    let mut rng = Rng::from_seed(spec.seed).fork(streams::DATA);
    let truth: Vec<f64> = (0..spec.p).map(|_| rng.standard_normal()).collect();
    let mut table = Matrix::zeros(spec.n, spec.p);
    let mut labels = Vec::with_capacity(spec.n);
    for r in 0..spec.n {
        for v in table.row_mut(r) {
            *v = rng.standard_normal();
        }
        let z = crate::numerics::dot(table.row(r), &truth);
        let y = match spec.task {
            Task::Logistic => {
                if rng.uniform01() < sigmoid(z) {
                    1.0
                } else {
                    -1.0
                }
            }
            Task::Regression => {
                if spec.noise_std > 0.0 {
                    z + spec.noise_std * rng.standard_normal()
                } else {
                    z
                }
            }
        };
        labels.push(y);
    }
    vertical_partition(&table, labels, &widths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvOptions {
    pub label_column: usize,
    /// Widths of the client blocks over the non-label columns.
    pub split: Vec<usize>,
    pub header: bool,
    pub standardize: bool,
}

/// Reads a comma-separated numeric table. The label column is removed and the
/// remaining columns are partitioned by `split`.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<VerticalDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let row_no = i + 1 + usize::from(opts.header);
        let rec = rec.map_err(|e| data_err!("{}: row {row_no}: {e}", path.display()))?;
        if width.is_none() {
            width = Some(rec.len());
        }
        if Some(rec.len()) != width {
            return Err(data_err!(
                "{}: row {row_no} has {} fields, expected {}",
                path.display(),
                rec.len(),
                width.unwrap_or(0)
            ));
        }
        if opts.label_column >= rec.len() {
            return Err(data_err!(
                "{}: label column {} out of range for {} columns",
                path.display(),
                opts.label_column,
                rec.len()
            ));
        }
        let mut row = Vec::with_capacity(rec.len() - 1);
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                data_err!(
                    "{}: row {row_no}, column {c}: '{field}' is not a number",
                    path.display()
                )
            })?;
            if c == opts.label_column {
                labels.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(data_err!("{}: no data rows", path.display()));
    }
    let table = Matrix::from_rows(&rows)?;
    let mut ds = vertical_partition(&table, labels, &opts.split)?;
    if opts.standardize {
        ds.standardize();
    }
    Ok(ds)
}

/// How many samples a client draws per activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSpec {
    /// `size` indices uniform i.i.d. with replacement.
    Minibatch(usize),
    /// Every index `0..N` in order.
    Full,
}

impl BatchSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            BatchSpec::Minibatch(size) if size == 0 || size > n => {
                Err(config_err!("batch size must satisfy 1 <= size <= N = {n}, got {size}"))
            }
            _ => Ok(()),
        }
    }

    pub fn size(&self, n: usize) -> usize {
        match *self {
            BatchSpec::Minibatch(s) => s,
            BatchSpec::Full => n,
        }
    }
}

/// Draws one client's minibatch from its own stream.
pub fn sample_minibatch(n: usize, spec: &BatchSpec, rng: &mut Rng) -> Vec<usize> {
    match *spec {
        BatchSpec::Minibatch(size) => (0..size).map(|_| rng.index(n)).collect(),
        BatchSpec::Full => (0..n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::from_seed(seed);
        let mut t = Matrix::zeros(rows, cols);
        t.as_mut_slice().iter_mut().for_each(|v| *v = rng.standard_normal());
        t
    }

    #[test]
    fn contiguous_blocks() {
        let t = table(4, 6, 1);
        let ds = vertical_partition(&t, vec![1.0; 4], &[2, 2, 2]).unwrap();
        assert_eq!(ds.feature_split()[1], 2..4);
        assert_eq!(ds.block(1).row(0), &t.row(0)[2..4]);
        let single = vertical_partition(&t, vec![1.0; 4], &[6]).unwrap();
        assert_eq!(single.n_clients(), 1);
        assert_eq!(single.block(0), &t);
    }

    #[test]
    fn reassembly_recovers_table() {
        let t = table(10, 6, 2);
        let ds = vertical_partition(&t, vec![0.0; 10], &[1, 3, 2]).unwrap();
        assert_eq!(ds.reassemble(), t);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let t = table(3, 6, 3);
        assert!(matches!(
            vertical_partition(&t, vec![0.0; 3], &[2, 2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noiseless_regression_is_linear_and_deterministic() {
        let spec = SyntheticSpec {
            n: 50,
            p: 6,
            clients: 3,
            task: Task::Regression,
            noise_std: 0.0,
            seed: 42,
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        // Recover w from the first p rows and check every label.
        let full = a.reassemble();
        let mut rng = Rng::from_seed(42).fork(streams::DATA);
        let truth: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
        for r in 0..50 {
            assert_eq!(a.labels()[r], crate::numerics::dot(full.row(r), &truth));
        }
    }

    #[test]
    fn csv_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "y,a,b\n1,0.5,2\n-1,1.5,3\n1,2.5,4\n").unwrap();
        let ds = load_csv(
            &path,
            &CsvOptions {
                label_column: 0,
                split: vec![2],
                header: true,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!((ds.n_samples(), ds.n_clients(), ds.widths()), (3, 1, vec![2]));
        assert_eq!(ds.labels(), &[1.0, -1.0, 1.0]);
        assert_eq!(ds.block(0).row(2), &[2.5, 4.0]);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CsvOptions {
            label_column: 0,
            split: vec![1],
            header: false,
            standardize: false,
        };
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_csv(&empty, &opts), Err(Error::Data(_))));
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "1,2\n1,abc\n").unwrap();
        let msg = load_csv(&bad, &opts).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("column 1"), "{msg}");
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), &opts),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_roundtrip_of_synthetic_data() {
        let ds = gen_synthetic(&SyntheticSpec {
            n: 40,
            p: 5,
            clients: 2,
            task: Task::Logistic,
            noise_std: 0.0,
            seed: 9,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(
            &path,
            &CsvOptions {
                label_column: 0,
                split: ds.widths(),
                header: true,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn standardize_gives_unit_columns() {
        let t = table(200, 3, 5);
        let mut ds = vertical_partition(&t, vec![0.0; 200], &[2, 1]).unwrap();
        ds.standardize();
        let full = ds.reassemble();
        for c in 0..3 {
            let col: Vec<f64> = (0..200).map(|r| full.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / 200.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_batches() {
        let mut rng = Rng::from_seed(1);
        assert_eq!(sample_minibatch(1, &BatchSpec::Minibatch(5), &mut rng), vec![0; 5]);
        assert_eq!(sample_minibatch(4, &BatchSpec::Full, &mut rng), vec![0, 1, 2, 3]);
        assert!(BatchSpec::Minibatch(0).validate(3).is_err());
        assert!(BatchSpec::Minibatch(4).validate(3).is_err());
    }

    #[test]
    fn minibatch_indices_are_uniform() {
        // Chi-square test, 999 degrees of freedom: mean 999, sd ~44.7.
        let n = 1000;
        let draws = 100_000;
        let mut rng = Rng::from_seed(77).fork(streams::BATCH);
        let mut counts = vec![0u32; n];
        for _ in 0..draws {
            counts[sample_minibatch(n, &BatchSpec::Minibatch(1), &mut rng)[0]] += 1;
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!((chi2 - 999.0).abs() < 3.0 * (2.0 * 999.0f64).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn client_streams_differ() {
        let root = Rng::from_seed(3).fork(streams::BATCH);
        let a = sample_minibatch(1000, &BatchSpec::Minibatch(20), &mut root.fork(0));
        let b = sample_minibatch(1000, &BatchSpec::Minibatch(20), &mut root.fork(1));
        assert_ne!(a, b);
    }
}
