//! Synthetic data, CSV loading and their use in a run.

use vafl::config::RunConfig;
use vafl::data::{gen_synthetic, load_csv, CsvOptions, SyntheticSpec, Task};
use vafl::experiment::Experiment;

#[test]
fn logistic_data_is_learnable_by_a_centralized_fit() {
    let ds = gen_synthetic(&SyntheticSpec {
        n: 5000,
        p: 20,
        clients: 4,
        task: Task::Logistic,
        noise_std: 0.0,
        seed: 17,
    })
    .unwrap();
    let x = ds.reassemble();
    let y = ds.labels();
    let (n, p) = x.shape();
    let mut w = vec![0.0; p + 1];
    for _ in 0..300 {
        let mut g = vec![0.0; p + 1];
        for i in 0..n {
            let row = x.row(i);
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[p];
            let d = -y[i] / (1.0 + (y[i] * z).exp()) / n as f64;
            for j in 0..p {
                g[j] += d * row[j];
            }
            g[p] += d;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 1.0 * gi;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let z: f64 = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[p];
            z * y[i] > 0.0
        })
        .count();
    let acc = correct as f64 / n as f64;
    assert!(acc > 0.85, "train accuracy {acc}");
}

#[test]
fn clients_hold_disjoint_column_blocks_and_no_labels() {
    let ds = gen_synthetic(&SyntheticSpec {
        n: 30,
        p: 7,
        clients: 3,
        task: Task::Regression,
        noise_std: 0.5,
        seed: 2,
    })
    .unwrap();
    let split = ds.feature_split();
    assert_eq!(split.iter().map(|r| r.len()).sum::<usize>(), 7);
    for w in split.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    let table = ds.reassemble();
    for m in 0..3 {
        let block = ds.block(m);
        for i in 0..30 {
            assert_eq!(block.row(i), &table.row(i)[split[m].clone()]);
            assert!(block.row(i).iter().all(|v| *v != ds.labels()[i]));
        }
    }
}

#[test]
fn csv_file_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ds = gen_synthetic(&SyntheticSpec {
        n: 60,
        p: 5,
        clients: 2,
        task: Task::Logistic,
        noise_std: 0.0,
        seed: 9,
    })
    .unwrap();
    ds.write_csv(&path).unwrap();
    let back = load_csv(
        &path,
        &CsvOptions {
            label_column: 0,
            split: vec![3, 2],
            header: true,
            standardize: false,
        },
    )
    .unwrap();
    assert_eq!(back.reassemble(), ds.reassemble());
    assert_eq!(back.labels(), ds.labels());

    let cfg = RunConfig::from_toml(&format!(
        r#"
seed = 1
[data]
source = "csv"
path = "{}"
split = [3, 2]
test_fraction = 0.25
[model]
clients = 2
[run]
max_k = 50
"#,
        path.display()
    ))
    .unwrap();
    let mut exp = Experiment::build(&cfg).unwrap();
    assert_eq!(exp.train.n_samples(), 45);
    assert_eq!(exp.test.as_ref().unwrap().n_samples(), 15);
    let log = exp.run().unwrap();
    assert!(log.rows.last().unwrap().test_metric.is_finite());
}
