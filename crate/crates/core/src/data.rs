//! Datasets and non-i.i.d. client partitioning.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows carrying `split`, as a new dataset.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    /// Writes `f0..f{d-1},label,split`. Floats use the shortest
    /// round-tripping representation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header).map_err(csv_io)?;
        for (i, row) in self.features.axis_iter(Axis(0)).enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            rec.push(
                match self.splits[i] {
                    Split::Train => "train",
                    Split::Test => "test",
                }
                .into(),
            );
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Isotropic Gaussian blobs around seed-fixed unit-norm class centers, split
/// 80/20 into train/test within each class.
pub fn synth_blobs<R: Rng + ?Sized>(
    classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data("need at least two classes".into()));
    }
    if input_dim == 0 || per_class == 0 {
        return Err(Error::Data("input_dim and per_class must be >= 1".into()));
    }
    let unit = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| unit.sample(rng)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let n = classes * per_class;
    let n_train = (per_class as f64 * 0.8).floor() as usize;
    let mut features = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for p in 0..per_class {
            let row = c * per_class + p;
            for j in 0..input_dim {
                features[[row, j]] = center[j] + spread * unit.sample(rng);
            }
            labels.push(c);
            splits.push(if p < n_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    Ok(Dataset {
        features,
        labels,
        splits,
    })
}

/// Reads `f0..f{d-1},label[,split]`. Rows without a split column are
/// training rows.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, path)
}

pub fn read_csv<R: Read>(input: R, path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| csv_err(path, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let label_at = cols
        .iter()
        .position(|&c| c == "label")
        .ok_or_else(|| csv_err(path, 1, "missing `label` column".into()))?;
    for (j, &c) in cols[..label_at].iter().enumerate() {
        if c != format!("f{j}") {
            return Err(csv_err(
                path,
                1,
                format!("expected column `f{j}`, found `{c}`"),
            ));
        }
    }
    let has_split = match &cols[label_at + 1..] {
        [] => false,
        ["split"] => true,
        _ => return Err(csv_err(path, 1, "unexpected columns after `label`".into())),
    };
    let d = label_at;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, line, e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(csv_err(
                path,
                line,
                format!("{} fields, expected {}", rec.len(), cols.len()),
            ));
        }
        for j in 0..d {
            let v: f64 = rec[j].trim().parse().map_err(|_| {
                csv_err(
                    path,
                    line,
                    format!("feature f{j} `{}` is not numeric", &rec[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(csv_err(path, line, format!("feature f{j} is not finite")));
            }
            data.push(v);
        }
        let label: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| csv_err(path, line, format!("label `{}` is not an integer", &rec[d])))?;
        labels.push(label);
        splits.push(if has_split {
            match rec[d + 1].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(csv_err(path, line, format!("unknown split `{other}`"))),
            }
        } else {
            Split::Train
        });
    }
    let features =
        Array2::from_shape_vec((labels.len(), d), data).map_err(|e| Error::Data(e.to_string()))?;
    Ok(Dataset {
        features,
        labels,
        splits,
    })
}

fn csv_err(path: &Path, line: u64, msg: String) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

/// One client's share of the training rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientPartition {
    pub fn n_k(&self) -> usize {
        self.indices.len()
    }
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed (tiny alpha): all mass on one client.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Per-class Dirichlet split of `labels` (indices into `labels`) over
/// `clients` clients. Each class's indices are shuffled and cut into
/// contiguous runs by the cumulative proportions of `p_c ~ Dir(alpha)`.
/// Clients left empty take one sample from the currently largest partition.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<ClientPartition>> {
    if clients == 0 {
        return Err(Error::Data("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Data(format!("alpha must be positive, got {alpha}")));
    }
    if labels.len() < clients {
        return Err(Error::Data(format!(
            "{} samples cannot fill {clients} nonempty partitions",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let p = dirichlet(alpha, clients, rng);
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            cum += pk;
            let end = if k + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            parts[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for k in 0..clients {
        if parts[k].is_empty() {
            let donor = (0..clients)
                .max_by_key(|&j| (parts[j].len(), std::cmp::Reverse(j)))
                .expect("clients >= 1");
            let moved = parts[donor].pop().expect("donor has more than one sample");
            parts[k].push(moved);
        }
    }
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientPartition { client_id, indices }
        })
        .collect())
}

/// `(client_id, class_id, count)` for every client and class, zeros included.
pub fn class_distribution_report(
    partitions: &[ClientPartition],
    labels: &[usize],
    classes: usize,
) -> Vec<(usize, usize, usize)> {
    let mut rows = Vec::with_capacity(partitions.len() * classes);
    for p in partitions {
        let mut counts = vec![0usize; classes];
        for &i in &p.indices {
            counts[labels[i]] += 1;
        }
        rows.extend(
            counts
                .into_iter()
                .enumerate()
                .map(|(c, n)| (p.client_id, c, n)),
        );
    }
    rows
}

pub fn write_class_report<W: Write>(rows: &[(usize, usize, usize)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["client_id", "class_id", "count"])
        .map_err(csv_io)?;
    for &(k, c, n) in rows {
        w.serialize((k, c, n)).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over clients of the total-variation distance between the client's
/// class distribution and the uniform one.
pub fn mean_tv_from_uniform(
    partitions: &[ClientPartition],
    labels: &[usize],
    classes: usize,
) -> f64 {
    let uniform = 1.0 / classes as f64;
    let total: f64 = partitions
        .iter()
        .map(|p| {
            let mut counts = vec![0usize; classes];
            for &i in &p.indices {
                counts[labels[i]] += 1;
            }
            let n = p.n_k().max(1) as f64;
            0.5 * counts
                .iter()
                .map(|&c| (c as f64 / n - uniform).abs())
                .sum::<f64>()
        })
        .sum();
    total / partitions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn blob_split_arithmetic() {
        let d = synth_blobs(10, 5, 100, 0.3, &mut rng(0)).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.subset(Split::Train).len(), 800);
        assert_eq!(d.subset(Split::Test).len(), 200);
        assert_eq!(d, synth_blobs(10, 5, 100, 0.3, &mut rng(0)).unwrap());
        assert!(synth_blobs(1, 5, 10, 0.3, &mut rng(0)).is_err());
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let d = synth_blobs(3, 4, 10, 0.0, &mut rng(1)).unwrap();
        for c in 0..3 {
            let first = d.features.row(c * 10).to_owned();
            let norm: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for p in 0..10 {
                assert_eq!(d.features.row(c * 10 + p), first);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let d = synth_blobs(3, 4, 5, 0.7, &mut rng(2)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Path::new("mem.csv")).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.splits, d.splits);
        for (a, b) in back.features.iter().zip(d.features.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_small_file_and_errors() {
        let ok = "f0,f1,label\n0.5,1,0\n-2,3e-1,1\n4,4,2\n";
        let d = read_csv(ok.as_bytes(), Path::new("x.csv")).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.input_dim(), 2);
        assert!(d.splits.iter().all(|&s| s == Split::Train));

        let bad = "f0,f1,label\n0.5,1,0\n0.5,abc,1\n";
        match read_csv(bad.as_bytes(), Path::new("bad.csv")) {
            Err(Error::Csv { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("f1"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let nan = "f0,label\nNaN,0\n";
        assert!(read_csv(nan.as_bytes(), Path::new("n.csv")).is_err());
        let hdr = "a,label\n1,0\n";
        assert!(read_csv(hdr.as_bytes(), Path::new("h.csv")).is_err());
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let mut r = rng(3);
        for trial in 0..50u64 {
            let n = r.random_range(40..200);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
            let k = r.random_range(1..20);
            let alpha = [0.05, 0.1, 1.0, 10.0, 100.0][trial as usize % 5];
            let parts = dirichlet_partition(&labels, k, alpha, &mut r).unwrap();
            assert_eq!(parts.len(), k);
            let mut seen = vec![false; n];
            for p in &parts {
                assert!(p.n_k() >= 1);
                for &i in &p.indices {
                    assert!(!seen[i], "index {i} assigned twice");
                    seen[i] = true;
                }
            }
            assert!(seen.into_iter().all(|s| s));
        }
        assert!(dirichlet_partition(&[0, 1], 3, 1.0, &mut r).is_err());
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let labels: Vec<usize> = (0..4000).map(|i| i % 10).collect();
        let parts = dirichlet_partition(&labels, 4, 10_000.0, &mut rng(4)).unwrap();
        let report = class_distribution_report(&parts, &labels, 10);
        for &(_, _, count) in &report {
            let share = count as f64 / 400.0;
            assert!((share - 0.25).abs() < 0.1 * 0.25, "share {share}");
        }
    }

    #[test]
    fn report_sums() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let single = dirichlet_partition(&labels, 1, 0.5, &mut rng(5)).unwrap();
        let rep = class_distribution_report(&single, &labels, 3);
        assert_eq!(rep, vec![(0, 0, 100), (0, 1, 100), (0, 2, 100)]);
        let parts = dirichlet_partition(&labels, 7, 0.5, &mut rng(5)).unwrap();
        let rep = class_distribution_report(&parts, &labels, 3);
        assert_eq!(rep.iter().map(|r| r.2).sum::<usize>(), 300);
        for p in &parts {
            let s: usize = rep.iter().filter(|r| r.0 == p.client_id).map(|r| r.2).sum();
            assert_eq!(s, p.n_k());
        }
        let mut buf = Vec::new();
        write_class_report(&rep[..2], &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("client_id,class_id,count\n"));
    }
}
