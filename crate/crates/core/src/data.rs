//! Labelled tabular datasets with stable per-sample ids, CSV ingestion and a
//! synthetic Gaussian-cluster generator.
//!
//! CSV layout: header `id,f0,…,f{F-1},label`, one sample per line. Ids must
//! be exactly `0..N` (any order); they index the knowledge store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
}

/// A mini-batch: inputs, one-hot targets, raw labels and sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Dataset {
    /// `values` is row-major `N × features`; sample `i` has id `i`.
    pub fn new(features: usize, values: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features == 0 || labels.is_empty() || values.len() != features * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset needs N·F values for N > 0 samples (F {features}, N {}, values {})",
                labels.len(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Dataset {
            features,
            values,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `1 + max label`.
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn sample(&self, id: usize) -> &[f64] {
        &self.values[id * self.features..(id + 1) * self.features]
    }

    pub fn batch(&self, indices: &[usize], classes: usize) -> Result<Batch> {
        let mut x = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            x.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            x: Tensor::new(vec![indices.len(), self.features], x)?,
            y: Tensor::one_hot(&labels, classes)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.features).map(|j| format!("f{j}")));
        header.push("label".into());
        let csv_err = |e: csv::Error| Error::Format {
            what: "dataset csv",
            detail: e.to_string(),
        };
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.sample(i).iter().map(|v| v.to_string()));
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("writing dataset csv", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: std::io::Read>(reader: R, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            detail,
        };
        let mut r = csv::Reader::from_reader(reader);
        let header = r
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        let ok_header = cols.len() >= 3
            && cols[0] == "id"
            && cols[cols.len() - 1] == "label"
            && cols[1..cols.len() - 1]
                .iter()
                .enumerate()
                .all(|(j, c)| *c == format!("f{j}"));
        if !ok_header {
            return Err(parse_err(1, "header must be id,f0,…,f{F-1},label".into()));
        }
        let features = cols.len() - 2;
        let mut rows: Vec<(usize, Vec<f64>, usize)> = Vec::new();
        for (n, rec) in r.records().enumerate() {
            let line = n + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("").trim();
            let id: usize = field(0)
                .parse()
                .map_err(|e| parse_err(line, format!("bad id {:?}: {e}", field(0))))?;
            let feats = (1..=features)
                .map(|j| {
                    field(j)
                        .parse::<f64>()
                        .map_err(|e| parse_err(line, format!("bad feature {:?}: {e}", field(j))))
                })
                .collect::<Result<Vec<_>>>()?;
            let label: usize = field(features + 1).parse().map_err(|e| {
                parse_err(line, format!("bad label {:?}: {e}", field(features + 1)))
            })?;
            rows.push((id, feats, label));
        }
        let n = rows.len();
        if n == 0 {
            return Err(parse_err(1, "no samples".into()));
        }
        let mut values = vec![0.0; n * features];
        let mut labels = vec![0; n];
        let mut seen = vec![false; n];
        for (line, (id, feats, label)) in rows.into_iter().enumerate() {
            if id >= n || seen[id] {
                return Err(parse_err(
                    line + 2,
                    format!("id {id} is duplicated or outside 0..{n}"),
                ));
            }
            seen[id] = true;
            values[id * features..(id + 1) * features].copy_from_slice(&feats);
            labels[id] = label;
        }
        Dataset::new(features, values, labels)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}

/// Unit direction of class `c`'s mean: the basis vector `e_c` while `c < F`,
/// otherwise the normalized `e_{c mod F} + ⌊c/F⌋·e_{(c+1) mod F}`.
fn class_direction(c: usize, features: usize) -> Vec<f64> {
    let mut v = vec![0.0; features];
    v[c % features] = 1.0;
    v[(c + 1) % features] += (c / features) as f64;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Radius of the class means around the origin.
pub const CLASS_RADIUS: f64 = 2.0;

/// Gaussian clusters: `per_class` samples of each class, drawn as
/// `mean_c + sigma·N(0, I)` with `mean_c` at radius 2 along
/// [`class_direction`]. Samples are ordered class by class; noise comes from
/// ChaCha8 seeded with `seed`.
pub fn gen_data(
    classes: usize,
    features: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || features < 2 || per_class == 0 || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gen-data needs classes >= 2, features >= 2, per_class >= 1, sigma >= 0 \
             (got {classes}, {features}, {per_class}, {sigma})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(classes * per_class * features);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mean: Vec<f64> = class_direction(c, features)
            .iter()
            .map(|v| v * CLASS_RADIUS)
            .collect();
        for _ in 0..per_class {
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(m + sigma * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, values, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generator_shape_and_determinism() {
        let a = gen_data(4, 16, 25, 0.35, 1).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.features(), 16);
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 25);
        }
        assert_eq!(a, gen_data(4, 16, 25, 0.35, 1).unwrap());
        assert_ne!(a, gen_data(4, 16, 25, 0.35, 2).unwrap());
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&mut x).unwrap();
        gen_data(4, 16, 25, 0.35, 1)
            .unwrap()
            .write_csv(&mut y)
            .unwrap();
        assert_eq!(x, y);
        assert!(gen_data(1, 16, 5, 0.3, 0).is_err());
        assert!(gen_data(3, 1, 5, 0.3, 0).is_err());
    }

    #[test]
    fn class_directions_are_distinct_unit_vectors() {
        let dirs: Vec<_> = (0..9).map(|c| class_direction(c, 3)).collect();
        for (i, d) in dirs.iter().enumerate() {
            assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for e in &dirs[i + 1..] {
                assert_ne!(d, e);
            }
        }
    }

    #[test]
    fn csv_header_and_id_checks() {
        let p = Path::new("t.csv");
        let ok = "id,f0,f1,label\n1,0.5,1,0\n0,2,3,1\n";
        let d = Dataset::read_csv(ok.as_bytes(), p).unwrap();
        assert_eq!(d.sample(0), &[2.0, 3.0]);
        assert_eq!(d.labels(), &[1, 0]);
        assert!(Dataset::read_csv("id,x,label\n0,1,0\n".as_bytes(), p).is_err());
        let gap = "id,f0,label\n0,1,0\n2,1,0\n";
        assert!(matches!(
            Dataset::read_csv(gap.as_bytes(), p),
            Err(Error::Parse { line: 3, .. })
        ));
        let dup = "id,f0,label\n0,1,0\n0,1,0\n";
        assert!(Dataset::read_csv(dup.as_bytes(), p).is_err());
        let bad = "id,f0,label\n0,abc,0\n";
        assert!(matches!(
            Dataset::read_csv(bad.as_bytes(), p),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(Dataset::read_csv("id,f0,label\n".as_bytes(), p).is_err());
    }

    #[test]
    fn batch_gathers_by_id() {
        let d = gen_data(3, 2, 2, 0.1, 0).unwrap();
        let b = d.batch(&[5, 0], 3).unwrap();
        assert_eq!(b.x.row(0), d.sample(5));
        assert_eq!(b.labels, vec![2, 0]);
        assert_eq!(b.y.row(0), &[0.0, 0.0, 1.0]);
        assert!(d.batch(&[6], 3).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(values in prop::collection::vec(-1e6f64..1e6, 6), labels in prop::collection::vec(0usize..5, 3)) {
            let d = Dataset::new(2, values, labels).unwrap();
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back = Dataset::read_csv(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
