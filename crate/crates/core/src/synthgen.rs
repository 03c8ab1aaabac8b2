//! Synthetic paired two-modality benchmark.
//!
//! Twenty isotropic Gaussians in a 5-d latent space play the role of hidden
//! semantic classes. Each latent `z` yields a pair `(f_A(z), f_B(z))` through
//! two fixed random tanh networks `5 → 50 → 50 → 100`. 500 pairs per class,
//! split 7000/1000/2000 into train/validation/test.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::ndmath::{Activation, Matrix, Mlp, ParamSet};
use crate::rng::stream;

pub const N_CLASSES: usize = 20;
pub const PAIRS_PER_CLASS: usize = 500;
pub const LATENT_DIM: usize = 5;
pub const HIDDEN: usize = 50;
pub const OBS_DIM: usize = 100;
pub const LATENT_SIGMA: f64 = 0.1;
pub const SPLIT_SIZES: [usize; 3] = [7000, 1000, 2000];

const MAGIC: &[u8] = b"SWMP1\n";
const MAGIC_STEM: &[u8] = b"SWMP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

/// Paired observations with hidden class labels.
///
/// Training code only ever sees [`PairView`]s, which carry no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    xa: Matrix,
    xb: Matrix,
    labels: Vec<i32>,
    split: Vec<Split>,
    n_classes: usize,
    seed: u64,
}

/// The two modalities of one split, without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairView {
    pub xa: Matrix,
    pub xb: Matrix,
}

impl PairView {
    pub fn len(&self) -> usize {
        self.xa.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.xa.rows() == 0
    }

    /// First `n` pairs (all of them if fewer).
    pub fn head(&self, n: usize) -> PairView {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        PairView {
            xa: self.xa.select_rows(&idx),
            xb: self.xb.select_rows(&idx),
        }
    }
}

impl PairedDataset {
    pub fn new(
        xa: Matrix,
        xb: Matrix,
        labels: Vec<i32>,
        split: Vec<Split>,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = xa.rows();
        if xb.rows() != m || labels.len() != m || split.len() != m {
            return Err(Error::dim(
                "PairedDataset::new",
                format!(
                    "rows: xa {m}, xb {}, labels {}, split {}",
                    xb.rows(),
                    labels.len(),
                    split.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < 0 || l as usize >= n_classes) {
            return Err(Error::Input(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(PairedDataset {
            xa,
            xb,
            labels,
            split,
            n_classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.xa.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.xa.rows() == 0
    }

    pub fn dim_a(&self) -> usize {
        self.xa.cols()
    }

    pub fn dim_b(&self) -> usize {
        self.xb.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn xa(&self) -> &Matrix {
        &self.xa
    }

    pub fn xb(&self) -> &Matrix {
        &self.xb
    }

    pub fn split_codes(&self) -> &[Split] {
        &self.split
    }

    /// Hidden class labels; for class-based evaluation only.
    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.split {
            c[s.code() as usize] += 1;
        }
        c
    }

    pub fn pairs(&self, split: Split) -> PairView {
        let idx = self.indices(split);
        PairView {
            xa: self.xa.select_rows(&idx),
            xb: self.xb.select_rows(&idx),
        }
    }

    pub fn labels_of(&self, split: Split) -> Vec<i32> {
        self.indices(split)
            .into_iter()
            .map(|i| self.labels[i])
            .collect()
    }
}

/// Class means `~ N(0, I)` and the shared isotropic spread.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    pub means: Matrix,
    pub sigma: f64,
}

impl ClassMixture {
    pub fn sample(seed: u64) -> Self {
        let mut rng = stream(seed, "gaussians");
        let data = (0..N_CLASSES * LATENT_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        ClassMixture {
            means: Matrix::from_vec(N_CLASSES, LATENT_DIM, data).expect("shape"),
            sigma: LATENT_SIGMA,
        }
    }

    /// `per_class` latents for every class, class-major; returns labels too.
    pub fn sample_latents(&self, per_class: usize, rng: &mut ChaCha8Rng) -> (Matrix, Vec<i32>) {
        let (k, d) = self.means.shape();
        let noise = Normal::new(0.0, self.sigma).expect("sigma > 0");
        let mut z = Vec::with_capacity(k * per_class * d);
        let mut labels = Vec::with_capacity(k * per_class);
        for c in 0..k {
            let mu = self.means.row(c);
            for _ in 0..per_class {
                z.extend(mu.iter().map(|m| m + noise.sample(rng)));
                labels.push(c as i32);
            }
        }
        (
            Matrix::from_vec(k * per_class, d, z).expect("shape"),
            labels,
        )
    }
}

/// The frozen generator networks `f_A`, `f_B`.
#[derive(Debug, Clone)]
pub struct GeneratorNets {
    params: ParamSet,
    f_a: Mlp,
    f_b: Mlp,
}

impl GeneratorNets {
    pub fn sample(seed: u64) -> Self {
        let mut rng = stream(seed, "generator-weights");
        let mut params = ParamSet::new();
        let dims = [LATENT_DIM, HIDDEN, HIDDEN, OBS_DIM];
        let f_a = Mlp::new(&mut params, &dims, Activation::Tanh, &mut rng);
        let f_b = Mlp::new(&mut params, &dims, Activation::Tanh, &mut rng);
        GeneratorNets { params, f_a, f_b }
    }

    pub fn apply(&self, z: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((
            self.f_a.apply(&self.params, z)?,
            self.f_b.apply(&self.params, z)?,
        ))
    }
}

/// The full 10,000-pair dataset for `seed`, with the split also drawn from
/// `seed`. Observations are rounded to `f32` so files round-trip exactly.
pub fn generate(seed: u64) -> Result<PairedDataset> {
    let mixture = ClassMixture::sample(seed);
    let nets = GeneratorNets::sample(seed);
    let mut rng = stream(seed, "latents");
    let (z, labels) = mixture.sample_latents(PAIRS_PER_CLASS, &mut rng);
    let (xa, xb) = nets.apply(&z)?;
    let to_f32 = |m: Matrix| m.map(|v| v as f32 as f64);
    let m = labels.len();
    let ds = PairedDataset::new(
        to_f32(xa),
        to_f32(xb),
        labels,
        vec![Split::Train; m],
        N_CLASSES,
        seed,
    )?;
    split(ds, seed)
}

/// Assigns a seeded random 7000/1000/2000 split in which every class occurs
/// in every part.
pub fn split(mut ds: PairedDataset, seed: u64) -> Result<PairedDataset> {
    let m = ds.len();
    if m != SPLIT_SIZES.iter().sum::<usize>() {
        return Err(Error::Input(format!(
            "split expects {} pairs, dataset has {m}",
            SPLIT_SIZES.iter().sum::<usize>()
        )));
    }
    let mut rng = stream(seed, "split");
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        perm.shuffle(&mut rng);
        let mut codes = vec![Split::Train; m];
        for (pos, &row) in perm.iter().enumerate() {
            codes[row] = if pos < SPLIT_SIZES[0] {
                Split::Train
            } else if pos < SPLIT_SIZES[0] + SPLIT_SIZES[1] {
                Split::Val
            } else {
                Split::Test
            };
        }
        let mut seen = vec![[false; 3]; ds.n_classes];
        for (row, code) in codes.iter().enumerate() {
            seen[ds.labels[row] as usize][code.code() as usize] = true;
        }
        if seen.iter().all(|s| s.iter().all(|&x| x)) {
            ds.split = codes;
            return Ok(ds);
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Header {
    m: usize,
    dim_a: usize,
    dim_b: usize,
    n_classes: usize,
    seed: u64,
}

/// Serializes `ds` in the `SWMP1` layout: magic line, JSON header line, then
/// little-endian f32 `xa`, f32 `xb`, i32 labels, u8 split codes.
pub fn to_bytes(ds: &PairedDataset) -> Vec<u8> {
    let header = Header {
        m: ds.len(),
        dim_a: ds.dim_a(),
        dim_b: ds.dim_b(),
        n_classes: ds.n_classes,
        seed: ds.seed,
    };
    let mut out =
        Vec::with_capacity(MAGIC.len() + 128 + ds.len() * (4 * (ds.dim_a() + ds.dim_b()) + 5));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
    out.push(b'\n');
    for v in ds.xa.as_slice().iter().chain(ds.xb.as_slice()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend(ds.split.iter().map(|s| s.code()));
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<PairedDataset> {
    if !bytes.starts_with(MAGIC) {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).into_owned();
        if bytes.starts_with(MAGIC_STEM) {
            return Err(FormatError::Version(found).into());
        }
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found,
        }
        .into());
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::Header("missing header line terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut payload = &rest[nl + 1..];

    let (m, da, db) = (header.m, header.dim_a, header.dim_b);
    let xa = take_f32(&mut payload, m, da, "xa")?;
    let xb = take_f32(&mut payload, m, db, "xb")?;
    let label_bytes = take(&mut payload, 4 * m, "labels")?;
    let labels: Vec<i32> = label_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let codes = take(&mut payload, m, "split codes")?;
    let split = codes
        .iter()
        .map(|&c| {
            Split::from_code(c)
                .ok_or_else(|| FormatError::Header(format!("invalid split code {c}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if !payload.is_empty() {
        return Err(FormatError::TrailingBytes(payload.len()).into());
    }
    PairedDataset::new(xa, xb, labels, split, header.n_classes, header.seed)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, section: &'static str) -> Result<&'a [u8], FormatError> {
    if buf.len() < n {
        return Err(FormatError::Truncated {
            section,
            expected: n,
            actual: buf.len(),
        });
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_f32(buf: &mut &[u8], rows: usize, cols: usize, section: &'static str) -> Result<Matrix> {
    let raw = take(buf, 4 * rows * cols, section)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save(ds: &PairedDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PairedDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> PairedDataset {
        let xa = Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0], [7.0, 8.0]]);
        let xb = Matrix::from_rows(&[[0.5], [1.0], [-1.0]]);
        PairedDataset::new(
            xa,
            xb,
            vec![0, 1, 1],
            vec![Split::Train, Split::Val, Split::Test],
            2,
            9,
        )
        .unwrap()
    }

    #[test]
    fn generated_dataset_shape_and_balance() {
        let ds = generate(0).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!((ds.dim_a(), ds.dim_b()), (100, 100));
        let mut per_class = [0usize; N_CLASSES];
        for &l in ds.labels() {
            per_class[l as usize] += 1;
        }
        assert!(per_class.iter().all(|&c| c == PAIRS_PER_CLASS));
        assert_eq!(ds.split_counts(), SPLIT_SIZES);
        for s in [Split::Train, Split::Val, Split::Test] {
            let mut classes = ds.labels_of(s);
            classes.sort();
            classes.dedup();
            assert_eq!(classes.len(), N_CLASSES);
        }
        assert!(ds.xa().is_finite() && ds.xb().is_finite());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(5).unwrap(), generate(5).unwrap());
        assert_ne!(generate(5).unwrap().xa(), generate(6).unwrap().xa());
    }

    #[test]
    fn split_is_a_partition() {
        let ds = generate(1).unwrap();
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| ds.indices(s))
            .collect();
        all.sort();
        assert_eq!(all, (0..10_000).collect::<Vec<_>>());
        let again = split(ds.clone(), 1).unwrap();
        assert_eq!(again.split_codes(), ds.split_codes());
    }

    #[test]
    fn latent_classes_are_separable() {
        let mixture = ClassMixture::sample(3);
        let mut rng = stream(3, "separability-check");
        let (z, labels) = mixture.sample_latents(200, &mut rng);
        let mut correct = 0;
        for (i, row) in z.row_iter().enumerate() {
            let nearest = (0..N_CLASSES)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(mixture.means.row(a))
                        .map(|(x, m)| (x - m).powi(2))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(mixture.means.row(b))
                        .map(|(x, m)| (x - m).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(nearest as i32 == labels[i]);
        }
        assert!(correct as f64 / z.rows() as f64 >= 0.99);
    }

    #[test]
    fn bytes_round_trip() {
        let ds = small_dataset();
        let bytes = to_bytes(&ds);
        assert!(bytes
            .starts_with(b"SWMP1\n{\"m\":3,\"dim_a\":2,\"dim_b\":1,\"n_classes\":2,\"seed\":9}\n"));
        assert_eq!(from_bytes(&bytes).unwrap(), ds);
    }

    #[test]
    fn parse_errors() {
        let bytes = to_bytes(&small_dataset());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));

        let mut v2 = bytes.clone();
        v2[4] = b'2';
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::Format(FormatError::Version(_)))
        ));

        let header_end = bytes.iter().skip(6).position(|&b| b == b'\n').unwrap() + 7;
        let cut = &bytes[..header_end + 10];
        match from_bytes(cut) {
            Err(Error::Format(FormatError::Truncated {
                section,
                expected,
                actual,
            })) => {
                assert_eq!(section, "xa");
                assert_eq!(expected, 24);
                assert_eq!(actual, 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            from_bytes(&extra),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));

        let mut bad_split = bytes.clone();
        *bad_split.last_mut().unwrap() = 7;
        assert!(matches!(
            from_bytes(&bad_split),
            Err(Error::Format(FormatError::Header(_)))
        ));
    }
}
