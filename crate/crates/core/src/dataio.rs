//! Datasets, on-disk formats and the synthetic cross-domain generator.
//!
//! Target-domain ground truth lives in [`TargetEval`], a type that no
//! training entry point accepts. Training code only ever sees
//! [`TargetDataset`], which carries nothing but features.
//!
//! File formats:
//!
//! * feature file, binary: `b"SROS"`, `u32` version (1), `u64` rows, `u64`
//!   columns, then `rows * columns` little-endian `f32` values, row-major.
//!   Files that do not start with the magic are read as CSV.
//! * labels: one decimal integer per line.
//! * attribute table: `class_id,bit,bit,...` with 0/1 bits, ids dense.
//! * reports, configs and synthetic specs: UTF-8 `key = value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::numkernel::{ensure_finite, Matrix, Rng};

pub const FEATURE_MAGIC: &[u8; 4] = b"SROS";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Per-class binary attribute vectors, row `c` describing class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    rows: Matrix,
}

impl AttributeTable {
    pub fn new(rows: Matrix) -> Result<Self> {
        if let Some(((i, j), v)) = rows.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::Data(format!(
                "attribute table entry ({i}, {j}) = {v} is not binary"
            )));
        }
        Ok(AttributeTable { rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.rows.row(class)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.rows
    }

    /// Rows `range`, as a new table.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> AttributeTable {
        AttributeTable {
            rows: self.rows.slice(ndarray::s![range, ..]).to_owned(),
        }
    }
}

/// Labeled source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Attribute rows of the seen classes only.
    pub attributes: AttributeTable,
}

impl SourceDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, attributes: AttributeTable) -> Result<Self> {
        ensure_finite(features.view(), "source features")?;
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} source feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let known = attributes.num_classes();
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= known) {
            return Err(Error::Data(format!(
                "source label {l} at sample {i} is outside 0..{known}"
            )));
        }
        Ok(SourceDataset {
            features,
            labels,
            attributes,
        })
    }

    pub fn num_known(&self) -> usize {
        self.attributes.num_classes()
    }

    /// Ground-truth attribute vector of sample `i`.
    pub fn sample_attributes(&self, i: usize) -> ArrayView1<'_, f64> {
        self.attributes.row(self.labels[i])
    }
}

/// Unlabeled target domain as seen by training.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDataset {
    pub features: Matrix,
}

impl TargetDataset {
    pub fn new(features: Matrix) -> Result<Self> {
        ensure_finite(features.view(), "target features")?;
        Ok(TargetDataset { features })
    }
}

/// Evaluation-only ground truth of the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEval {
    pub labels: Vec<usize>,
    /// Attribute rows for all `K_s + K` classes.
    pub attributes: AttributeTable,
}

/// Domain shift applied to the source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub rotation_seed: u64,
    /// Rotation angle (radians) in one random plane.
    pub rotation_angle: f64,
    pub bias: f64,
    pub noise: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            rotation_seed: 0,
            rotation_angle: 0.0,
            bias: 0.0,
            noise: 0.0,
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub known_classes: usize,
    pub novel_classes: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Per-coordinate standard deviation of every class cluster.
    pub spread: f64,
    /// Smallest distance between class prototypes, in units of `spread`.
    pub separation: f64,
    /// Fraction of each prototype explained by its attribute vector through a
    /// shared linear map; the rest is class-specific noise.
    pub coupling: f64,
    pub shift: DomainShift,
    pub min_hamming: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            known_classes: 6,
            novel_classes: 3,
            feature_dim: 32,
            attribute_dim: 16,
            source_per_class: 60,
            target_per_class: 60,
            spread: 1.0,
            separation: 8.0,
            coupling: 0.8,
            shift: DomainShift {
                rotation_seed: 11,
                rotation_angle: 0.25,
                bias: 1.0,
                noise: 0.3,
            },
            min_hamming: 4,
            seed: 7,
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "known_classes",
    "novel_classes",
    "feature_dim",
    "attribute_dim",
    "source_per_class",
    "target_per_class",
    "spread",
    "separation",
    "coupling",
    "rotation_seed",
    "rotation_angle",
    "bias",
    "noise",
    "min_hamming",
    "seed",
];

impl SynthSpec {
    pub fn total_classes(&self) -> usize {
        self.known_classes + self.novel_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.known_classes == 0 || self.novel_classes == 0 {
            return bad("known_classes and novel_classes must be positive");
        }
        if self.feature_dim == 0 || self.attribute_dim == 0 {
            return bad("feature_dim and attribute_dim must be positive");
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return bad("per-class sample counts must be positive");
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return bad("spread must be positive");
        }
        if !(self.separation >= 4.0 && self.separation.is_finite()) {
            return bad("separation must be at least 4 spreads");
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad("coupling must lie in [0, 1]");
        }
        let s = &self.shift;
        if !(s.rotation_angle.is_finite() && s.bias >= 0.0 && s.noise >= 0.0) {
            return bad("shift parameters must be finite and non-negative");
        }
        if self.min_hamming == 0 {
            return bad("min_hamming must be at least 1");
        }
        Ok(())
    }

    pub fn from_key_values(text: &str, origin: &Path) -> Result<Self> {
        let kv = parse_key_values(text, origin)?;
        let mut spec = SynthSpec::default();
        for (line, key, value) in &kv {
            let loc = format!("line {line}");
            let int = || parse_value::<usize>(value, origin, &loc, key);
            match key.as_str() {
                "known_classes" => spec.known_classes = int()?,
                "novel_classes" => spec.novel_classes = int()?,
                "feature_dim" => spec.feature_dim = int()?,
                "attribute_dim" => spec.attribute_dim = int()?,
                "source_per_class" => spec.source_per_class = int()?,
                "target_per_class" => spec.target_per_class = int()?,
                "min_hamming" => spec.min_hamming = int()?,
                "spread" => spec.spread = parse_value(value, origin, &loc, key)?,
                "separation" => spec.separation = parse_value(value, origin, &loc, key)?,
                "coupling" => spec.coupling = parse_value(value, origin, &loc, key)?,
                "rotation_seed" => spec.shift.rotation_seed = parse_value(value, origin, &loc, key)?,
                "rotation_angle" => {
                    spec.shift.rotation_angle = parse_value(value, origin, &loc, key)?
                }
                "bias" => spec.shift.bias = parse_value(value, origin, &loc, key)?,
                "noise" => spec.shift.noise = parse_value(value, origin, &loc, key)?,
                "seed" => spec.seed = parse_value(value, origin, &loc, key)?,
                other => {
                    return Err(Error::format(
                        origin,
                        loc,
                        format!("unknown key `{other}`; expected one of {}", SYNTH_KEYS.join(", ")),
                    ))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_key_values(&self) -> String {
        let s = &self.shift;
        format!(
            "known_classes = {}\nnovel_classes = {}\nfeature_dim = {}\nattribute_dim = {}\n\
             source_per_class = {}\ntarget_per_class = {}\nspread = {}\nseparation = {}\n\
             coupling = {}\nrotation_seed = {}\nrotation_angle = {}\nbias = {}\nnoise = {}\n\
             min_hamming = {}\nseed = {}\n",
            self.known_classes,
            self.novel_classes,
            self.feature_dim,
            self.attribute_dim,
            self.source_per_class,
            self.target_per_class,
            self.spread,
            self.separation,
            self.coupling,
            s.rotation_seed,
            s.rotation_angle,
            s.bias,
            s.noise,
            self.min_hamming,
            self.seed,
        )
    }
}

/// Output of [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub source: SourceDataset,
    pub target: TargetDataset,
    pub eval: TargetEval,
}

const ATTRIBUTE_RETRIES: usize = 10_000;

fn random_attribute_rows(spec: &SynthSpec, rng: &mut Rng) -> Result<Matrix> {
    let classes = spec.total_classes();
    let d_a = spec.attribute_dim;
    // nonzero patterns only: a zero row has no cosine direction
    let capacity = if d_a >= 63 { u64::MAX } else { (1u64 << d_a) - 1 };
    if (classes as u64) > capacity || spec.min_hamming > d_a {
        return Err(Error::Generation(format!(
            "{classes} classes cannot have distinct attribute rows with min Hamming {} in {d_a} \
             dimensions; use a larger attribute_dim",
            spec.min_hamming
        )));
    }
    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(classes);
    'class: for c in 0..classes {
        for _ in 0..ATTRIBUTE_RETRIES {
            let cand: Vec<u8> = (0..d_a).map(|_| rng.bernoulli(0.5) as u8).collect();
            if cand.iter().all(|&b| b == 0) {
                continue;
            }
            let far = rows.iter().all(|r| {
                r.iter().zip(&cand).filter(|(a, b)| a != b).count() >= spec.min_hamming
            });
            if far {
                rows.push(cand);
                continue 'class;
            }
        }
        return Err(Error::Generation(format!(
            "could not place attribute row for class {c} with min Hamming {} after \
             {ATTRIBUTE_RETRIES} draws; use a larger attribute_dim",
            spec.min_hamming
        )));
    }
    Ok(Matrix::from_shape_fn((classes, d_a), |(i, j)| rows[i][j] as f64))
}

/// Rotation by `angle` in a random plane spanned by two orthonormal vectors.
fn plane_rotation(dim: usize, angle: f64, rng: &mut Rng) -> Matrix {
    let mut rot = Matrix::eye(dim);
    if dim < 2 || angle == 0.0 {
        return rot;
    }
    let mut u: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.normal());
    u /= u.dot(&u).sqrt();
    let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.normal());
    let proj = v.dot(&u);
    v.scaled_add(-proj, &u);
    v /= v.dot(&v).sqrt();
    let (s, c) = angle.sin_cos();
    for i in 0..dim {
        for j in 0..dim {
            rot[[i, j]] += (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
        }
    }
    rot
}

fn round_to_f32(m: &mut Matrix) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Draws a synthetic cross-domain dataset.
///
/// Class prototypes are a linear image of the attribute vectors plus a
/// class-specific offset, rescaled so the closest pair sits exactly
/// `separation * spread` apart. Target samples are prototype plus isotropic
/// noise for every class. Source samples come from the known classes only
/// and are rotated, translated and perturbed to create the domain shift.
/// Values are rounded to `f32` so that the in-memory data equals what the
/// binary feature format stores.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut attr_rng = root.fork(1);
    let mut proto_rng = root.fork(2);
    let mut target_rng = root.fork(3);
    let mut source_rng = root.fork(4);
    let mut rot_rng = Rng::new(spec.shift.rotation_seed);

    let classes = spec.total_classes();
    let (d_x, d_a) = (spec.feature_dim, spec.attribute_dim);
    let attrs = random_attribute_rows(spec, &mut attr_rng)?;

    let mixing = Matrix::from_shape_fn((d_a, d_x), |_| proto_rng.normal() / (d_a as f64).sqrt());
    let signed = attrs.mapv(|b| 2.0 * b - 1.0);
    let offsets = Matrix::from_shape_fn((classes, d_x), |_| proto_rng.normal());
    let mut protos = signed.dot(&mixing) * spec.coupling + offsets * (1.0 - spec.coupling);
    let mut closest = f64::INFINITY;
    for i in 0..classes {
        for j in (i + 1)..classes {
            let d = (&protos.row(i) - &protos.row(j)).mapv(|v| v * v).sum().sqrt();
            closest = closest.min(d);
        }
    }
    if !(closest > 1e-9) {
        return Err(Error::Generation("two class prototypes coincide".into()));
    }
    protos *= spec.separation * spec.spread / closest;

    let n_t = classes * spec.target_per_class;
    let mut order: Vec<usize> = (0..n_t).collect();
    target_rng.shuffle(&mut order);
    let mut target = Matrix::zeros((n_t, d_x));
    let mut target_labels = vec![0usize; n_t];
    for (slot, &k) in order.iter().enumerate() {
        let c = k / spec.target_per_class;
        target_labels[slot] = c;
        for j in 0..d_x {
            target[[slot, j]] = protos[[c, j]] + spec.spread * target_rng.normal();
        }
    }

    let rotation = plane_rotation(d_x, spec.shift.rotation_angle, &mut rot_rng);
    let mut bias_dir: Array1<f64> = Array1::from_shape_fn(d_x, |_| rot_rng.normal());
    bias_dir /= bias_dir.dot(&bias_dir).sqrt();
    let bias = bias_dir * spec.shift.bias;

    let known = spec.known_classes;
    let n_s = known * spec.source_per_class;
    let mut clean = Matrix::zeros((n_s, d_x));
    let mut source_labels = Vec::with_capacity(n_s);
    for c in 0..known {
        for k in 0..spec.source_per_class {
            let i = c * spec.source_per_class + k;
            for j in 0..d_x {
                clean[[i, j]] = protos[[c, j]] + spec.spread * source_rng.normal();
            }
            source_labels.push(c);
        }
    }
    let mut source = clean.dot(&rotation.t());
    for mut row in source.rows_mut() {
        row += &bias;
        for v in row.iter_mut() {
            *v += spec.shift.noise * source_rng.normal();
        }
    }

    round_to_f32(&mut source);
    round_to_f32(&mut target);
    let full = AttributeTable::new(attrs)?;
    Ok(SynthData {
        source: SourceDataset::new(source, source_labels, full.slice_rows(0..known))?,
        target: TargetDataset::new(target)?,
        eval: TargetEval {
            labels: target_labels,
            attributes: full,
        },
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| {
        Error::format(path, format!("byte {}", e.utf8_error().valid_up_to()), "invalid UTF-8")
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    ensure_finite(m.view(), "features")?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * m.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for ((i, j), &v) in m.indexed_iter() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Data(format!("feature ({i}, {j}) = {v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn save_features(m: &Matrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(m)?)
}

fn decode_binary_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(path, format!("byte {}", bytes.len()), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            "byte 4",
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FEATURE_HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::format(
            path,
            format!("byte {FEATURE_HEADER_LEN}"),
            format!("header declares {rows}x{cols} values but payload has {} bytes", bytes.len() - FEATURE_HEADER_LEN),
        ));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("byte {}", FEATURE_HEADER_LEN + 4 * k),
                format!("non-finite value {v}"),
            ));
        }
        data.push(v as f64);
    }
    Ok(Matrix::from_shape_vec((rows, cols), data).expect("length checked above"))
}

fn decode_csv_features(text: &str, path: &Path) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {}", idx + 1);
        let mut n = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(path, loc.clone(), format!("`{}` is not a number", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::format(path, loc, format!("non-finite value {v}")));
            }
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::format(path, loc, format!("row has {n} values, expected {c}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, "line 1", "no rows"))?;
    Ok(Matrix::from_shape_vec((rows, cols), data).expect("rows counted above"))
}

/// Loads a feature matrix, binary if the file starts with the magic bytes and
/// CSV otherwise.
pub fn load_features(path: &Path) -> Result<Matrix> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(FEATURE_MAGIC) {
        decode_binary_features(&bytes, path)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::format(path, "byte 0", "neither SROS binary nor UTF-8 CSV"))?;
        decode_csv_features(&text, path)
    }
}

pub fn save_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(text, "{l}").unwrap();
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                Error::format(path, format!("line {}", i + 1), format!("`{}` is not a label", l.trim()))
            })
        })
        .collect()
}

pub fn encode_attribute_table(table: &AttributeTable) -> String {
    let mut text = String::new();
    for (c, row) in table.as_matrix().rows().into_iter().enumerate() {
        write!(text, "{c}").unwrap();
        for v in row {
            write!(text, ",{}", *v as u8).unwrap();
        }
        text.push('\n');
    }
    text
}

pub fn save_attribute_table(table: &AttributeTable, path: &Path) -> Result<()> {
    write_atomic(path, encode_attribute_table(table).as_bytes())
}

pub fn load_attribute_table(path: &Path, expected_dim: Option<usize>) -> Result<AttributeTable> {
    let text = read_text(path)?;
    let mut by_id: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    let mut dim = expected_dim;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("line {}", idx + 1);
        let mut fields = line.split(',').map(str::trim);
        let id_field = fields.next().unwrap_or("");
        let id: usize = id_field
            .parse()
            .map_err(|_| Error::format(path, loc.clone(), format!("bad class id `{id_field}`")))?;
        let bits = fields
            .map(|f| match f {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(Error::format(path, loc.clone(), format!("non-binary value `{other}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(bits.len()),
            Some(d) if d != bits.len() => {
                return Err(Error::format(
                    path,
                    loc,
                    format!("{} attribute values, expected {d}", bits.len()),
                ))
            }
            _ => {}
        }
        if let Some((first, _)) = by_id.insert(id, (idx + 1, bits)) {
            return Err(Error::format(path, loc, format!("class id {id} duplicates line {first}")));
        }
    }
    let dim = dim.ok_or_else(|| Error::format(path, "line 1", "empty attribute table"))?;
    if dim == 0 {
        return Err(Error::format(path, "line 1", "rows carry no attribute values"));
    }
    let k = by_id.len();
    for (expect, (&id, (line, _))) in by_id.iter().enumerate() {
        if id != expect {
            return Err(Error::format(
                path,
                format!("line {line}"),
                format!("class id {expect} is missing (ids must be 0..{k})"),
            ));
        }
    }
    let mut rows = Matrix::zeros((k, dim));
    for (c, (_, bits)) in by_id.values().enumerate() {
        for (j, b) in bits.iter().enumerate() {
            rows[[c, j]] = *b;
        }
    }
    AttributeTable::new(rows)
}

/// Splits `key = value` text into `(line, key, value)` triples. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}", idx + 1), "expected `key = value`")
        })?;
        let key = key.trim().to_string();
        if let Some(prev) = seen.insert(key.clone(), idx + 1) {
            return Err(Error::format(
                origin,
                format!("line {}", idx + 1),
                format!("key `{key}` already set on line {prev}"),
            ));
        }
        out.push((idx + 1, key, value.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(
    value: &str,
    origin: &Path,
    location: &str,
    key: &str,
) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(origin, location, format!("bad value `{value}` for `{key}`")))
}

/// Names of the files inside a dataset directory.
pub mod layout {
    pub const SOURCE_FEATURES: &str = "source_features.bin";
    pub const SOURCE_LABELS: &str = "source_labels.txt";
    pub const SOURCE_ATTRIBUTES: &str = "source_attributes.csv";
    pub const TARGET_FEATURES: &str = "target_features.bin";
    /// Evaluation-only files live under this subdirectory.
    pub const EVAL_DIR: &str = "eval";
    pub const TARGET_LABELS: &str = "target_labels.txt";
    pub const TARGET_ATTRIBUTES: &str = "target_attributes.csv";
}

pub fn save_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    let eval_dir = dir.join(layout::EVAL_DIR);
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    save_features(&data.source.features, &dir.join(layout::SOURCE_FEATURES))?;
    save_labels(&data.source.labels, &dir.join(layout::SOURCE_LABELS))?;
    save_attribute_table(&data.source.attributes, &dir.join(layout::SOURCE_ATTRIBUTES))?;
    save_features(&data.target.features, &dir.join(layout::TARGET_FEATURES))?;
    save_labels(&data.eval.labels, &eval_dir.join(layout::TARGET_LABELS))?;
    save_attribute_table(&data.eval.attributes, &eval_dir.join(layout::TARGET_ATTRIBUTES))
}

pub fn load_source(dir: &Path) -> Result<SourceDataset> {
    let features = load_features(&dir.join(layout::SOURCE_FEATURES))?;
    let labels = load_labels(&dir.join(layout::SOURCE_LABELS))?;
    let attributes = load_attribute_table(&dir.join(layout::SOURCE_ATTRIBUTES), None)?;
    SourceDataset::new(features, labels, attributes)
}

pub fn load_target(dir: &Path) -> Result<TargetDataset> {
    TargetDataset::new(load_features(&dir.join(layout::TARGET_FEATURES))?)
}

pub fn load_target_eval(dir: &Path) -> Result<TargetEval> {
    let eval_dir = dir.join(layout::EVAL_DIR);
    let labels_path = eval_dir.join(layout::TARGET_LABELS);
    let labels = load_labels(&labels_path)?;
    let attributes = load_attribute_table(&eval_dir.join(layout::TARGET_ATTRIBUTES), None)?;
    let k = attributes.num_classes();
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::format(
            labels_path,
            format!("line {}", i + 1),
            format!("label {l} has no attribute row (table has {k} classes)"),
        ));
    }
    Ok(TargetEval { labels, attributes })
}

/// Tolerance of the OS composition identity enforced on save.
pub const REPORT_IDENTITY_TOL: f64 = 1e-12;

pub fn encode_report(report: &MetricsReport) -> Result<String> {
    if report.confusion.is_empty() || report.confusion[0].len() < 2 {
        return Err(Error::Contract("report has an empty confusion matrix".into()));
    }
    let cols = report.confusion[0].len();
    if report.confusion.iter().any(|r| r.len() != cols) {
        return Err(Error::Contract("ragged confusion matrix".into()));
    }
    let known = (cols - 1) as f64;
    let composed = (known * report.os_star + report.os_diamond) / (known + 1.0);
    if (report.os - composed).abs() > REPORT_IDENTITY_TOL {
        return Err(Error::Contract(format!(
            "os = {} but (K_s * os_star + os_diamond) / (K_s + 1) = {composed}",
            report.os
        )));
    }
    let mut text = String::new();
    for (key, value) in [
        ("os", report.os),
        ("os_star", report.os_star),
        ("os_diamond", report.os_diamond),
        ("s", report.s),
        ("u", report.u),
        ("h", report.h),
        ("tau", report.tau),
    ] {
        writeln!(text, "{key} = {value}").unwrap();
    }
    writeln!(text, "epochs = {}", report.epochs).unwrap();
    writeln!(text, "seed = {}", report.seed).unwrap();
    for (t, row) in report.confusion.iter().enumerate() {
        for (p, count) in row.iter().enumerate() {
            writeln!(text, "confusion.{t}.{p} = {count}").unwrap();
        }
    }
    for (i, (p, r)) in report.attr_pr.iter().enumerate() {
        writeln!(text, "attr_pr.{i} = {p} {r}").unwrap();
    }
    Ok(text)
}

pub fn save_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = encode_report(report)?;
    write_atomic(path, text.as_bytes())
}

pub fn decode_report(text: &str, origin: &Path) -> Result<MetricsReport> {
    let kv = parse_key_values(text, origin)?;
    let mut scalars: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut confusion: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut attr: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (line, key, value) in &kv {
        let loc = format!("line {line}");
        if let Some(rest) = key.strip_prefix("confusion.") {
            let (t, p) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(origin, loc.clone(), format!("bad key `{key}`")))?;
            let t = parse_value(t, origin, &loc, key)?;
            let p = parse_value(p, origin, &loc, key)?;
            confusion.insert((t, p), parse_value(value, origin, &loc, key)?);
        } else if let Some(rest) = key.strip_prefix("attr_pr.") {
            let i = parse_value(rest, origin, &loc, key)?;
            let mut parts = value.split_whitespace();
            let (Some(p), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(origin, loc, "attr_pr needs `precision recall`"));
            };
            attr.insert(i, (parse_value(p, origin, &loc, key)?, parse_value(r, origin, &loc, key)?));
        } else {
            scalars.insert(key.as_str(), (*line, value.as_str()));
        }
    }
    let get = |key: &str| -> Result<(String, &str)> {
        scalars
            .get(key)
            .map(|(line, v)| (format!("line {line}"), *v))
            .ok_or_else(|| Error::format(origin, "end of file", format!("missing key `{key}`")))
    };
    let real = |key: &str| -> Result<f64> {
        let (loc, v) = get(key)?;
        parse_value(v, origin, &loc, key)
    };
    let rows = confusion.keys().map(|(t, _)| t + 1).max().unwrap_or(0);
    let cols = confusion.keys().map(|(_, p)| p + 1).max().unwrap_or(0);
    if rows * cols != confusion.len() || rows == 0 {
        return Err(Error::format(origin, "end of file", "confusion entries do not form a full grid"));
    }
    let mut grid = vec![vec![0u64; cols]; rows];
    for ((t, p), c) in confusion {
        grid[t][p] = c;
    }
    if attr.keys().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::format(origin, "end of file", "attr_pr indices are not dense"));
    }
    let (epochs_loc, epochs) = get("epochs")?;
    let (seed_loc, seed) = get("seed")?;
    Ok(MetricsReport {
        os: real("os")?,
        os_star: real("os_star")?,
        os_diamond: real("os_diamond")?,
        s: real("s")?,
        u: real("u")?,
        h: real("h")?,
        tau: real("tau")?,
        epochs: parse_value(epochs, origin, &epochs_loc, "epochs")?,
        seed: parse_value(seed, origin, &seed_loc, "seed")?,
        confusion: grid,
        attr_pr: attr.into_values().collect(),
    })
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    decode_report(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use tempfile::tempdir;

    #[test]
    fn binary_features_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let m = arr2(&[[1.0, 2.0, 3.0], [-4.5, 0.25, 6.0]]);
        save_features(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 6 * 4);
        assert_eq!(&bytes[..4], b"SROS");
        assert_eq!(load_features(&path).unwrap(), m);
    }

    #[test]
    fn csv_features() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "1.0,2.0\n3.0,4.0").unwrap();
        assert_eq!(load_features(&path).unwrap(), arr2(&[[1.0, 2.0], [3.0, 4.0]]));

        fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        let err = load_features(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        fs::write(&path, "1.0,NaN\n").unwrap();
        assert!(load_features(&path).is_err());
    }

    #[test]
    fn binary_header_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut bytes = encode_features(&arr2(&[[1.0, 2.0]])).unwrap();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        let err = load_features(&path).unwrap_err().to_string();
        assert!(err.contains("byte 4"), "{err}");

        let mut bytes = encode_features(&arr2(&[[1.0, 2.0]])).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(load_features(&path).is_err());

        let mut bytes = encode_features(&arr2(&[[1.0, 2.0]])).unwrap();
        bytes[28..32].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_features(&path).unwrap_err().to_string();
        assert!(err.contains("byte 28"), "{err}");
    }

    #[test]
    fn attribute_tables() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "1,0,1,1\n0,1,0,1\n").unwrap();
        let t = load_attribute_table(&path, Some(3)).unwrap();
        assert_eq!(t.as_matrix(), &arr2(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]));

        fs::write(&path, "0,1,2,1\n").unwrap();
        assert!(load_attribute_table(&path, None).unwrap_err().to_string().contains("non-binary"));

        fs::write(&path, "0,1,0\n2,0,1\n").unwrap();
        assert!(load_attribute_table(&path, None).unwrap_err().to_string().contains("missing"));

        fs::write(&path, "0,1,0\n0,0,1\n").unwrap();
        assert!(load_attribute_table(&path, None).unwrap_err().to_string().contains("duplicates"));

        fs::write(&path, "0,1,0\n").unwrap();
        assert!(load_attribute_table(&path, Some(3)).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.txt");
        save_labels(&[3, 0, 12], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "3\n0\n12\n");
        assert_eq!(load_labels(&path).unwrap(), vec![3, 0, 12]);
    }

    fn small_spec() -> SynthSpec {
        SynthSpec {
            known_classes: 2,
            novel_classes: 1,
            feature_dim: 4,
            attribute_dim: 8,
            source_per_class: 10,
            target_per_class: 10,
            shift: DomainShift::none(),
            min_hamming: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&small_spec()).unwrap();
        let b = synth_generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let other = synth_generate(&SynthSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.target.features, other.target.features);
    }

    #[test]
    fn synth_shapes_and_separation() {
        let spec = SynthSpec::default();
        let data = synth_generate(&spec).unwrap();
        assert_eq!(data.source.features.dim(), (360, 32));
        assert_eq!(data.target.features.dim(), (540, 32));
        assert_eq!(data.source.attributes.num_classes(), 6);
        assert_eq!(data.eval.attributes.num_classes(), 9);
        assert_eq!(
            data.source.attributes.as_matrix(),
            &data.eval.attributes.as_matrix().slice(ndarray::s![0..6, ..]).to_owned()
        );
        let full = data.eval.attributes.as_matrix();
        for i in 0..9 {
            for j in (i + 1)..9 {
                let ham = full.row(i).iter().zip(full.row(j)).filter(|(a, b)| a != b).count();
                assert!(ham >= spec.min_hamming);
            }
        }
        let mut counts = [0usize; 9];
        for &l in &data.eval.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 60));
    }

    #[test]
    fn synth_rejects_impossible_attributes() {
        let spec = SynthSpec {
            known_classes: 3,
            novel_classes: 1,
            attribute_dim: 1,
            min_hamming: 1,
            ..small_spec()
        };
        let err = synth_generate(&spec).unwrap_err();
        assert!(matches!(err, Error::Generation(ref m) if m.contains("attribute_dim")), "{err}");
    }

    #[test]
    fn unshifted_domains_share_class_means() {
        let spec = SynthSpec {
            shift: DomainShift::none(),
            ..SynthSpec::default()
        };
        let data = synth_generate(&spec).unwrap();
        let n = spec.source_per_class as f64;
        // two-sample mean difference has std spread * sqrt(2 / n); 3 spread / sqrt(n)
        // is 2.1 sigma, so allow a handful of exceedances across 6 * 32 coordinates
        let mut exceed = 0;
        for c in 0..spec.known_classes {
            let src: Vec<usize> = (0..data.source.labels.len()).filter(|&i| data.source.labels[i] == c).collect();
            let tgt: Vec<usize> = (0..data.eval.labels.len()).filter(|&i| data.eval.labels[i] == c).collect();
            for j in 0..spec.feature_dim {
                let ms = src.iter().map(|&i| data.source.features[[i, j]]).sum::<f64>() / src.len() as f64;
                let mt = tgt.iter().map(|&i| data.target.features[[i, j]]).sum::<f64>() / tgt.len() as f64;
                if (ms - mt).abs() > 3.0 * spec.spread / n.sqrt() {
                    exceed += 1;
                }
            }
        }
        assert!(exceed <= 12, "{exceed} coordinates exceed the bound");
    }

    #[test]
    fn synth_spec_key_values_round_trip() {
        let spec = SynthSpec { seed: 99, ..SynthSpec::default() };
        let text = spec.to_key_values();
        let back = SynthSpec::from_key_values(&text, Path::new("spec.txt")).unwrap();
        assert_eq!(back, spec);
        assert!(SynthSpec::from_key_values("colour = red\n", Path::new("x")).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempdir().unwrap();
        let data = synth_generate(&small_spec()).unwrap();
        save_dataset(&data, dir.path()).unwrap();
        assert_eq!(load_source(dir.path()).unwrap(), data.source);
        assert_eq!(load_target(dir.path()).unwrap(), data.target);
        assert_eq!(load_target_eval(dir.path()).unwrap(), data.eval);
    }
}
