//! Synthetic bias-imbalanced datasets.
//!
//! Each sample is generated from two independent binary attributes: the
//! target `y` and a bias `b`. Feature column 0 carries the target signal
//! (`Normal(+/- target_separation/2, 1)` signed by `y`), column 1 carries
//! the bias signal (`Normal(+/- bias_separation/2, noise_sigma)` signed by
//! `b`), and the remaining columns are pure noise. With
//! `bias_separation > target_separation` the bias channel is strictly the
//! easier feature, which is what makes shortcut learning reproducible.
//!
//! The canonical label encoding fixes "aligned" as `y == b`; presets that
//! reverse the majority pairing relabel internally (by flipping the sign
//! convention of the bias channel), so downstream code never special-cases
//! presets.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{map_chunks, ROW_CHUNK};
use crate::seed::mix;

/// Which bias-imbalance construction to generate.
///
/// `SbpAnalog` and `GbpAnalogTr1` pair `y = 1` with `b = 1` as the majority
/// group; `GbpAnalogTr2` reverses which underlying attribute is
/// majority-paired, realized as a flipped bias-channel sign convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SbpAnalog,
    GbpAnalogTr1,
    GbpAnalogTr2,
}

impl Preset {
    fn bias_channel_orientation(self) -> f64 {
        match self {
            Preset::SbpAnalog | Preset::GbpAnalogTr1 => 1.0,
            Preset::GbpAnalogTr2 => -1.0,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbp" | "sbp_analog" => Ok(Preset::SbpAnalog),
            "gbp-tr1" | "gbp_analog_tr1" => Ok(Preset::GbpAnalogTr1),
            "gbp-tr2" | "gbp_analog_tr2" => Ok(Preset::GbpAnalogTr2),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected sbp, gbp-tr1 or gbp-tr2)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub preset: Preset,
    /// Minority-to-majority group ratio r, in percent, in (0, 100].
    pub bias_ratio_pct: f64,
    /// Training samples in each of the two majority (aligned) groups.
    pub majority_group_size: usize,
    /// Mean gap of the target-informative feature (its noise is unit).
    pub target_separation: f64,
    /// Mean gap of the bias-informative feature.
    pub bias_separation: f64,
    pub noise_dims: usize,
    pub noise_sigma: f64,
    pub val_per_group: usize,
    pub test_per_group: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            preset: Preset::SbpAnalog,
            bias_ratio_pct: 10.0,
            majority_group_size: 1000,
            target_separation: 1.0,
            bias_separation: 3.0,
            noise_dims: 8,
            noise_sigma: 1.0,
            val_per_group: 200,
            test_per_group: 400,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias_ratio_pct > 0.0 && self.bias_ratio_pct <= 100.0) {
            return Err(Error::Config(format!(
                "bias ratio must lie in (0,100], got {}",
                self.bias_ratio_pct
            )));
        }
        if self.majority_group_size < 1 || self.val_per_group < 1 || self.test_per_group < 1 {
            return Err(Error::Config("all group counts must be >= 1".into()));
        }
        if self.target_separation <= 0.0 {
            return Err(Error::Config("target separation must be > 0".into()));
        }
        if self.bias_separation <= self.target_separation {
            return Err(Error::Config(format!(
                "presets require the bias feature to be easier: bias separation {} must exceed target separation {}",
                self.bias_separation, self.target_separation
            )));
        }
        if self.noise_sigma <= 0.0 {
            return Err(Error::Config("noise sigma must be > 0".into()));
        }
        Ok(())
    }

    /// Training count of each minority (conflicting) group.
    pub fn minority_group_size(&self) -> usize {
        (self.majority_group_size as f64 * self.bias_ratio_pct / 100.0).round() as usize
    }

    pub fn num_features(&self) -> usize {
        2 + self.noise_dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Aligned,
    Conflicting,
}

/// The dataset: a feature matrix with target labels, optional bias labels,
/// and per-row split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub features: Matrix,
    pub target: Vec<usize>,
    pub bias: Option<Vec<usize>>,
    pub split: Vec<Split>,
}

impl SampleTable {
    pub fn new(
        features: Matrix,
        target: Vec<usize>,
        bias: Option<Vec<usize>>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = features.rows();
        if features.cols() < 2 {
            return Err(Error::Config("tables need at least two feature columns".into()));
        }
        if target.len() != n || split.len() != n {
            return Err(Error::Dim("label vector lengths must match feature rows".into()));
        }
        if let Some(b) = &bias {
            if b.len() != n {
                return Err(Error::Dim("bias vector length must match feature rows".into()));
            }
            if b.iter().any(|&v| v > 1) {
                return Err(Error::Config("bias labels must be 0 or 1".into()));
            }
        }
        if target.iter().any(|&v| v > 1) {
            return Err(Error::Config("target labels must be 0 or 1".into()));
        }
        Ok(SampleTable {
            features,
            target,
            bias,
            split,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.num_rows()).filter(|&i| self.split[i] == split).collect()
    }

    /// Extracts one split as (features, targets, bias-if-present).
    pub fn extract(&self, split: Split) -> (Matrix, Vec<usize>, Option<Vec<usize>>) {
        let idx = self.split_indices(split);
        let features = self.features.gather_rows(&idx);
        let target = idx.iter().map(|&i| self.target[i]).collect();
        let bias = self
            .bias
            .as_ref()
            .map(|b| idx.iter().map(|&i| b[i]).collect());
        (features, target, bias)
    }

    /// Counts per (target, bias) group within a split, indexed `[y][b]`.
    pub fn group_counts(&self, split: Split) -> Result<[[usize; 2]; 2]> {
        let bias = self
            .bias
            .as_ref()
            .ok_or_else(|| Error::Config("table has no bias labels".into()))?;
        let mut counts = [[0usize; 2]; 2];
        for i in self.split_indices(split) {
            counts[self.target[i]][bias[i]] += 1;
        }
        Ok(counts)
    }
}

/// Per-row alignment tags: aligned iff the target and bias labels agree
/// under the canonical encoding.
pub fn alignment_tags(table: &SampleTable) -> Result<Vec<Alignment>> {
    let bias = table
        .bias
        .as_ref()
        .ok_or_else(|| Error::Config("alignment tags need bias labels".into()))?;
    Ok(table
        .target
        .iter()
        .zip(bias.iter())
        .map(|(&y, &b)| {
            if y == b {
                Alignment::Aligned
            } else {
                Alignment::Conflicting
            }
        })
        .collect())
}

struct RowSpec {
    y: usize,
    b: usize,
    split: Split,
    uid: u64,
}

/// Generates a dataset realizing the configured group counts:
/// training groups `(y=1,b=1)` and `(y=0,b=0)` hold `majority_group_size`
/// samples each, the two conflicting groups hold
/// `round(majority_group_size * ratio / 100)`, and the validation and test
/// splits are group-balanced. Deterministic per seed.
pub fn generate_biased_dataset(config: &GenConfig) -> Result<SampleTable> {
    config.validate()?;
    let minority = config.minority_group_size();
    let mut specs: Vec<RowSpec> = Vec::new();
    let mut uid = 0u64;
    let groups = [(1usize, 1usize), (1, 0), (0, 1), (0, 0)];
    let mut push_group = |specs: &mut Vec<RowSpec>, split, y, b, count| {
        for _ in 0..count {
            specs.push(RowSpec { y, b, split, uid });
            uid += 1;
        }
    };
    for (y, b) in groups {
        let count = if y == b { config.majority_group_size } else { minority };
        push_group(&mut specs, Split::Train, y, b, count);
    }
    for (y, b) in groups {
        push_group(&mut specs, Split::Val, y, b, config.val_per_group);
    }
    for (y, b) in groups {
        push_group(&mut specs, Split::Test, y, b, config.test_per_group);
    }

    let d = config.num_features();
    let orientation = config.preset.bias_channel_orientation();
    let target_noise = Normal::new(0.0, 1.0).expect("unit sigma");
    let other_noise =
        Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let blocks: Vec<Vec<f64>> = map_chunks(&specs, ROW_CHUNK, |_, chunk| {
        let mut out = Vec::with_capacity(chunk.len() * d);
        for spec in chunk {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, spec.uid));
            let y_sign = 2.0 * spec.y as f64 - 1.0;
            let b_sign = orientation * (2.0 * spec.b as f64 - 1.0);
            out.push(quantize(
                y_sign * config.target_separation / 2.0 + target_noise.sample(&mut rng),
            ));
            out.push(quantize(
                b_sign * config.bias_separation / 2.0 + other_noise.sample(&mut rng),
            ));
            for _ in 0..config.noise_dims {
                out.push(quantize(other_noise.sample(&mut rng)));
            }
        }
        out
    });

    let features = Matrix::from_row_blocks(d, blocks);
    let target = specs.iter().map(|s| s.y).collect();
    let bias = Some(specs.iter().map(|s| s.b).collect());
    let split = specs.iter().map(|s| s.split).collect();
    SampleTable::new(features, target, bias, split)
}

/// Canonical decimal form: 9 significant digits, exponent notation.
fn format_float(x: f64) -> String {
    format!("{:.8e}", x)
}

/// Rounds through the canonical decimal form so that serialized tables
/// reload bit-exactly.
fn quantize(x: f64) -> f64 {
    format_float(x).parse().expect("canonical float form reparses")
}

/// Writes the canonical CSV: header
/// `feature_0,...,feature_{d-1},target,bias,split`, floats with 9
/// significant digits. The bias column is omitted when absent.
pub fn write_dataset_csv(table: &SampleTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let d = table.num_features();
    let mut header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
    header.push("target".into());
    if table.bias.is_some() {
        header.push("bias".into());
    }
    header.push("split".into());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..table.num_rows() {
        let mut fields: Vec<String> = table.features.row(i).iter().map(|&x| format_float(x)).collect();
        fields.push(table.target[i].to_string());
        if let Some(b) = &table.bias {
            fields.push(b[i].to_string());
        }
        fields.push(table.split[i].to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Csv {
        line,
        msg: msg.into(),
    }
}

/// Reads the canonical CSV. Malformed headers, non-binary labels and ragged
/// rows are reported with their line number (the header is line 1).
pub fn read_dataset_csv(path: &Path) -> Result<SampleTable> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| csv_err(1, "empty file"))?;
    let header = header?;
    let columns: Vec<&str> = header.split(',').collect();
    let mut d = 0;
    while d < columns.len() && columns[d] == format!("feature_{d}") {
        d += 1;
    }
    if d < 2 {
        return Err(csv_err(1, "expected at least feature_0,feature_1"));
    }
    let rest: Vec<&str> = columns[d..].to_vec();
    let has_bias = match rest.as_slice() {
        ["target", "bias", "split"] => true,
        ["target", "split"] => false,
        _ => {
            return Err(csv_err(
                1,
                format!("malformed header: expected target[,bias],split after features, got {rest:?}"),
            ))
        }
    };
    let expected = d + 2 + usize::from(has_bias);

    let mut features: Vec<f64> = Vec::new();
    let mut target: Vec<usize> = Vec::new();
    let mut bias: Vec<usize> = Vec::new();
    let mut split: Vec<Split> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(csv_err(
                line_no,
                format!("ragged row: {} fields, expected {expected}", fields.len()),
            ));
        }
        for (c, raw) in fields[..d].iter().enumerate() {
            let v: f64 = raw
                .parse()
                .map_err(|_| csv_err(line_no, format!("bad float '{raw}' in feature_{c}")))?;
            features.push(v);
        }
        target.push(parse_binary(fields[d], line_no, "target")?);
        if has_bias {
            bias.push(parse_binary(fields[d + 1], line_no, "bias")?);
        }
        let split_field = fields[expected - 1];
        split.push(
            split_field
                .parse()
                .map_err(|_| csv_err(line_no, format!("unknown split '{split_field}'")))?,
        );
    }
    let rows = target.len();
    let features = Matrix::from_vec(rows, d, features)
        .map_err(|e| csv_err(rows + 1, e.to_string()))?;
    SampleTable::new(features, target, if has_bias { Some(bias) } else { None }, split)
}

fn parse_binary(raw: &str, line: usize, what: &str) -> Result<usize> {
    match raw {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(csv_err(line, format!("non-binary {what} label '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig {
            majority_group_size: 50,
            val_per_group: 10,
            test_per_group: 10,
            seed: 7,
            ..GenConfig::default()
        }
    }

    #[test]
    fn training_group_counts_follow_ratio() {
        let cfg = GenConfig {
            majority_group_size: 1000,
            bias_ratio_pct: 10.0,
            seed: 7,
            ..GenConfig::default()
        };
        let table = generate_biased_dataset(&cfg).unwrap();
        let c = table.group_counts(Split::Train).unwrap();
        assert_eq!(c[1][1], 1000);
        assert_eq!(c[1][0], 100);
        assert_eq!(c[0][1], 100);
        assert_eq!(c[0][0], 1000);
    }

    #[test]
    fn ratio_100_balances_all_groups() {
        let cfg = GenConfig {
            bias_ratio_pct: 100.0,
            ..small_config()
        };
        let table = generate_biased_dataset(&cfg).unwrap();
        let c = table.group_counts(Split::Train).unwrap();
        assert_eq!(c, [[50, 50], [50, 50]]);
    }

    #[test]
    fn val_and_test_are_group_balanced() {
        let table = generate_biased_dataset(&small_config()).unwrap();
        assert_eq!(table.group_counts(Split::Val).unwrap(), [[10, 10], [10, 10]]);
        assert_eq!(table.group_counts(Split::Test).unwrap(), [[10, 10], [10, 10]]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_biased_dataset(&small_config()).unwrap();
        let b = generate_biased_dataset(&small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conflicting_fraction_matches_ratio_per_class() {
        for r in [10.0, 25.0, 50.0] {
            let cfg = GenConfig {
                bias_ratio_pct: r,
                majority_group_size: 400,
                ..small_config()
            };
            let table = generate_biased_dataset(&cfg).unwrap();
            let tags = alignment_tags(&table).unwrap();
            let train = table.split_indices(Split::Train);
            for class in 0..2 {
                let total = train.iter().filter(|&&i| table.target[i] == class).count();
                let conflicting = train
                    .iter()
                    .filter(|&&i| {
                        table.target[i] == class && tags[i] == Alignment::Conflicting
                    })
                    .count();
                let expect = r / (100.0 + r);
                let got = conflicting as f64 / total as f64;
                // Integer rounding of the minority count bounds the error.
                assert!((got - expect).abs() < 1.0 / total as f64 + 1e-9, "r={r}");
            }
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = small_config();
        cfg.bias_ratio_pct = 0.0;
        assert!(generate_biased_dataset(&cfg).is_err());
        cfg = small_config();
        cfg.bias_ratio_pct = 100.5;
        assert!(generate_biased_dataset(&cfg).is_err());
        cfg = small_config();
        cfg.bias_separation = cfg.target_separation;
        assert!(generate_biased_dataset(&cfg).is_err());
    }

    #[test]
    fn alignment_follows_canonical_encoding() {
        let table = generate_biased_dataset(&small_config()).unwrap();
        let tags = alignment_tags(&table).unwrap();
        let bias = table.bias.as_ref().unwrap();
        for i in 0..table.num_rows() {
            let expect = if table.target[i] == bias[i] {
                Alignment::Aligned
            } else {
                Alignment::Conflicting
            };
            assert_eq!(tags[i], expect);
        }
    }

    #[test]
    fn alignment_all_aligned_when_balanced_groups_match() {
        let features = Matrix::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let table = SampleTable::new(
            features,
            vec![1, 0],
            Some(vec![1, 0]),
            vec![Split::Train, Split::Train],
        )
        .unwrap();
        let tags = alignment_tags(&table).unwrap();
        assert!(tags.iter().all(|&t| t == Alignment::Aligned));
    }

    #[test]
    fn alignment_requires_bias() {
        let features = Matrix::from_vec(1, 2, vec![0.0; 2]).unwrap();
        let table =
            SampleTable::new(features, vec![1], None, vec![Split::Train]).unwrap();
        assert!(alignment_tags(&table).is_err());
    }

    #[test]
    fn tr2_reverses_bias_channel_orientation() {
        let mk = |preset| {
            let cfg = GenConfig {
                preset,
                ..small_config()
            };
            generate_biased_dataset(&cfg).unwrap()
        };
        let tr1 = mk(Preset::GbpAnalogTr1);
        let tr2 = mk(Preset::GbpAnalogTr2);
        // Same label layout, mirrored bias channel.
        assert_eq!(tr1.target, tr2.target);
        assert_eq!(tr1.bias, tr2.bias);
        let bias = tr1.bias.as_ref().unwrap();
        let mean_of = |t: &SampleTable, b: usize| {
            let rows: Vec<usize> = (0..t.num_rows()).filter(|&i| bias[i] == b).collect();
            rows.iter().map(|&i| t.features.get(i, 1)).sum::<f64>() / rows.len() as f64
        };
        assert!(mean_of(&tr1, 1) > 1.0);
        assert!(mean_of(&tr2, 1) < -1.0);
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let table = generate_biased_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&table, &path).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(table, back);
        // And the bytes are stable under rewrite.
        let first = std::fs::read(&path).unwrap();
        write_dataset_csv(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn csv_reports_bad_label_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "feature_0,feature_1,target,bias,split\n1.0,2.0,1,1,train\n1.0,2.0,2,0,train\n",
        )
        .unwrap();
        match read_dataset_csv(&path) {
            Err(Error::Csv { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("non-binary"), "{msg}");
            }
            other => panic!("expected csv error, got {other:?}"),
        }
    }

    #[test]
    fn csv_reports_ragged_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(
            &path,
            "feature_0,feature_1,target,split\n1.0,2.0,1,train\n1.0,1,train\n",
        )
        .unwrap();
        match read_dataset_csv(&path) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected csv error, got {other:?}"),
        }
    }

    #[test]
    fn csv_without_bias_column_loads_as_biasless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nobias.csv");
        std::fs::write(
            &path,
            "feature_0,feature_1,target,split\n1.0e0,2.0e0,1,train\n-1.0e0,0.5e0,0,val\n",
        )
        .unwrap();
        let table = read_dataset_csv(&path).unwrap();
        assert!(table.bias.is_none());
        assert_eq!(table.num_rows(), 2);
        assert_eq!(table.split, vec![Split::Train, Split::Val]);
    }

    #[test]
    fn csv_rejects_malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.csv");
        std::fs::write(&path, "feature_0,feature_1,result,split\n").unwrap();
        match read_dataset_csv(&path) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected csv error, got {other:?}"),
        }
    }

    #[test]
    fn bias_channel_is_the_easier_feature() {
        // Closed-form Bayes accuracy of single-channel thresholding on the
        // training distribution: the bias channel must win whenever
        // bias_separation > target_separation and the data are >= 90%
        // aligned.
        use statrs::distribution::{ContinuousCDF, Normal as GaussMdl};
        let std_normal = GaussMdl::new(0.0, 1.0).unwrap();
        for r in [1.0, 5.0, 10.0] {
            let cfg = GenConfig {
                bias_ratio_pct: r,
                ..GenConfig::default()
            };
            cfg.validate().unwrap();
            let aligned_fraction = 100.0 / (100.0 + r);
            let acc_target = std_normal.cdf(cfg.target_separation / 2.0);
            let acc_bias_channel = std_normal.cdf(cfg.bias_separation / (2.0 * cfg.noise_sigma));
            let acc_bias = aligned_fraction * acc_bias_channel
                + (1.0 - aligned_fraction) * (1.0 - acc_bias_channel);
            assert!(
                acc_bias > acc_target,
                "r={r}: bias-channel accuracy {acc_bias} <= target-channel accuracy {acc_target}"
            );
        }
    }
}
