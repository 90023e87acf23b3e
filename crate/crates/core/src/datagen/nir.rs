//! Near-infrared spectroscopy tables (spectrum columns plus a few chemical
//! scalars) loaded into bimodal samples.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ModalSample, Standardizer};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub const SPECTRUM: &str = "spectrum";
pub const SCALARS: &str = "scalars";

fn default_test_fraction() -> f64 {
    0.25
}

/// Column roles. Exactly one of `spectrum_columns`, `spectrum_prefix` or
/// `spectrum_range` selects the wavelength columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NirSchema {
    #[serde(default)]
    pub spectrum_columns: Option<Vec<String>>,
    /// Every header starting with this prefix, in file order.
    #[serde(default)]
    pub spectrum_prefix: Option<String>,
    /// First and last header names of a contiguous block, inclusive.
    #[serde(default)]
    pub spectrum_range: Option<[String; 2]>,
    pub scalar_columns: Vec<String>,
    pub target_column: String,
    #[serde(default)]
    pub expected_rows: Option<usize>,
    #[serde(default)]
    pub expected_wavelengths: Option<usize>,
    /// Feed the spectrum as a flat vector instead of a `T×1` sequence.
    #[serde(default)]
    pub spectrum_as_vector: bool,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl Default for NirSchema {
    fn default() -> Self {
        NirSchema {
            spectrum_columns: None,
            spectrum_prefix: None,
            spectrum_range: None,
            scalar_columns: Vec::new(),
            target_column: String::new(),
            expected_rows: None,
            expected_wavelengths: None,
            spectrum_as_vector: false,
            test_fraction: default_test_fraction(),
        }
    }
}

impl NirSchema {
    fn spectrum_indices(&self, headers: &[String]) -> Result<Vec<usize>> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("missing column '{name}'")))
        };
        let chosen = [
            self.spectrum_columns.is_some(),
            self.spectrum_prefix.is_some(),
            self.spectrum_range.is_some(),
        ];
        if chosen.iter().filter(|c| **c).count() != 1 {
            return Err(Error::Config(
                "set exactly one of spectrum_columns, spectrum_prefix, spectrum_range".into(),
            ));
        }
        let idx = if let Some(cols) = &self.spectrum_columns {
            cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?
        } else if let Some(prefix) = &self.spectrum_prefix {
            let excluded: Vec<&str> = self
                .scalar_columns
                .iter()
                .map(String::as_str)
                .chain([self.target_column.as_str()])
                .collect();
            headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix.as_str()) && !excluded.contains(&h.as_str()))
                .map(|(i, _)| i)
                .collect()
        } else {
            let [a, b] = self.spectrum_range.as_ref().expect("checked");
            let (a, b) = (find(a)?, find(b)?);
            if b < a {
                return Err(Error::Config("spectrum_range ends before it starts".into()));
            }
            (a..=b).collect()
        };
        if idx.is_empty() {
            return Err(Error::Config("no spectrum columns selected".into()));
        }
        Ok(idx)
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        detail: format!("not a number: {raw:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            detail: "non-finite value".into(),
        });
    }
    Ok(v)
}

/// Raw numeric table restricted to the schema's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct NirTable {
    pub spectra: Vec<Vec<f64>>,
    pub scalars: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Parses the CSV and validates declared row and wavelength counts.
/// Row numbers in errors count data rows from 1.
pub fn read_table(path: &Path, schema: &NirSchema) -> Result<NirTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let spec_idx = schema.spectrum_indices(&headers)?;
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column '{name}'")))
    };
    let scalar_idx = schema
        .scalar_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let target_idx = find(&schema.target_column)?;
    if let Some(n) = schema.expected_wavelengths {
        if spec_idx.len() != n {
            return Err(Error::Validation(format!(
                "expected {n} wavelength columns, found {}",
                spec_idx.len()
            )));
        }
    }
    let mut table = NirTable {
        spectra: Vec::new(),
        scalars: Vec::new(),
        targets: Vec::new(),
    };
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let cell = |i: usize| parse_cell(rec.get(i).unwrap_or(""), row, &headers[i]);
        table
            .spectra
            .push(spec_idx.iter().map(|&i| cell(i)).collect::<Result<_>>()?);
        table
            .scalars
            .push(scalar_idx.iter().map(|&i| cell(i)).collect::<Result<_>>()?);
        table.targets.push(cell(target_idx)?);
    }
    if let Some(n) = schema.expected_rows {
        if table.targets.len() != n {
            return Err(Error::Validation(format!(
                "expected {n} rows, found {}",
                table.targets.len()
            )));
        }
    }
    Ok(table)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: malformed csv: {other:?}", path.display())),
    }
}

fn column_scalers(rows: &[&Vec<f64>], width: usize) -> Result<Vec<Standardizer>> {
    (0..width)
        .map(|j| Standardizer::fit(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect()
}

/// Loads a bimodal dataset: the spectrum modality (`T×1`, or `T` when
/// `spectrum_as_vector`) and the scalar modality. A seeded shuffle chooses
/// the test rows; features and targets are z-scored on the training rows.
pub fn load_nir_csv(path: &Path, schema: &NirSchema, seed: u64) -> Result<Dataset> {
    if !(schema.test_fraction > 0.0 && schema.test_fraction < 1.0) {
        return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
    }
    let table = read_table(path, schema)?;
    let n = table.targets.len();
    let n_test = ((n as f64) * schema.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Validation(format!("{n} rows are too few to split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::PARTITION, 100]));
    let (test_idx, train_idx) = order.split_at(n_test);

    let train_spec: Vec<&Vec<f64>> = train_idx.iter().map(|&i| &table.spectra[i]).collect();
    let train_scal: Vec<&Vec<f64>> = train_idx.iter().map(|&i| &table.scalars[i]).collect();
    let t = table.spectra[0].len();
    let spec_sc = column_scalers(&train_spec, t)?;
    let scal_sc = column_scalers(&train_scal, table.scalars[0].len())?;
    let spec_shape = if schema.spectrum_as_vector { vec![t] } else { vec![t, 1] };

    let build = |i: usize| -> ModalSample {
        let spec = table.spectra[i]
            .iter()
            .zip(&spec_sc)
            .map(|(v, s)| s.apply(*v))
            .collect();
        let scal = table.scalars[i]
            .iter()
            .zip(&scal_sc)
            .map(|(v, s)| s.apply(*v))
            .collect();
        ModalSample::new(
            vec![
                (SPECTRUM.into(), Tensor::new(spec_shape.clone(), spec).expect("width")),
                (SCALARS.into(), Tensor::vector(scal)),
            ],
            table.targets[i],
        )
    };
    Dataset {
        train: train_idx.iter().map(|&i| build(i)).collect(),
        test: test_idx.iter().map(|&i| build(i)).collect(),
        target_scale: Standardizer::identity(),
    }
    .standardize_targets()
}

/// Shapes of the two public NIR benchmarks, used to write stand-in files
/// when the real CSVs are not available.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandinLayout {
    Tecator,
    Corn,
}

impl StandinLayout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tecator" => Ok(StandinLayout::Tecator),
            "corn" => Ok(StandinLayout::Corn),
            other => Err(Error::Config(format!("unknown layout '{other}' (tecator, corn)"))),
        }
    }

    pub fn rows(self) -> usize {
        match self {
            StandinLayout::Tecator => 240,
            StandinLayout::Corn => 80,
        }
    }

    pub fn wavelengths(self) -> usize {
        match self {
            StandinLayout::Tecator => 101,
            StandinLayout::Corn => 700,
        }
    }

    pub fn components(self) -> &'static [&'static str] {
        match self {
            StandinLayout::Tecator => &["moisture", "fat", "protein"],
            StandinLayout::Corn => &["moisture", "oil", "protein", "starch"],
        }
    }

    /// Wavelength column names, `wl_<nm>`.
    pub fn wavelength_names(self) -> Vec<String> {
        let (lo, step) = match self {
            StandinLayout::Tecator => (850.0, 2.0),
            StandinLayout::Corn => (1100.0, 2.0),
        };
        (0..self.wavelengths())
            .map(|i| format!("wl_{}", lo + step * i as f64))
            .collect()
    }
}

/// Synthetic spectra with absorption bands whose depth tracks each component.
/// Not real measurements; for exercising the pipeline only.
pub fn standin_csv(layout: StandinLayout, seed: u64) -> String {
    use rand_distr::{Distribution, Normal, Uniform};
    let mut r = rng::stream(seed, &[tag::DATA, 0x4E49_52, layout as u64]);
    let t = layout.wavelengths();
    let comps = layout.components();
    let n01 = Normal::new(0.0, 1.0).expect("valid normal");
    let centers: Vec<f64> = (0..comps.len()).map(|j| (j as f64 + 0.7) / (comps.len() as f64 + 0.4)).collect();
    let mut out = String::new();
    out.push_str("sample,");
    out.push_str(&layout.wavelength_names().join(","));
    out.push(',');
    out.push_str(&comps.join(","));
    out.push('\n');
    for row in 0..layout.rows() {
        let values: Vec<f64> = match layout {
            StandinLayout::Tecator => {
                let fat = Uniform::new(1.0, 50.0).expect("valid range").sample(&mut r);
                let moisture = 75.0 - 0.6 * fat + 2.0 * n01.sample(&mut r);
                let protein = 20.0 - 0.1 * fat + 1.5 * n01.sample(&mut r);
                vec![moisture, fat, protein]
            }
            StandinLayout::Corn => {
                let mean = [10.2, 3.5, 8.7, 64.7];
                let sd = [0.4, 0.2, 0.5, 0.8];
                (0..4).map(|j| mean[j] + sd[j] * n01.sample(&mut r)).collect()
            }
        };
        let (mean, scale): (Vec<f64>, Vec<f64>) = match layout {
            StandinLayout::Tecator => (vec![60.0, 25.0, 17.5], vec![10.0, 14.0, 2.0]),
            StandinLayout::Corn => (vec![10.2, 3.5, 8.7, 64.7], vec![0.4, 0.2, 0.5, 0.8]),
        };
        let offset = 0.05 * n01.sample(&mut r);
        let slope = 0.02 * n01.sample(&mut r);
        let mut line = format!("{}", row + 1);
        for i in 0..t {
            let x = i as f64 / (t - 1) as f64;
            let mut a = 2.5 + 0.5 * (std::f64::consts::TAU * x).sin() + offset + slope * x;
            for (j, c) in centers.iter().enumerate() {
                let band = (-((x - c) / 0.05).powi(2)).exp();
                a += 0.1 * (values[j] - mean[j]) / scale[j] * band;
            }
            a += 0.005 * n01.sample(&mut r);
            line.push_str(&format!(",{a:.6}"));
        }
        for v in &values {
            line.push_str(&format!(",{v:.4}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_standin(layout: StandinLayout, path: &Path, seed: u64) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, standin_csv(layout, seed)).map_err(|e| Error::io(path, e))
}
