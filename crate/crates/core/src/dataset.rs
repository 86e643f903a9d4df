//! Snapshot-pair datasets: generation, train/test split, and the CSV file format.
//!
//! File layout:
//!
//! ```text
//! {"system":"spring","h":0.1,"K":2000,"seed":0,"tolerance":1e-10,"n":1}
//! split_flag,p0_1,q0_1,p1_1,q1_1
//! 0,0.123...,...
//! ```
//!
//! `split_flag` is 0 for train and 1 for test. Floats are written in their
//! shortest round-trip decimal form, so loading reproduces them bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ShnnError;
use crate::integrators::{rk45_final, DATA_TOL};
use crate::mlp::PhaseState;
use crate::systems::{HamiltonianSystem, SystemKind};

/// `(y₀, y₁ = φ_h(y₀))`, stored flat in `(p, q)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPair {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl DataPair {
    pub fn start(&self) -> PhaseState {
        PhaseState::from_flat(&self.y0).expect("stored pair has phase-space layout")
    }

    pub fn end(&self) -> PhaseState {
        PhaseState::from_flat(&self.y1).expect("stored pair has phase-space layout")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub system: SystemKind,
    pub h: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemKind,
    pub h: f64,
    pub seed: u64,
    pub tolerance: f64,
    pub pairs: Vec<DataPair>,
    /// `true` marks a test pair.
    pub is_test: Vec<bool>,
}

/// Number of test pairs for `k` pairs: `round(0.2 k)`, at least one.
pub fn test_count(k: usize) -> usize {
    ((0.2 * k as f64).round() as usize).max(1)
}

fn sample_pair(
    system: &HamiltonianSystem,
    h: f64,
    seed: u64,
    index: usize,
    max_attempts: usize,
) -> (Option<DataPair>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let field = |y: &[f64]| system.vector_field(y);
    let mut failures = 0;
    while failures < max_attempts {
        let y0 = system.domain.sample(&mut rng);
        match rk45_final(&field, &y0, h, DATA_TOL, DATA_TOL) {
            Ok(y1) => return (Some(DataPair { y0, y1 }), failures),
            Err(e) => {
                log::warn!("sample {index}: integration failed ({e}); resampling");
                failures += 1;
            }
        }
    }
    (None, failures)
}

impl Dataset {
    /// `k` pairs with `y₀ ~ U(Ω_d)` and `y₁` integrated to time `h`.
    ///
    /// Sample `i` draws from its own random stream, so the result does not
    /// depend on how the work is scheduled.
    pub fn generate(
        system: &HamiltonianSystem,
        h: f64,
        k: usize,
        seed: u64,
    ) -> Result<Self, ShnnError> {
        if k < 5 {
            return Err(ShnnError::InvalidArgument(format!(
                "a dataset needs at least 5 pairs, got {k}"
            )));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(ShnnError::InvalidArgument(format!(
                "time step must be positive, got {h}"
            )));
        }
        let max_failures = k / 100;
        let attempts = max_failures + 1;

        #[cfg(feature = "parallel")]
        let results: Vec<(Option<DataPair>, usize)> = {
            use rayon::prelude::*;
            (0..k)
                .into_par_iter()
                .map(|i| sample_pair(system, h, seed, i, attempts))
                .collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<(Option<DataPair>, usize)> = (0..k)
            .map(|i| sample_pair(system, h, seed, i, attempts))
            .collect();

        let failures: usize = results.iter().map(|r| r.1).sum();
        if failures > max_failures {
            return Err(ShnnError::Integration(format!(
                "{failures} of {k} samples failed to integrate (limit {max_failures})"
            )));
        }
        let pairs: Vec<DataPair> = results
            .into_iter()
            .map(|(p, _)| p.expect("sample within failure budget"))
            .collect();

        let mut order: Vec<usize> = (0..k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        order.shuffle(&mut rng);
        let mut is_test = vec![false; k];
        for &i in &order[..test_count(k)] {
            is_test[i] = true;
        }

        Ok(Self {
            system: system.kind,
            h,
            seed,
            tolerance: DATA_TOL,
            pairs,
            is_test,
        })
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    /// Degrees of freedom.
    pub fn n(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.y0.len() / 2)
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            system: self.system,
            h: self.h,
            k: self.k(),
            seed: self.seed,
            tolerance: self.tolerance,
            n: self.n(),
        }
    }

    pub fn train_pairs(&self) -> Vec<DataPair> {
        self.split(false)
    }

    pub fn test_pairs(&self) -> Vec<DataPair> {
        self.split(true)
    }

    fn split(&self, test: bool) -> Vec<DataPair> {
        self.pairs
            .iter()
            .zip(&self.is_test)
            .filter(|(_, t)| **t == test)
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Fails with a conflict error if `h` disagrees with the stored time step.
    pub fn check_h(&self, h: f64) -> Result<(), ShnnError> {
        if h != self.h {
            return Err(ShnnError::Conflict(format!(
                "dataset was generated with h = {}, but h = {h} was requested",
                self.h
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), ShnnError> {
        serde_json::to_writer(&mut out, &self.header())?;
        out.write_all(b"\n")?;
        let n = self.n();
        let mut w = csv::Writer::from_writer(out);
        let mut cols = vec!["split_flag".to_string()];
        for pre in ["p0", "q0", "p1", "q1"] {
            cols.extend((1..=n).map(|i| format!("{pre}_{i}")));
        }
        w.write_record(&cols)?;
        for (pair, test) in self.pairs.iter().zip(&self.is_test) {
            let mut row = vec![if *test { "1" } else { "0" }.to_string()];
            row.extend(pair.y0.iter().chain(&pair.y1).map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ShnnError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        self.write(std::io::BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ShnnError> {
        let path = path.as_ref();
        let file = fs::File::open(path)?;
        Self::read(file, &path.display().to_string())
    }

    /// Parses the file format; `name` appears in error messages.
    pub fn read<R: Read>(input: R, name: &str) -> Result<Self, ShnnError> {
        let err = |line: usize, message: String| ShnnError::Load {
            path: name.to_string(),
            line,
            message,
        };
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        if first.trim().is_empty() {
            return Err(err(1, "empty file: missing JSON header line".into()));
        }
        let header: DatasetHeader = serde_json::from_str(first.trim())
            .map_err(|e| err(1, format!("malformed header: {e}")))?;
        if header.n == 0 {
            return Err(err(1, "header declares zero degrees of freedom".into()));
        }
        let width = 1 + 4 * header.n;

        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let cols = csv.headers().map_err(|e| err(2, e.to_string()))?.len();
        if cols != width {
            return Err(err(
                2,
                format!("expected {width} columns for n = {}, found {cols}", header.n),
            ));
        }
        let d = 2 * header.n;
        let mut pairs = Vec::with_capacity(header.k);
        let mut is_test = Vec::with_capacity(header.k);
        for (i, rec) in csv.records().enumerate() {
            let line = i + 3;
            let rec = rec.map_err(|e| err(line, e.to_string()))?;
            if rec.len() != width {
                return Err(err(
                    line,
                    format!("expected {width} columns, found {}", rec.len()),
                ));
            }
            let test = match &rec[0] {
                "0" => false,
                "1" => true,
                other => return Err(err(line, format!("bad split flag `{other}`"))),
            };
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| err(line, format!("bad number `{s}`: {e}")))
                        .and_then(|v| {
                            if v.is_finite() {
                                Ok(v)
                            } else {
                                Err(err(line, format!("non-finite value `{s}`")))
                            }
                        })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            pairs.push(DataPair {
                y0: vals[..d].to_vec(),
                y1: vals[d..].to_vec(),
            });
            is_test.push(test);
        }
        if pairs.len() != header.k {
            return Err(err(
                pairs.len() + 2,
                format!("header declares K = {} but {} rows follow", header.k, pairs.len()),
            ));
        }
        Ok(Self {
            system: header.system,
            h: header.h,
            seed: header.seed,
            tolerance: header.tolerance,
            pairs,
            is_test,
        })
    }
}
