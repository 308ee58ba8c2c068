//! JSON-lines persistence for posterior draws.
//!
//! Line 1 is a header object describing the parameters; every following
//! line is one draw: `{"chain":..,"draw":..,"divergent":..,"params":[..]}`
//! with `params` laid out as `[mu | sigma | z]` (sigma on its natural scale).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PosteriorDraws, Standardization};
use crate::domain::AttributeScheme;
use crate::error::{Error, Result};
use crate::output::write_atomic_with;

const FORMAT: &str = "conjoint-wtp/posterior";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    columns: Vec<String>,
    price_column: usize,
    hierarchical: bool,
    respondent_ids: Vec<u32>,
    parameter_names: Vec<String>,
    n_draws: usize,
    seed: u64,
    standardization: Option<Standardization>,
    scheme: Option<AttributeScheme>,
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrawLine {
    chain: u32,
    draw: u32,
    divergent: bool,
    params: Vec<f64>,
}

impl PosteriorDraws {
    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            columns: self.columns.clone(),
            price_column: self.price_column,
            hierarchical: self.hierarchical,
            respondent_ids: self.respondent_ids.clone(),
            parameter_names: self.parameter_names(),
            n_draws: self.n_draws,
            seed: self.config.seed,
            standardization: self.standardization.clone(),
            scheme: self.scheme.clone(),
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for k in 0..self.n_draws {
            let line = DrawLine {
                chain: self.chain[k],
                draw: self.draw_index[k],
                divergent: self.divergent[k],
                params: self.flat(k),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::data("posterior file is empty"))??;
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| Error::data(format!("posterior header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::data(format!(
                "unsupported posterior format {} v{}",
                header.format, header.version
            )));
        }
        let d = header.columns.len();
        let n = header.respondent_ids.len();
        if header.price_column >= d {
            return Err(Error::data("posterior header: price_column out of range"));
        }
        if let Some(s) = &header.standardization {
            s.validate()?;
            if s.columns != header.columns {
                return Err(Error::data("posterior header: standardization columns differ"));
            }
        }
        let dim = if header.hierarchical { 2 * d + n * d } else { d };
        let mut draws = PosteriorDraws {
            columns: header.columns,
            price_column: header.price_column,
            hierarchical: header.hierarchical,
            respondent_ids: header.respondent_ids,
            n_draws: 0,
            mu: Vec::with_capacity(header.n_draws * d),
            sigma: Vec::new(),
            z: Vec::new(),
            chain: Vec::with_capacity(header.n_draws),
            draw_index: Vec::with_capacity(header.n_draws),
            divergent: Vec::with_capacity(header.n_draws),
            standardization: header.standardization,
            scheme: header.scheme,
            config: ModelConfig { seed: header.seed, ..header.config },
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let at = lineno + 2;
            let draw: DrawLine = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("posterior line {at}: {e}")))?;
            if draw.params.len() != dim {
                return Err(Error::data(format!(
                    "posterior line {at}: {} parameters, header implies {dim}",
                    draw.params.len()
                )));
            }
            draws.mu.extend_from_slice(&draw.params[..d]);
            if draws.hierarchical {
                let sigma = &draw.params[d..2 * d];
                if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
                    return Err(Error::data(format!("posterior line {at}: sigma {s} is not positive")));
                }
                draws.sigma.extend_from_slice(sigma);
                draws.z.extend_from_slice(&draw.params[2 * d..]);
            }
            draws.chain.push(draw.chain);
            draws.draw_index.push(draw.draw);
            draws.divergent.push(draw.divergent);
            draws.n_draws += 1;
        }
        if draws.n_draws != header.n_draws {
            return Err(Error::data(format!(
                "posterior file has {} draws, header says {}",
                draws.n_draws, header.n_draws
            )));
        }
        Ok(draws)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |w| self.write_jsonl(w))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(hierarchical: bool) -> PosteriorDraws {
        let columns = vec!["a".to_string(), "price".to_string()];
        let n_draws = 3;
        let n = 2;
        PosteriorDraws {
            columns: columns.clone(),
            price_column: 1,
            hierarchical,
            respondent_ids: vec![7, 9],
            n_draws,
            mu: (0..n_draws * 2).map(|v| v as f64 * 0.1 - 0.25).collect(),
            sigma: if hierarchical { (0..n_draws * 2).map(|v| 0.5 + v as f64).collect() } else { vec![] },
            z: if hierarchical { (0..n_draws * n * 2).map(|v| (v as f64).sin()).collect() } else { vec![] },
            chain: vec![0, 0, 1],
            draw_index: vec![0, 1, 0],
            divergent: vec![false, true, false],
            standardization: Some(Standardization {
                columns,
                mean: vec![0.0, 1.5],
                scale: vec![0.7, 120.0],
            }),
            scheme: None,
            config: ModelConfig { seed: 42, ..ModelConfig::default() },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for h in [true, false] {
            let draws = tiny(h);
            let mut buf = Vec::new();
            draws.write_jsonl(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert_eq!(text.lines().count(), 4);
            let back = PosteriorDraws::read_jsonl(&buf[..]).unwrap();
            assert_eq!(back, draws);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        tiny(true).write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: Vec<&str> = text.lines().take(3).collect();
        let err = PosteriorDraws::read_jsonl(cut.join("\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("header says"), "{err}");
    }
}
