//! Text model format for [`BodySchemaNet`].
//!
//! ```text
//! bodyschema version=1 n_joints=1 n_muscles=3 latent=16
//! meta seed=7
//! normalizer
//! theta_mean <N values>
//! theta_std <N values>
//! tension_mean ... tension_std ... length_mean ... length_std ...
//! encoder
//! densenet ...
//! decoder
//! densenet ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{BodySchemaNet, ChannelStats, Normalizer};
use crate::error::{Error, Result};
use crate::netcore::{field, parse_header_fields, parse_numbers, DenseNet};

pub const FORMAT_VERSION: u32 = 1;

const STAT_KEYS: [&str; 6] = [
    "theta_mean",
    "theta_std",
    "tension_mean",
    "tension_std",
    "length_mean",
    "length_std",
];

fn expect_section<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, name: &str, last: usize) -> Result<()> {
    match lines.next() {
        Some((_, l)) if l.trim() == name => Ok(()),
        Some((ln, _)) => Err(Error::parse(ln, format!("expected `{name}` section"))),
        None => Err(Error::parse(last, format!("missing `{name}` section"))),
    }
}

impl BodySchemaNet {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "bodyschema version={} n_joints={} n_muscles={} latent={}",
            FORMAT_VERSION,
            self.n_joints,
            self.n_muscles,
            self.latent_width()
        );
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "meta {k}={v}");
        }
        out.push_str("normalizer\n");
        let n = &self.normalizer;
        let blocks = [
            &n.theta.mean,
            &n.theta.std,
            &n.tension.mean,
            &n.tension.std,
            &n.length.mean,
            &n.length.std,
        ];
        for (key, values) in STAT_KEYS.iter().zip(blocks) {
            out.push_str(key);
            for v in values {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
        }
        out.push_str("encoder\n");
        out.push_str(&self.encoder.to_text());
        out.push_str("decoder\n");
        out.push_str(&self.decoder.to_text());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty model file"))?;
        let fields = parse_header_fields(header, "bodyschema").map_err(|m| Error::parse(ln, m))?;
        let num = |key: &str| -> Result<usize> {
            field(&fields, key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(ln, format!("bad or missing `{key}`")))
        };
        let version = num("version")?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::parse(ln, format!("unsupported bodyschema version {version}")));
        }
        let (n_joints, n_muscles, latent) = (num("n_joints")?, num("n_muscles")?, num("latent")?);

        let mut metadata = std::collections::BTreeMap::new();
        let mut line = lines.next();
        while let Some((ln, l)) = line {
            let Some(rest) = l.trim().strip_prefix("meta ") else { break };
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(ln, "malformed meta line"))?;
            metadata.insert(k.to_string(), v.to_string());
            line = lines.next();
        }
        match line {
            Some((_, l)) if l.trim() == "normalizer" => {}
            Some((ln, _)) => return Err(Error::parse(ln, "expected `normalizer` section")),
            None => return Err(Error::parse(ln, "missing normalizer section")),
        }
        let mut stats: Vec<Vec<f64>> = Vec::with_capacity(6);
        for key in STAT_KEYS {
            let (ln, l) = lines.next().ok_or_else(|| Error::parse(ln, format!("missing `{key}`")))?;
            let rest = l
                .trim()
                .strip_prefix(key)
                .ok_or_else(|| Error::parse(ln, format!("expected `{key}`")))?;
            let vals = parse_numbers(rest).map_err(|m| Error::parse(ln, m))?;
            let expected = if key.starts_with("theta") { n_joints } else { n_muscles };
            if vals.len() != expected {
                return Err(Error::parse(ln, format!("`{key}` has {} values, expected {expected}", vals.len())));
            }
            stats.push(vals);
        }
        let mut it = stats.into_iter();
        let mut take = || it.next().expect("six blocks");
        let normalizer = Normalizer {
            theta: ChannelStats { mean: take(), std: take() },
            tension: ChannelStats { mean: take(), std: take() },
            length: ChannelStats { mean: take(), std: take() },
        };
        expect_section(&mut lines, "encoder", ln)?;
        let encoder = DenseNet::parse_lines(&mut lines, ln)?;
        expect_section(&mut lines, "decoder", ln)?;
        let decoder = DenseNet::parse_lines(&mut lines, ln)?;
        let mut net = BodySchemaNet::from_parts(n_joints, n_muscles, encoder, decoder, normalizer)?;
        if net.latent_width() != latent {
            return Err(Error::parse(ln, format!("latent={latent} disagrees with encoder width {}", net.latent_width())));
        }
        net.metadata = metadata;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
