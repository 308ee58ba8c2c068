//! Attribute coding, linear utility, binary logit choice probability and the
//! willingness-to-pay ratio.
//!
//! Profiles are dummy coded against each attribute's baseline level, so every
//! non-price coefficient is directly the part-worth of upgrading from the
//! baseline. Price enters in raw dollars.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance for treating a price coefficient as non-negative.
pub const DEFAULT_SIGN_EPS: f64 = 1e-8;

/// Smallest probability the logit ever returns (and `1 - P_FLOOR` the largest).
///
/// `1 - 2^-53` is the largest double below one.
pub const P_FLOOR: f64 = f64::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    pub levels: Vec<String>,
    pub baseline_level: String,
}

/// One column of the coded feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub attribute: String,
    /// `None` for the continuous price column.
    pub level: Option<String>,
}

impl Column {
    /// Stable identifier, `attribute:level` for dummies and the bare
    /// attribute name for price.
    pub fn name(&self) -> String {
        match &self.level {
            Some(level) => format!("{}:{}", self.attribute, level),
            None => self.attribute.clone(),
        }
    }

    pub fn is_price(&self) -> bool {
        self.level.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeSpec {
    attributes: Vec<Attribute>,
    price_attribute_name: String,
}

/// Catalog of product attributes and their levels.
///
/// Exactly one attribute is the price attribute; its declared levels are the
/// salient dollar price points. Everything else is categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeSpec", into = "SchemeSpec")]
pub struct AttributeScheme {
    attributes: Vec<Attribute>,
    price_attribute_name: String,
    columns: Vec<Column>,
    price_column: usize,
}

impl TryFrom<SchemeSpec> for AttributeScheme {
    type Error = Error;

    fn try_from(spec: SchemeSpec) -> Result<Self> {
        AttributeScheme::new(spec.attributes, spec.price_attribute_name)
    }
}

impl From<AttributeScheme> for SchemeSpec {
    fn from(scheme: AttributeScheme) -> Self {
        SchemeSpec {
            attributes: scheme.attributes,
            price_attribute_name: scheme.price_attribute_name,
        }
    }
}

impl AttributeScheme {
    pub fn new(attributes: Vec<Attribute>, price_attribute_name: impl Into<String>) -> Result<Self> {
        let price_attribute_name = price_attribute_name.into();
        let mut seen = std::collections::BTreeSet::new();
        let mut columns = Vec::new();
        let mut price_column = None;
        for attr in &attributes {
            if attr.name.is_empty() || attr.name.contains(':') || attr.name.contains(',') {
                return Err(Error::Coding(format!(
                    "attribute name `{}` must be non-empty and free of ':' and ','",
                    attr.name
                )));
            }
            if !seen.insert(attr.name.as_str()) {
                return Err(Error::Coding(format!("duplicate attribute `{}`", attr.name)));
            }
            let distinct: std::collections::BTreeSet<_> = attr.levels.iter().collect();
            if distinct.len() != attr.levels.len() {
                return Err(Error::Coding(format!("attribute `{}` repeats a level", attr.name)));
            }
            if attr.levels.len() < 2 {
                return Err(Error::Coding(format!(
                    "attribute `{}` needs at least two levels",
                    attr.name
                )));
            }
            if !attr.levels.contains(&attr.baseline_level) {
                return Err(Error::Coding(format!(
                    "baseline `{}` is not a level of `{}`",
                    attr.baseline_level, attr.name
                )));
            }
            if attr.name == price_attribute_name {
                for level in &attr.levels {
                    match level.parse::<f64>() {
                        Ok(p) if p.is_finite() && p > 0.0 => {}
                        _ => {
                            return Err(Error::Coding(format!(
                                "price level `{level}` is not a positive dollar amount"
                            )))
                        }
                    }
                }
                price_column = Some(columns.len());
                columns.push(Column { attribute: attr.name.clone(), level: None });
            } else {
                for level in attr.levels.iter().filter(|l| **l != attr.baseline_level) {
                    if level.contains(',') {
                        return Err(Error::Coding(format!("level `{level}` contains ','")));
                    }
                    columns.push(Column {
                        attribute: attr.name.clone(),
                        level: Some(level.clone()),
                    });
                }
            }
        }
        let price_column = price_column.ok_or_else(|| {
            Error::Coding(format!("price attribute `{price_attribute_name}` is not declared"))
        })?;
        Ok(Self { attributes, price_attribute_name, columns, price_column })
    }

    /// Storage 128/256/512GB, Standard/Pro camera, Aluminum/Titanium frame
    /// and a $799..$1,199 price attribute.
    pub fn smartphone() -> Self {
        let attr = |name: &str, levels: &[&str]| Attribute {
            name: name.to_string(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
            baseline_level: levels[0].to_string(),
        };
        Self::new(
            vec![
                attr("storage", &["128GB", "256GB", "512GB"]),
                attr("camera", &["Standard", "Pro"]),
                attr("frame", &["Aluminum", "Titanium"]),
                attr("price", &["799", "899", "999", "1099", "1199"]),
            ],
            "price",
        )
        .expect("built-in scheme is valid")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn price_attribute_name(&self) -> &str {
        &self.price_attribute_name
    }

    /// Attributes other than price, in declaration order.
    pub fn categorical(&self) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter().filter(move |a| a.name != self.price_attribute_name)
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(Column::name).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name() == name)
    }

    pub fn price_column(&self) -> usize {
        self.price_column
    }

    /// Indices of the dummy (non-price) columns.
    pub fn feature_columns(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.columns.len()).filter(move |&i| i != self.price_column)
    }

    /// Declared price points of the price attribute, in dollars.
    pub fn price_levels(&self) -> Vec<f64> {
        self.attribute(&self.price_attribute_name)
            .map(|a| a.levels.iter().map(|l| l.parse().unwrap_or(f64::NAN)).collect())
            .unwrap_or_default()
    }

    /// Number of distinct categorical level combinations.
    pub fn n_level_combinations(&self) -> usize {
        self.categorical().map(|a| a.levels.len()).product()
    }

    /// The all-baseline profile at the given price.
    pub fn baseline_profile(&self, price: f64) -> ProductProfile {
        ProductProfile {
            levels: self
                .categorical()
                .map(|a| (a.name.clone(), a.baseline_level.clone()))
                .collect(),
            price,
        }
    }

    pub fn validate_profile(&self, profile: &ProductProfile) -> Result<()> {
        if !(profile.price.is_finite() && profile.price > 0.0) {
            return Err(Error::Coding(format!("price {} is not a positive amount", profile.price)));
        }
        for name in profile.levels.keys() {
            if name == &self.price_attribute_name || self.attribute(name).is_none() {
                return Err(Error::Coding(format!("unknown attribute `{name}`")));
            }
        }
        for attr in self.categorical() {
            let level = profile
                .levels
                .get(&attr.name)
                .ok_or_else(|| Error::Coding(format!("profile has no level for `{}`", attr.name)))?;
            if !attr.levels.contains(level) {
                return Err(Error::Coding(format!(
                    "unknown level `{level}` for attribute `{}`",
                    attr.name
                )));
            }
        }
        Ok(())
    }

    /// Dummy-code a profile. Baseline levels code as all zeros; price is
    /// copied in dollars.
    pub fn encode(&self, profile: &ProductProfile) -> Result<FeatureVector> {
        self.validate_profile(profile)?;
        let values = self
            .columns
            .iter()
            .map(|col| match &col.level {
                None => profile.price,
                Some(level) => {
                    if profile.levels.get(&col.attribute) == Some(level) {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        Ok(FeatureVector(values))
    }

    /// Inverse of [`encode`](Self::encode).
    pub fn decode(&self, x: &FeatureVector) -> Result<ProductProfile> {
        if x.len() != self.n_columns() {
            return Err(Error::contract(format!(
                "feature vector has {} entries, scheme has {} columns",
                x.len(),
                self.n_columns()
            )));
        }
        let mut levels = BTreeMap::new();
        for attr in self.categorical() {
            let mut chosen = attr.baseline_level.clone();
            let mut hot = 0;
            for (col, &v) in self.columns.iter().zip(x.values()) {
                if col.attribute != attr.name {
                    continue;
                }
                if v == 1.0 {
                    hot += 1;
                    chosen = col.level.clone().expect("dummy column has a level");
                } else if v != 0.0 {
                    return Err(Error::Coding(format!("dummy for `{}` is {v}", col.name())));
                }
            }
            if hot > 1 {
                return Err(Error::Coding(format!("several levels set for `{}`", attr.name)));
            }
            levels.insert(attr.name.clone(), chosen);
        }
        let profile = ProductProfile { levels, price: x.values()[self.price_column] };
        self.validate_profile(&profile)?;
        Ok(profile)
    }
}

/// A concrete product: one level per categorical attribute plus a price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductProfile {
    pub levels: BTreeMap<String, String>,
    pub price: f64,
}

impl ProductProfile {
    pub fn new<K, V>(levels: impl IntoIterator<Item = (K, V)>, price: f64) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            levels: levels.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            price,
        }
    }

    pub fn with_level(mut self, attribute: &str, level: &str) -> Self {
        self.levels.insert(attribute.to_string(), level.to_string());
        self
    }
}

impl fmt::Display for ProductProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.levels {
            write!(f, "{k}={v} ")?;
        }
        write!(f, "${}", self.price)
    }
}

/// Coded profile in the scheme's column order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Element-wise `self - other`.
    pub fn difference(&self, other: &FeatureVector) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

/// Part-worths aligned with the feature columns; the price entry is utility
/// per dollar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coefficients(pub Vec<f64>);

impl Coefficients {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Linear utility `beta · x`.
pub fn utility(x: &FeatureVector, beta: &Coefficients) -> Result<f64> {
    if x.len() != beta.len() {
        return Err(Error::contract(format!(
            "utility: {} features but {} coefficients",
            x.len(),
            beta.len()
        )));
    }
    Ok(dot(x.values(), beta.values()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, evaluated without overflow and clamped to
/// `[P_FLOOR, 1 - P_FLOOR]` so it never returns an exact 0 or 1.
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(P_FLOOR, 1.0 - P_FLOOR)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(x)`, unclamped.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Probability that A is chosen over B given their utilities.
pub fn choice_probability(u_a: f64, u_b: f64) -> Result<f64> {
    if !u_a.is_finite() || !u_b.is_finite() {
        return Err(Error::contract(format!("non-finite utilities ({u_a}, {u_b})")));
    }
    Ok(sigmoid(u_a - u_b))
}

/// A price coefficient too close to zero (or positive) for a dollar ratio.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("price coefficient {beta_price} is not safely negative")]
pub struct SignUnsafe {
    pub beta_price: f64,
}

/// Dollar value of a feature, `-beta_f / beta_price`.
pub fn wtp(beta_f: f64, beta_price: f64) -> Result<f64, SignUnsafe> {
    wtp_with_eps(beta_f, beta_price, DEFAULT_SIGN_EPS)
}

pub fn wtp_with_eps(beta_f: f64, beta_price: f64, eps: f64) -> Result<f64, SignUnsafe> {
    // NaN fails this comparison too.
    if !(beta_price < -eps) {
        return Err(SignUnsafe { beta_price });
    }
    Ok(-beta_f / beta_price)
}
