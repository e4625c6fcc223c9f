//! Robust proxy construction.
//!
//! The image-side query vector combines the proxy image feature with the query
//! image feature and the semantic perturbation `f_s = f_t - f_o`, each of the
//! latter two rescaled to the proxy's magnitude:
//!
//! ```text
//! f_rp = w_p * f_p
//!      + w_q * (max|f_p| / max|f_q|) * f_q
//!      + w_s * (max|f_p| / max|f_s|) * f_s
//! ```
//!
//! A term whose denominator magnitude is below 1e-12 is dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{mean_embedding, Embedding};

const ZERO_MAX: f32 = 1e-12;

/// How the magnitude in the scale ratio is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxMode {
    /// Largest absolute component.
    #[default]
    Abs,
    /// Largest signed component.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub query: f32,
    pub perturbation: f32,
    pub proxy: f32,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            query: 1.0,
            perturbation: 1.0,
            proxy: 1.0,
        }
    }
}

impl FusionWeights {
    pub fn new(query: f32, perturbation: f32, proxy: f32) -> Result<Self> {
        let w = Self {
            query,
            perturbation,
            proxy,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("query", self.query),
            ("perturbation", self.perturbation),
            ("proxy", self.proxy),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "fusion weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Proxy handling when a query has several proxy images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Average the normalized proxies and fuse once.
    #[default]
    MeanEmbedding,
    /// Fuse each proxy separately and average the resulting similarities.
    PerProxy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    #[serde(default)]
    pub weights: FusionWeights,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default)]
    pub max_mode: MaxMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub proxy: Embedding,
    pub query: Embedding,
    pub target_caption: Embedding,
    pub origin_caption: Embedding,
}

impl FusionInputs {
    pub fn new(
        proxy: Embedding,
        query: Embedding,
        target_caption: Embedding,
        origin_caption: Embedding,
    ) -> Result<Self> {
        let dim = proxy.dim();
        for (name, e) in [
            ("query", &query),
            ("target caption", &target_caption),
            ("origin caption", &origin_caption),
        ] {
            if e.dim() != dim {
                return Err(Error::Shape(format!(
                    "{name} feature has dim {} but proxy has dim {dim}",
                    e.dim()
                )));
            }
        }
        Ok(Self {
            proxy,
            query,
            target_caption,
            origin_caption,
        })
    }
}

/// Output of [`robust_proxy`] with the scale factors that were applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustProxy {
    pub embedding: Embedding,
    pub query_scale: f32,
    pub perturbation_scale: f32,
    /// The proxy feature was all zeros, so only `w_p * f_p` (also zero) remains.
    pub degenerate_proxy: bool,
}

/// `f_t - f_o`, componentwise. May be the zero vector.
pub fn semantic_perturbation(target: &Embedding, origin: &Embedding) -> Result<Embedding> {
    if target.dim() != origin.dim() {
        return Err(Error::Shape(format!(
            "perturbation over dims {} and {}",
            target.dim(),
            origin.dim()
        )));
    }
    let diff = target
        .values()
        .iter()
        .zip(origin.values())
        .map(|(t, o)| t - o)
        .collect();
    Embedding::new(diff)
}

fn magnitude(e: &Embedding, mode: MaxMode) -> f32 {
    match mode {
        MaxMode::Abs => e.max_abs(),
        MaxMode::Signed => e.values().iter().copied().fold(f32::NEG_INFINITY, f32::max),
    }
}

/// `max|numerator| / max|denominator|`, or 0 when the denominator is (near) zero.
pub fn scale_factor(numerator: &Embedding, denominator: &Embedding) -> f32 {
    scale_factor_with(numerator, denominator, MaxMode::Abs)
}

pub fn scale_factor_with(numerator: &Embedding, denominator: &Embedding, mode: MaxMode) -> f32 {
    let den = magnitude(denominator, mode);
    if den.abs() < ZERO_MAX {
        return 0.0;
    }
    magnitude(numerator, mode) / den
}

pub fn robust_proxy(inputs: &FusionInputs, weights: &FusionWeights) -> Result<RobustProxy> {
    robust_proxy_with(inputs, weights, MaxMode::Abs)
}

pub fn robust_proxy_with(
    inputs: &FusionInputs,
    weights: &FusionWeights,
    mode: MaxMode,
) -> Result<RobustProxy> {
    weights.validate()?;
    let perturbation = semantic_perturbation(&inputs.target_caption, &inputs.origin_caption)?;
    let query_scale = scale_factor_with(&inputs.proxy, &inputs.query, mode);
    let perturbation_scale = scale_factor_with(&inputs.proxy, &perturbation, mode);
    let cq = weights.query * query_scale;
    let cs = weights.perturbation * perturbation_scale;
    let values = inputs
        .proxy
        .values()
        .iter()
        .zip(inputs.query.values())
        .zip(perturbation.values())
        .map(|((&p, &q), &s)| weights.proxy * p + cq * q + cs * s)
        .collect();
    Ok(RobustProxy {
        embedding: Embedding::new(values)?,
        query_scale,
        perturbation_scale,
        degenerate_proxy: inputs.proxy.max_abs() < ZERO_MAX,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregatedProxies {
    Mean(Embedding),
    PerProxy(Vec<Embedding>),
}

pub fn aggregate_proxies(
    proxies: &[Embedding],
    mode: AggregationMode,
) -> Result<AggregatedProxies> {
    if proxies.is_empty() {
        return Err(Error::Argument("no proxy embeddings to aggregate".into()));
    }
    match mode {
        AggregationMode::MeanEmbedding => Ok(AggregatedProxies::Mean(mean_embedding(proxies)?)),
        AggregationMode::PerProxy => Ok(AggregatedProxies::PerProxy(proxies.to_vec())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn perturbation_examples() {
        let s = semantic_perturbation(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap();
        assert_eq!(s.values(), &[1.0, -1.0]);
        let z = semantic_perturbation(&e(&[0.3, 0.4]), &e(&[0.3, 0.4])).unwrap();
        assert!(z.is_zero());
        assert!(matches!(
            semantic_perturbation(&e(&[1.0]), &e(&[1.0, 2.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scale_factor_examples() {
        assert_eq!(scale_factor(&e(&[1.0, 0.0]), &e(&[0.0, 0.5])), 2.0);
        let v = e(&[-0.7, 0.2, 0.1]);
        assert_eq!(scale_factor(&v, &v), 1.0);
        assert_eq!(scale_factor(&v, &e(&[0.0, 0.0, 0.0])), 0.0);
        // signed max of (-0.7, 0.2, 0.1) is 0.2
        assert_eq!(
            scale_factor_with(&e(&[0.4, 0.0, 0.0]), &v, MaxMode::Signed),
            2.0
        );
    }

    #[test]
    fn hand_evaluated_fusion() {
        let inputs = FusionInputs::new(
            e(&[1.0, 0.0]),
            e(&[0.0, 1.0]),
            e(&[1.0, 1.0]),
            e(&[0.5, 0.5]),
        )
        .unwrap();
        let rp = robust_proxy(&inputs, &FusionWeights::default()).unwrap();
        assert_eq!(rp.embedding.values(), &[2.0, 2.0]);
        assert_eq!((rp.query_scale, rp.perturbation_scale), (1.0, 2.0));
        assert!(!rp.degenerate_proxy);
    }

    #[test]
    fn collinear_inputs_triple_the_proxy() {
        // f_t - f_o = f_p
        let p = e(&[0.5, -0.25, 0.125]);
        let inputs =
            FusionInputs::new(p.clone(), p.clone(), e(&[1.0, -0.5, 0.25]), p.clone()).unwrap();
        let rp = robust_proxy(&inputs, &FusionWeights::default()).unwrap();
        assert_eq!(rp.embedding.values(), &[1.5, -0.75, 0.375]);
    }

    #[test]
    fn proxy_only_weights() {
        let p = e(&[0.3, -0.1, 0.9]);
        let inputs = FusionInputs::new(
            p.clone(),
            e(&[1.0, 2.0, 3.0]),
            e(&[0.0, 1.0, 0.0]),
            e(&[1.0, 0.0, 0.0]),
        )
        .unwrap();
        let rp = robust_proxy(&inputs, &FusionWeights::new(0.0, 0.0, 1.0).unwrap()).unwrap();
        assert_eq!(rp.embedding, p);
    }

    #[test]
    fn zero_proxy_is_flagged() {
        let inputs = FusionInputs::new(
            e(&[0.0, 0.0]),
            e(&[1.0, 0.0]),
            e(&[0.0, 1.0]),
            e(&[1.0, 0.0]),
        )
        .unwrap();
        let rp = robust_proxy(&inputs, &FusionWeights::default()).unwrap();
        assert!(rp.degenerate_proxy);
        assert!(rp.embedding.is_zero());
    }

    #[test]
    fn weights_must_be_non_negative() {
        assert!(FusionWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(FusionWeights::new(1.0, f32::NAN, 1.0).is_err());
    }

    #[test]
    fn aggregation() {
        let v = e(&[3.0, 4.0]);
        let five = vec![v.clone(); 5];
        match aggregate_proxies(&five, AggregationMode::MeanEmbedding).unwrap() {
            AggregatedProxies::Mean(m) => assert_eq!(m.values(), &[0.6, 0.8]),
            other => panic!("{other:?}"),
        }
        match aggregate_proxies(
            &[e(&[1.0, 0.0]), e(&[0.0, 1.0])],
            AggregationMode::MeanEmbedding,
        )
        .unwrap()
        {
            AggregatedProxies::Mean(m) => assert_eq!(m.values(), &[0.5, 0.5]),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            aggregate_proxies(&five, AggregationMode::PerProxy).unwrap(),
            AggregatedProxies::PerProxy(five.clone())
        );
        assert!(aggregate_proxies(&[], AggregationMode::PerProxy).is_err());
    }
}
