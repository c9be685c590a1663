//! Value generators for synthesized device streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Constant { value: f64 },
    /// `start + step * i`.
    Linear { start: f64, step: f64 },
    /// `mean + amplitude * sin(2π (i / period) + phase)`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Replayed in order, cycling when more values are asked for.
    Scripted { values: Vec<f64> },
}

// `deny_unknown_fields` does not combine with `flatten`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub shape: Shape,
    /// Uniform noise in `[-noise, noise]` added to every value.
    #[serde(default)]
    pub noise: f64,
    /// Round to this many decimals; 0 emits integers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decimals: Option<u32>,
    /// When set, each payload gets an array of this many consecutive values (waveforms).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

impl GeneratorSpec {
    pub fn new(shape: Shape) -> Self {
        GeneratorSpec { shape, noise: 0.0, decimals: None, samples: None }
    }

    fn base(&self, i: usize) -> f64 {
        match &self.shape {
            Shape::Constant { value } => *value,
            Shape::Linear { start, step } => start + step * i as f64,
            Shape::Sinusoid { mean, amplitude, period, phase } => {
                mean + amplitude * (std::f64::consts::TAU * i as f64 / period + phase).sin()
            }
            Shape::Scripted { values } if values.is_empty() => 0.0,
            Shape::Scripted { values } => values[i % values.len()],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match &self.shape {
            Shape::Scripted { values } if values.is_empty() => return Err("scripted values are empty".into()),
            Shape::Sinusoid { period, .. } if *period <= 0.0 => return Err("sinusoid period must be positive".into()),
            _ => {}
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err("noise must be a finite non-negative number".into());
        }
        if self.samples == Some(0) {
            return Err("samples must be positive".into());
        }
        Ok(())
    }
}

fn round(v: f64, decimals: Option<u32>) -> f64 {
    match decimals {
        Some(d) => {
            let f = 10f64.powi(d as i32);
            (v * f).round() / f
        }
        None => v,
    }
}

/// `n` values from `spec`; the same spec, seed and stream always give the same sequence.
pub fn generate_values(spec: &GeneratorSpec, n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n)
        .map(|i| {
            let noise = if spec.noise > 0.0 { rng.random_range(-spec.noise..=spec.noise) } else { 0.0 };
            round(spec.base(i) + noise, spec.decimals)
        })
        .collect()
}

pub fn to_json(v: f64, decimals: Option<u32>) -> Value {
    if decimals == Some(0) && v.abs() < 9.0e15 {
        Value::Number(Number::from(v as i64))
    } else {
        Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
    }
}

/// Values for `count` payloads: one number each, or a `samples`-long array each.
pub fn field_values(spec: &GeneratorSpec, count: usize, seed: u64, stream: u64) -> Vec<Value> {
    match spec.samples {
        None => generate_values(spec, count, seed, stream).into_iter().map(|v| to_json(v, spec.decimals)).collect(),
        Some(k) => generate_values(spec, count * k, seed, stream)
            .chunks(k)
            .map(|c| Value::Array(c.iter().map(|v| to_json(*v, spec.decimals)).collect()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_without_noise() {
        let spec = GeneratorSpec::new(Shape::Constant { value: 96.0 });
        assert_eq!(generate_values(&spec, 3, 1, 0), vec![96.0, 96.0, 96.0]);
        assert!(generate_values(&spec, 0, 1, 0).is_empty());
    }

    #[test]
    fn scripted_replays_exactly() {
        let spec = GeneratorSpec::new(Shape::Scripted { values: vec![102.0, 51.0, 76.0] });
        assert_eq!(generate_values(&spec, 3, 9, 0), vec![102.0, 51.0, 76.0]);
        assert_eq!(generate_values(&spec, 4, 9, 0)[3], 102.0);
    }

    #[test]
    fn linear_and_sinusoid() {
        let spec = GeneratorSpec::new(Shape::Linear { start: 180.0, step: -0.5 });
        assert_eq!(generate_values(&spec, 3, 0, 0), vec![180.0, 179.5, 179.0]);
        let mut spec = GeneratorSpec::new(Shape::Sinusoid { mean: 0.0, amplitude: 1.0, period: 4.0, phase: 0.0 });
        spec.decimals = Some(6);
        assert_eq!(generate_values(&spec, 4, 0, 0), vec![0.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let mut spec = GeneratorSpec::new(Shape::Constant { value: 100.0 });
        spec.noise = 2.0;
        let a = generate_values(&spec, 50, 42, 3);
        assert_eq!(a, generate_values(&spec, 50, 42, 3));
        assert_ne!(a, generate_values(&spec, 50, 43, 3));
        assert_ne!(a, generate_values(&spec, 50, 42, 4));
        assert!(a.iter().all(|v| (98.0..=102.0).contains(v)));
    }

    #[test]
    fn integer_rendering() {
        let mut spec = GeneratorSpec::new(Shape::Scripted { values: vec![120.4] });
        spec.decimals = Some(0);
        assert_eq!(field_values(&spec, 1, 0, 0), vec![serde_json::json!(120)]);
        spec.samples = Some(2);
        assert_eq!(field_values(&spec, 2, 0, 0), vec![serde_json::json!([120, 120]); 2]);
    }
}
