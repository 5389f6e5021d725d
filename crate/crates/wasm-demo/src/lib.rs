//! Browser bindings: draw or generate two digits, then compare their exact
//! W2 distance with a learned surrogate loaded from a checkpoint.

use kenn::data::synth::render_digit;
use kenn::measures::{GridMeasure, GroundCost};
use kenn::models::{Arch, Model, ModelError, ModelKind};
use kenn::ot::exact_w2;
use kenn::train::checkpoint::{decode_checkpoint, model_from_tensors};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const SIDE: usize = 28;

fn measure(pixels: &[u8]) -> Result<GridMeasure, JsError> {
    GridMeasure::from_bytes(SIDE, SIDE, pixels).map_err(|e| JsError::new(&e.to_string()))
}

/// A 28x28 synthetic glyph of `digit`, row-major bytes.
#[wasm_bindgen]
pub fn synth_digit(digit: u8, seed: u64) -> Result<Vec<u8>, JsError> {
    if digit > 9 {
        return Err(JsError::new("digit must be 0-9"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(render_digit(digit, &mut rng))
}

/// Exact W2 between two 28x28 images, in pixel units.
#[wasm_bindgen]
pub fn exact_distance(a: &[u8], b: &[u8]) -> Result<f64, JsError> {
    let cost = GroundCost::new(SIDE, SIDE).map_err(|e| JsError::new(&e.to_string()))?;
    exact_w2(&measure(a)?, &measure(b)?, &cost).map_err(|e| JsError::new(&e.to_string()))
}

/// A distance model held by the page.
#[wasm_bindgen]
pub struct Surrogate {
    model: Model<f32>,
}

#[wasm_bindgen]
impl Surrogate {
    /// Loads a checkpoint written by `kenn train`.
    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Surrogate, JsError> {
        let tensors = decode_checkpoint(bytes).map_err(|e| JsError::new(&e.to_string()))?;
        let model = model_from_tensors(tensors).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Surrogate { model })
    }

    /// An untrained model, handy for trying the page without a checkpoint.
    pub fn untrained(kind: &str, seed: u64) -> Result<Surrogate, JsError> {
        let kind: ModelKind = kind
            .parse()
            .map_err(|e: ModelError| JsError::new(&e.to_string()))?;
        Ok(Surrogate {
            model: Model::new(kind, Arch::full(), seed),
        })
    }

    pub fn kind(&self) -> String {
        self.model.kind().to_string()
    }

    #[wasm_bindgen(js_name = paramCount)]
    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Predicted W2 between two 28x28 images.
    pub fn distance(&self, a: &[u8], b: &[u8]) -> Result<f64, JsError> {
        let side = self.model.arch().side;
        if side == 0 || SIDE % side != 0 {
            return Err(JsError::new("checkpoint resolution does not divide 28"));
        }
        let input = |pixels: &[u8]| -> Result<Vec<f32>, JsError> {
            let set = kenn::data::ImageSet::new(SIDE, SIDE, pixels.to_vec()).downscale(SIDE / side);
            let m = GridMeasure::from_bytes(side, side, set.image(0))
                .map_err(|e| JsError::new(&e.to_string()))?;
            Ok(m.weights().iter().map(|&w| w as f32).collect())
        };
        let d = self
            .model
            .distance(&input(a)?, &input(b)?)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(f64::from(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_have_mass() {
        let img = synth_digit(7, 1).unwrap();
        assert_eq!(img.len(), 784);
        assert!(img.iter().any(|&p| p > 0));
    }

    #[test]
    fn distances_are_consistent() {
        let (a, b) = (synth_digit(1, 2).unwrap(), synth_digit(8, 3).unwrap());
        let d = exact_distance(&a, &b).unwrap();
        assert!(d > 0.0);
        assert!(exact_distance(&a, &a).unwrap().abs() < 1e-9);
        let s = Surrogate::untrained("odekenn", 4).unwrap();
        assert_eq!(s.param_count(), 55434);
        let sd = s.distance(&a, &b).unwrap();
        assert!(sd.is_finite() && sd >= 0.0);
        assert!((sd - s.distance(&b, &a).unwrap()).abs() < 1e-9);
    }
}
