//! WebAssembly bindings for the browser demo in `www/`.

use rand::Rng;
use wasm_bindgen::prelude::*;
use xattnres::data::{generate_synthetic, SyntheticSpec};
use xattnres::params::ParamStore;
use xattnres::rng::named_rng;
use xattnres::xattnres::{resize, HistoryPool, QueryInit, StageTag, XAttnResUnit};
use xattnres::{Tape, Tensor};

const SCENES: usize = 20;
const SIDE: usize = 64;
/// Colours of background, disk, rectangle and ring in the mask view.
const PALETTE: [[u8; 3]; 4] = [[20, 20, 28], [230, 90, 70], [70, 160, 230], [240, 200, 60]];

fn js_err(e: xattnres::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn gray_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// One synthetic scene as RGBA pixel buffers.
#[wasm_bindgen]
pub struct Scene {
    side: usize,
    image: Vec<f64>,
    labels: Vec<usize>,
}

#[wasm_bindgen]
impl Scene {
    /// Scene `index` (mod 20) of the 64×64 synthetic set drawn with `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: usize, noise_std: f64) -> Result<Scene, JsError> {
        let spec = SyntheticSpec { count: SCENES, noise_std, seed, ..SyntheticSpec::default() };
        let ds = generate_synthetic(&spec).map_err(js_err)?;
        let s = &ds.samples[index % SCENES];
        Ok(Scene { side: SIDE, image: s.image.data().to_vec(), labels: s.mask.labels.clone() })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn image(&self) -> Vec<f64> {
        self.image.clone()
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.image)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|&l| {
            let [r, g, b] = PALETTE[l.min(3)];
            [r, g, b, 255]
        }).collect()
    }
}

/// Resizes an `h×w` plane the way history features are aligned: adaptive
/// max pooling where the target is smaller, bilinear where it is larger.
pub fn resize_plane(values: &[f64], h: usize, w: usize, th: usize, tw: usize) -> xattnres::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::new([1, 1, h, w], values.to_vec())?);
    let out = resize(&mut tape, v, th, tw)?;
    Ok(tape.value(out).data().to_vec())
}

/// [`resize_plane`] returning RGBA pixels for a canvas.
#[wasm_bindgen]
pub fn resize_rgba(values: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<u8>, JsError> {
    resize_plane(values, h, w, th, tw).map(|v| gray_rgba(&v)).map_err(js_err)
}

/// Mean attention weight per entry (`history` random features, then the
/// current one) when the pseudo-query is `scale` times a fixed random
/// direction. Scale 0 is the zero initialisation.
#[wasm_bindgen]
pub fn attention_weights(history: usize, scale: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    const C: usize = 8;
    const HW: usize = 8;
    let tags: Vec<StageTag> = (1..=history).map(StageTag::enc).collect();
    let sources: Vec<(StageTag, usize)> = tags.iter().map(|&t| (t, C)).collect();
    let mut store = ParamStore::new();
    let unit = XAttnResUnit::new(&mut store, "demo", StageTag::dec(1), C, Some((HW, HW)), &sources, QueryInit::XavierUniform, seed);
    for q in store.get_mut(unit.pseudo_query).data_mut() {
        *q *= scale;
    }
    let mut rng = named_rng(seed, "demo.features");
    let mut feature = |tape: &mut Tape, k: usize| {
        // entries differ in their dominant channel so the query can tell them apart
        let data = (0..C * HW * HW)
            .map(|i| {
                let bump = if i / (HW * HW) == k % C { 2.0 } else { 0.0 };
                bump + rng.random_range(0.0..1.0)
            })
            .collect();
        tape.leaf(Tensor::new([1, C, HW, HW], data).expect("feature shape"))
    };
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let mut pool = HistoryPool::new();
    for (k, &tag) in tags.iter().enumerate() {
        let v = feature(&mut tape, k);
        pool.append(v, tag).map_err(js_err)?;
    }
    let x = feature(&mut tape, history);
    let (_, trace) = unit.attend(&mut tape, &params, &pool, x).map_err(js_err)?;
    Ok(trace.mean_weights())
}
