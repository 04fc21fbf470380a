use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropTransform};
use crate::numerics::{sigmoid, ParamId, ParamStore, Tape, Tensor, Var};

/// A plain trainable linear layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::randn(&[d_in, d_out], std, rng),
                true,
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Two 3-layer MLPs over the search tokens: one logit and four offsets per
/// token.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: [Linear; 3],
    pub reg: [Linear; 3],
    pub dim: usize,
    pub hidden: usize,
}

fn mlp3<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    h: usize,
    out: usize,
    last_std: f64,
    rng: &mut R,
) -> [Linear; 3] {
    [
        Linear::new(
            store,
            &format!("{name}.fc1"),
            d,
            h,
            (d as f64).powf(-0.5),
            rng,
        ),
        Linear::new(
            store,
            &format!("{name}.fc2"),
            h,
            h,
            (h as f64).powf(-0.5),
            rng,
        ),
        Linear::new(store, &format!("{name}.fc3"), h, out, last_std, rng),
    ]
}

fn run_mlp(layers: &[Linear; 3], tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let h = layers[0].forward(tape, store, x)?;
    let h = tape.gelu(h);
    let h = layers[1].forward(tape, store, h)?;
    let h = tape.gelu(h);
    layers[2].forward(tape, store, h)
}

impl Heads {
    /// `cells` sets the initial classification bias to the uniform prior
    /// `1 / cells`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        cells: usize,
        rng: &mut R,
    ) -> Self {
        let small = 0.1 * (hidden as f64).powf(-0.5);
        let cls = mlp3(store, "head.cls", dim, hidden, 1, small, rng);
        if cells > 1 {
            store.value_mut(cls[2].b).data_mut()[0] = -((cells - 1) as f64).ln();
        }
        Self {
            cls,
            reg: mlp3(store, "head.reg", dim, hidden, 4, small, rng),
            dim,
            hidden,
        }
    }

    /// Returns `(logits [N, 1], offsets [N, 4])`; offsets are `exp` of the
    /// regression output, in patch units.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<(Var, Var)> {
        let logits = run_mlp(&self.cls, tape, store, tokens)?;
        let raw = run_mlp(&self.reg, tape, store, tokens)?;
        Ok((logits, tape.exp(raw)))
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.cls.iter().chain(self.reg.iter())
    }
}

/// Head outputs over the search grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f64>,
    /// Left, top, right, bottom distances from each cell center, in patches.
    pub offsets: Vec<[f64; 4]>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, logits: Vec<f64>, offsets: Vec<[f64; 4]>) -> Result<Self> {
        if rows * cols == 0 || logits.len() != rows * cols || offsets.len() != rows * cols {
            return Err(Error::shape(
                "score_map",
                &[rows, cols],
                &[logits.len(), offsets.len()],
            ));
        }
        Ok(Self {
            rows,
            cols,
            logits,
            offsets,
        })
    }

    pub(crate) fn from_tape(
        tape: &Tape,
        logits: Var,
        offsets: Var,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        let l = tape.value(logits).data().to_vec();
        let o = tape
            .value(offsets)
            .data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Self::new(rows, cols, l, o)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Largest raw probability.
    pub fn score_max(&self) -> f64 {
        self.probabilities()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HannMode {
    /// `(1 − coef)·σ(z) + coef·H`
    Blend,
    /// `σ(z)·((1 − coef) + coef·H)`
    Multiply,
}

fn hann_1d(n: usize) -> Vec<f64> {
    // interior of a length n + 2 window so the border cells stay positive
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Outer product of 1-D Hann windows, scaled so its peak is 1.
pub fn hann_window(rows: usize, cols: usize) -> Vec<f64> {
    let (r, c) = (hann_1d(rows), hann_1d(cols));
    let mut h: Vec<f64> = r
        .iter()
        .flat_map(|a| c.iter().map(move |b| a * b))
        .collect();
    let peak = h.iter().copied().fold(0.0, f64::max);
    h.iter_mut().for_each(|v| *v /= peak);
    h
}

/// Window-penalized scores, row-major.
pub fn hann_penalize(map: &ScoreMap, coef: f64, mode: HannMode) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&coef) {
        return Err(Error::Config(format!(
            "hann coefficient {coef} outside [0, 1]"
        )));
    }
    let h = hann_window(map.rows, map.cols);
    Ok(map
        .probabilities()
        .into_iter()
        .zip(h)
        .map(|(s, w)| match mode {
            HannMode::Blend => (1.0 - coef) * s + coef * w,
            HannMode::Multiply => s * ((1.0 - coef) + coef * w),
        })
        .collect())
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Box at the best cell of `scores`, mapped back to image pixels. Ties go to
/// the lowest row-major index.
pub fn decode(
    map: &ScoreMap,
    scores: &[f64],
    patch: usize,
    crop: &CropTransform,
) -> Result<(BBox, usize)> {
    if scores.len() != map.rows * map.cols {
        return Err(Error::shape(
            "decode",
            &[map.rows, map.cols],
            &[scores.len()],
        ));
    }
    let cell = argmax(scores);
    let p = patch as f64;
    let (r, c) = (cell / map.cols, cell % map.cols);
    let (cx, cy) = ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
    let [l, t, rr, b] = map.offsets[cell];
    let in_crop = BBox::from_corners([cx - l * p, cy - t * p, cx + rr * p, cy + b * p]);
    Ok((crop.to_image(&in_crop), cell))
}
