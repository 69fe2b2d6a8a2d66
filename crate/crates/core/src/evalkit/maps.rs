use std::fmt;
use std::str::FromStr;

use crate::encoders::{Encoder, EncoderState, ModelConfig, PromptSet};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::numerics::{Tape, Tensor};

/// Query token whose attention is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenSelector {
    Cls,
    /// Visual prompt slot `i`.
    Prompt(usize),
}

impl TokenSelector {
    /// Position of the token in the image sequence.
    pub fn position(self, cfg: &ModelConfig) -> Result<usize> {
        match self {
            TokenSelector::Cls => Ok(0),
            TokenSelector::Prompt(i) if i < cfg.visual_prompts => Ok(1 + cfg.num_patches() + i),
            TokenSelector::Prompt(i) => Err(Error::OutOfRange {
                what: "visual prompts",
                index: i,
                size: cfg.visual_prompts,
            }),
        }
    }
}

impl fmt::Display for TokenSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenSelector::Cls => f.write_str("CLS"),
            TokenSelector::Prompt(i) => write!(f, "VP:{i}"),
        }
    }
}

impl FromStr for TokenSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("cls") {
            return Ok(TokenSelector::Cls);
        }
        s.strip_prefix("VP:")
            .and_then(|i| i.parse().ok())
            .map(TokenSelector::Prompt)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "bad token selector {s:?}; expected CLS or VP:<index>"
                ))
            })
    }
}

/// Non-negative weights over the patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub source: TokenSelector,
    pub layer: usize,
}

impl AttentionMap {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        source: TokenSelector,
        layer: usize,
    ) -> Result<Self> {
        if values.len() != rows * cols || values.is_empty() {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "attention map values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            values,
            source,
            layer,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Final-layer attention of `selector` over the patch tokens, head-averaged and
/// renormalized to sum to 1.
pub fn extract_attention_map(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
    selector: TokenSelector,
) -> Result<AttentionMap> {
    let query = selector.position(cfg)?;
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (pv, _) = Encoder::prompt_vars(&mut tape, prompts, false);
    let (c0, e0) = enc.embed_image(&mut tape, image)?;
    let out = enc.encode_image(&mut tape, c0, e0, &pv)?;
    let m = cfg.num_patches();
    let heads = &out.final_attention.weights;
    let mut grid = vec![0.0; m];
    for &h in heads {
        let w = tape.value(h);
        for (j, g) in grid.iter_mut().enumerate() {
            *g += w.get(query, 1 + j) / heads.len() as f64;
        }
    }
    let total: f64 = grid.iter().sum();
    if total <= 0.0 || total.is_nan() {
        return Err(Error::DegenerateVector);
    }
    grid.iter_mut().for_each(|g| *g /= total);
    AttentionMap::new(
        cfg.patch_grid.0,
        cfg.patch_grid.1,
        grid,
        selector,
        cfg.depth - 1,
    )
}

/// Nearest-neighbour upsampling of a patch grid to `size x size` pixels.
pub fn upsample(values: &[f64], rows: usize, cols: usize, size: usize) -> Result<Vec<f64>> {
    if values.len() != rows * cols
        || rows == 0
        || cols == 0
        || !size.is_multiple_of(rows)
        || !size.is_multiple_of(cols)
    {
        return Err(Error::Shape(format!(
            "cannot upsample a {rows}x{cols} grid of {} values to {size}x{size}",
            values.len()
        )));
    }
    let (ph, pw) = (size / rows, size / cols);
    Ok((0..size * size)
        .map(|i| values[(i / size / ph) * cols + (i % size) / pw])
        .collect())
}

/// Foreground wherever a cell exceeds the map mean, at pixel resolution.
pub fn binarize_map(map: &AttentionMap, size: usize) -> Result<Mask> {
    let n = map.values.len() as f64;
    let mean = map.values.iter().sum::<f64>() / n;
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    // `v > min` keeps a constant map all-background even when the rounded mean dips below it.
    let cells: Vec<f64> = map
        .values
        .iter()
        .map(|&v| if v > mean && v > min { 1.0 } else { 0.0 })
        .collect();
    let pixels = upsample(&cells, map.rows, map.cols, size)?;
    Mask::new(size, size, pixels.into_iter().map(|p| p > 0.5).collect())
}

/// Attention mass on ground-truth foreground: each cell weighted by its foreground pixel fraction.
pub fn foreground_mass(map: &AttentionMap, gt: &Mask) -> Result<f64> {
    if gt.rows() != gt.cols() {
        return Err(Error::Shape("ground-truth mask must be square".into()));
    }
    let size = gt.rows();
    let weights = upsample(&map.values, map.rows, map.cols, size)?;
    let cell_pixels = (size / map.rows * (size / map.cols)) as f64;
    Ok(weights
        .iter()
        .zip(gt.bits())
        .filter(|(_, &b)| b)
        .map(|(w, _)| w / cell_pixels)
        .sum())
}

/// Patch tokens entering the last image layer, `m x d_v`.
pub fn final_layer_activations(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<Tensor> {
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (pv, _) = Encoder::prompt_vars(&mut tape, prompts, false);
    let (c0, e0) = enc.embed_image(&mut tape, image)?;
    let out = enc.encode_image(&mut tape, c0, e0, &pv)?;
    let rows = tape.slice_rows(out.final_input, 1, cfg.num_patches())?;
    Ok(tape.value(rows).clone())
}

struct SimilarityGraph {
    tape: Tape,
    activations: crate::numerics::Var,
    score: crate::numerics::Var,
}

/// Replays the last layer with the patch rows replaced by `activations` and
/// scores the projected class token against `class_text` (unit norm).
fn similarity_graph(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
    class_text: &[f64],
    activations: Option<&Tensor>,
) -> Result<SimilarityGraph> {
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (pv, _) = Encoder::prompt_vars(&mut tape, prompts, false);
    let (c0, e0) = enc.embed_image(&mut tape, image)?;
    let out = enc.encode_image(&mut tape, c0, e0, &pv)?;
    let m = cfg.num_patches();
    let input = tape.value(out.final_input).clone();
    let head = tape.slice_rows(out.final_input, 0, 1)?;
    let head = tape.constant(tape.value(head).clone());
    let a_value = match activations {
        Some(a) if a.dims() != (m, cfg.vision_width) => {
            return Err(Error::Shape(format!(
                "activations {:?}, expected {:?}",
                a.dims(),
                (m, cfg.vision_width)
            )))
        }
        Some(a) => a.clone(),
        None => {
            let rows = input.values()[cfg.vision_width..(1 + m) * cfg.vision_width].to_vec();
            Tensor::matrix(m, cfg.vision_width, rows)?
        }
    };
    let activations = tape.param(a_value);
    let mut parts = vec![head, activations];
    if cfg.visual_prompts > 0 {
        let tail = tape.slice_rows(out.final_input, 1 + m, cfg.visual_prompts)?;
        parts.push(tape.constant(tape.value(tail).clone()));
    }
    let tokens = tape.concat_rows(&parts)?;
    let layer = enc.image_final_layer(&mut tape, tokens)?;
    let cls = tape.slice_rows(layer.tokens, 0, 1)?;
    let x = enc.project_image(&mut tape, cls)?;
    if class_text.len() != cfg.shared_width {
        return Err(Error::Shape(format!(
            "class text of width {}, expected {}",
            class_text.len(),
            cfg.shared_width
        )));
    }
    let z = tape.constant(Tensor::row(class_text.to_vec())?);
    let prod = tape.mul(x, z)?;
    let score = tape.sum(prod);
    Ok(SimilarityGraph {
        tape,
        activations,
        score,
    })
}

/// Similarity score as a function of the final-layer patch activations.
pub fn final_layer_similarity(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
    class_text: &[f64],
    activations: &Tensor,
) -> Result<f64> {
    let g = similarity_graph(image, prompts, cfg, state, class_text, Some(activations))?;
    Ok(g.tape.value(g.score).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    pub map: AttentionMap,
    pub class_index: usize,
    /// Mean gradient over patches, one entry per channel.
    pub channel_weights: Vec<f64>,
    pub score: f64,
}

/// Gradient-weighted final-layer activations, rectified. Without `class_index`
/// the class with the highest similarity in `prompted_text` is explained.
pub fn gradcam_map(
    image: &Image,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
    prompted_text: &Tensor,
    class_index: Option<usize>,
) -> Result<GradCam> {
    let n = prompted_text.rows();
    let class_index = match class_index {
        Some(c) if c >= n => {
            return Err(Error::OutOfRange {
                what: "class",
                index: c,
                size: n,
            })
        }
        Some(c) => c,
        None => {
            let x = crate::tuning::forward_three_branch(image, prompts, cfg, state)?.global;
            let sims: Vec<f64> = (0..n)
                .map(|c| crate::numerics::cosine_similarity(&x, prompted_text.row_slice(c)))
                .collect::<Result<_>>()?;
            crate::ensemble::argmax(&sims)?
        }
    };
    let g = similarity_graph(
        image,
        prompts,
        cfg,
        state,
        prompted_text.row_slice(class_index),
        None,
    )?;
    let grads = g.tape.backward(g.score)?;
    let (m, d) = (cfg.num_patches(), cfg.vision_width);
    let grad = grads
        .get(g.activations)
        .unwrap_or_else(|| Tensor::zeros(m, d));
    let a = g.tape.value(g.activations);
    let weights: Vec<f64> = (0..d)
        .map(|c| (0..m).map(|j| grad.get(j, c)).sum::<f64>() / m as f64)
        .collect();
    let grid: Vec<f64> = (0..m)
        .map(|j| {
            let v: f64 = (0..d).map(|c| weights[c] * a.get(j, c)).sum();
            v.max(0.0)
        })
        .collect();
    Ok(GradCam {
        map: AttentionMap::new(
            cfg.patch_grid.0,
            cfg.patch_grid.1,
            grid,
            TokenSelector::Cls,
            cfg.depth - 1,
        )?,
        class_index,
        channel_weights: weights,
        score: g.tape.value(g.score).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>) -> AttentionMap {
        AttentionMap::new(4, 4, values, TokenSelector::Cls, 0).unwrap()
    }

    #[test]
    fn selectors_parse_and_check_range() {
        assert_eq!("CLS".parse::<TokenSelector>().unwrap(), TokenSelector::Cls);
        assert_eq!(
            "VP:3".parse::<TokenSelector>().unwrap(),
            TokenSelector::Prompt(3)
        );
        assert_eq!(TokenSelector::Prompt(2).to_string(), "VP:2");
        assert!("VP:x".parse::<TokenSelector>().is_err());
        let cfg = ModelConfig {
            visual_prompts: 2,
            ..Default::default()
        };
        assert_eq!(TokenSelector::Prompt(1).position(&cfg).unwrap(), 18);
        assert!(TokenSelector::Prompt(2).position(&cfg).is_err());
    }

    #[test]
    fn constant_map_is_background() {
        for v in [0.1, 1.0 / 3.0, 0.0625, 7.3] {
            let m = binarize_map(&map(vec![v; 16]), 16).unwrap();
            assert_eq!(m.count(), 0);
        }
    }

    #[test]
    fn two_valued_map() {
        let values: Vec<f64> = (0..16)
            .map(|i| if i % 3 == 0 || i > 12 { 0.9 } else { 0.1 })
            .collect();
        assert_eq!(values.iter().filter(|&&v| v == 0.9).count(), 8);
        let m = binarize_map(&map(values.clone()), 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(y, x), values[(y / 2) * 4 + x / 2] == 0.9);
            }
        }
    }

    #[test]
    fn foreground_mass_counts_fractions() {
        let mut values = vec![0.0; 16];
        values[0] = 0.5;
        values[5] = 0.5;
        let mut gt = Mask::empty(8, 8);
        // Half of cell 0 and all of cell 5.
        gt.set(0, 0, true);
        gt.set(0, 1, true);
        for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            gt.set(y, x, true);
        }
        let mass = foreground_mass(&map(values), &gt).unwrap();
        assert!((mass - 0.75).abs() < 1e-15);
    }
}
