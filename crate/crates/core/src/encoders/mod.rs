//! Miniature image and text transformers with deep prompt insertion.
//!
//! Image sequences are laid out as `[class, patches, prompts]` and text
//! sequences as `[eos, words, prompts]`. For the first `prompt_depth` layers
//! the prompt slots are overwritten with that layer's learnable tokens; past
//! that depth the prompt outputs of the previous layer flow through.

mod config;
mod prompts;
mod state;

pub use config::ModelConfig;
pub use prompts::{PromptSet, PROMPT_INIT_STD};
pub use state::{EncoderState, TextTower, TransformerBlock, VisionTower, MLP_RATIO};

pub(crate) use state::{BlockVars, StateVars, TowerVars};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{AttentionMask, AttentionVars, Tape, Tensor, Var};

/// Mask that stops every prompt slot (the last `prompts` positions) from
/// attending to any other prompt slot. All other entries are open.
pub fn build_prompt_mask(prompts: usize, total_tokens: usize) -> AttentionMask {
    assert!(prompts <= total_tokens, "more prompts than tokens");
    let mut mask = AttentionMask::unmasked(total_tokens);
    let first = total_tokens - prompts;
    for i in first..total_tokens {
        for j in first..total_tokens {
            if i != j {
                mask.set(i, j, true);
            }
        }
    }
    mask
}

/// Splits an image into row-major patches, one flattened patch per row.
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Result<Tensor> {
    if image.size() != cfg.image_size {
        return Err(Error::Shape(format!(
            "image is {0}x{0}, model expects {1}x{1}",
            image.size(),
            cfg.image_size
        )));
    }
    let (ph, pw) = cfg.patch_shape();
    let (gr, gc) = cfg.patch_grid;
    let mut values = Vec::with_capacity(image.size() * image.size());
    for r in 0..gr {
        for c in 0..gc {
            for y in 0..ph {
                for x in 0..pw {
                    values.push(image.get(r * ph + y, c * pw + x));
                }
            }
        }
    }
    Tensor::matrix(gr * gc, ph * pw, values)
}

/// Tape handles produced by one image pass.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// `1 x d_v` class token after the last layer.
    pub cls: Var,
    /// `m x d_v` patch tokens after the last layer.
    pub patches: Var,
    /// `V x d_v` prompt outputs after the last layer.
    pub prompts: Option<Var>,
    /// Full token sequence entering the last layer.
    pub final_input: Var,
    /// Attention of the last layer.
    pub final_attention: AttentionVars,
}

/// Output of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub tokens: Var,
    pub attention: AttentionVars,
}

pub(crate) fn layer_forward(
    tape: &mut Tape,
    b: &BlockVars,
    x: Var,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<LayerOutput> {
    let h = tape.layer_norm(x, b.ln1.0, b.ln1.1)?;
    let project = |tape: &mut Tape, (w, bias): (Var, Var)| -> Result<Var> {
        let y = tape.matmul(h, w)?;
        tape.add_row(y, bias)
    };
    let q = project(tape, b.q)?;
    let k = project(tape, b.k)?;
    let v = project(tape, b.v)?;
    let attention = tape.attention(q, k, v, heads, mask)?;
    let o = tape.matmul(attention.output, b.o.0)?;
    let o = tape.add_row(o, b.o.1)?;
    let x1 = tape.add(x, o)?;
    let h2 = tape.layer_norm(x1, b.ln2.0, b.ln2.1)?;
    let f = tape.matmul(h2, b.fc1.0)?;
    let f = tape.add_row(f, b.fc1.1)?;
    let f = tape.quick_gelu(f);
    let f = tape.matmul(f, b.fc2.0)?;
    let f = tape.add_row(f, b.fc2.1)?;
    let tokens = tape.add(x1, f)?;
    Ok(LayerOutput { tokens, attention })
}

/// Both encoders bound to one tape.
///
/// Frozen weights are loaded once as constants; prompts are whatever `Var`s
/// the caller supplies (trainable parameters during tuning).
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    vars: StateVars,
}

impl Encoder {
    pub fn new(tape: &mut Tape, cfg: &ModelConfig, state: &EncoderState) -> Result<Self> {
        cfg.validate()?;
        state.check(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            vars: StateVars::load(tape, state),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Returns `(c_0, E_0)`: the stored class token and the linear patch embeddings.
    pub fn embed_image(&self, tape: &mut Tape, image: &Image) -> Result<(Var, Var)> {
        let patches = tape.constant(patchify(image, &self.cfg)?);
        let v = &self.vars.vision;
        let e = tape.matmul(patches, v.embed)?;
        let e = match v.bias {
            Some(b) => tape.add_row(e, b)?,
            None => e,
        };
        Ok((v.special, e))
    }

    /// Returns `(e_0, W_0)`; `W_0` is `None` for an empty word list.
    pub fn embed_text(&self, tape: &mut Tape, ids: &[usize]) -> Result<(Var, Option<Var>)> {
        if ids.len() > self.cfg.context_length {
            return Err(Error::InvalidArgument(format!(
                "{} tokens exceed context length {}",
                ids.len(),
                self.cfg.context_length
            )));
        }
        let table = tape.value(self.vars.text.embed);
        let mut rows = Vec::with_capacity(ids.len() * self.cfg.text_width);
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: id,
                    size: self.cfg.vocab_size,
                });
            }
            rows.extend_from_slice(table.row_slice(id));
        }
        let words = if ids.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::matrix(ids.len(), self.cfg.text_width, rows)?))
        };
        Ok((self.vars.text.special, words))
    }

    fn expected_prompt_layers(&self, len: usize) -> usize {
        if len == 0 {
            0
        } else {
            self.cfg.prompt_depth
        }
    }

    fn check_prompts(&self, tape: &Tape, prompts: &[Var], len: usize, width: usize) -> Result<()> {
        let layers = self.expected_prompt_layers(len);
        if prompts.len() != layers {
            return Err(Error::Shape(format!(
                "{} prompt blocks supplied, expected {layers}",
                prompts.len()
            )));
        }
        for &p in prompts {
            if tape.value(p).dims() != (len, width) {
                return Err(Error::Shape(format!(
                    "prompt block {:?}, expected {:?}",
                    tape.value(p).dims(),
                    (len, width)
                )));
            }
        }
        Ok(())
    }

    /// Shared layer loop for both towers.
    fn run_tower(
        &self,
        tape: &mut Tape,
        tower: &TowerVars,
        head: Var,
        body: Option<Var>,
        prompts: &[Var],
        mask: Option<&AttentionMask>,
    ) -> Result<(Var, Var, AttentionVars)> {
        let body = match body {
            Some(b) => {
                let n = tape.value(b).rows();
                let pos = if n == tape.value(tower.positions).rows() {
                    tower.positions
                } else {
                    tape.slice_rows(tower.positions, 0, n)?
                };
                Some(tape.add(b, pos)?)
            }
            None => None,
        };
        let mut parts = vec![head];
        parts.extend(body);
        let fixed_rows: usize = parts.iter().map(|&p| tape.value(p).rows()).sum();
        parts.extend(prompts.first().copied());
        let mut tokens = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let depth = tower.blocks.len();
        let mut final_input = tokens;
        let mut final_attention = None;
        for (i, block) in tower.blocks.iter().enumerate() {
            if i > 0 && i < prompts.len() {
                let kept = tape.slice_rows(tokens, 0, fixed_rows)?;
                tokens = tape.concat_rows(&[kept, prompts[i]])?;
            }
            if i + 1 == depth {
                final_input = tokens;
            }
            let out = layer_forward(tape, block, tokens, self.cfg.heads, mask)?;
            tokens = out.tokens;
            final_attention = Some(out.attention);
        }
        Ok((tokens, final_input, final_attention.expect("depth >= 1")))
    }

    /// Prompt-to-prompt mask for the image sequence, if enabled.
    pub fn image_mask(&self) -> Option<AttentionMask> {
        self.cfg
            .mask_prompts
            .then(|| build_prompt_mask(self.cfg.visual_prompts, self.cfg.image_tokens()))
    }

    /// Runs the image tower on `[c_0, E_0 + pos, P^v]`.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        class_token: Var,
        patches: Var,
        prompts: &[Var],
    ) -> Result<ImageEncoding> {
        let m = self.cfg.num_patches();
        if tape.value(patches).dims() != (m, self.cfg.vision_width) {
            return Err(Error::Shape(format!(
                "patch embeddings {:?}, expected {:?}",
                tape.value(patches).dims(),
                (m, self.cfg.vision_width)
            )));
        }
        self.check_prompts(
            tape,
            prompts,
            self.cfg.visual_prompts,
            self.cfg.vision_width,
        )?;
        let mask = self.image_mask();
        let (tokens, final_input, final_attention) = self.run_tower(
            tape,
            &self.vars.vision,
            class_token,
            Some(patches),
            prompts,
            mask.as_ref(),
        )?;
        let cls = tape.slice_rows(tokens, 0, 1)?;
        let patches_out = tape.slice_rows(tokens, 1, m)?;
        let prompts_out = if self.cfg.visual_prompts > 0 {
            Some(tape.slice_rows(tokens, 1 + m, self.cfg.visual_prompts)?)
        } else {
            None
        };
        Ok(ImageEncoding {
            cls,
            patches: patches_out,
            prompts: prompts_out,
            final_input,
            final_attention,
        })
    }

    /// Runs the image tower with no prompts at all (the unprompted model).
    pub fn encode_image_plain(
        &self,
        tape: &mut Tape,
        class_token: Var,
        patches: Var,
    ) -> Result<Var> {
        let plain = ModelConfig {
            visual_prompts: 0,
            ..self.cfg.clone()
        };
        let enc = Encoder {
            cfg: plain,
            vars: self.vars.clone(),
        };
        Ok(enc.encode_image(tape, class_token, patches, &[])?.cls)
    }

    /// Runs the text tower on `[e_0, W_0 + pos, P^t]` and returns `e_K`.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        eos: Var,
        words: Option<Var>,
        prompts: &[Var],
    ) -> Result<Var> {
        self.check_prompts(tape, prompts, self.cfg.text_prompts, self.cfg.text_width)?;
        let (tokens, _, _) = self.run_tower(tape, &self.vars.text, eos, words, prompts, None)?;
        tape.slice_rows(tokens, 0, 1)
    }

    /// Text tower without prompts.
    pub fn encode_text_plain(&self, tape: &mut Tape, eos: Var, words: Option<Var>) -> Result<Var> {
        let (tokens, _, _) = self.run_tower(tape, &self.vars.text, eos, words, &[], None)?;
        tape.slice_rows(tokens, 0, 1)
    }

    /// `ImgProj` followed by row-wise L2 normalization.
    pub fn project_image(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let p = tape.matmul(rows, self.vars.vision.projection)?;
        tape.l2_normalize_rows(p)
    }

    /// `TextProj` followed by row-wise L2 normalization.
    pub fn project_text(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let p = tape.matmul(rows, self.vars.text.projection)?;
        tape.l2_normalize_rows(p)
    }

    /// Places a prompt set on the tape, as parameters or constants.
    pub fn prompt_vars(
        tape: &mut Tape,
        prompts: &PromptSet,
        trainable: bool,
    ) -> (Vec<Var>, Vec<Var>) {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let visual = prompts.visual.iter().map(&mut put).collect();
        let text = prompts.text.iter().map(&mut put).collect();
        (visual, text)
    }

    /// Re-runs the last image layer on a full token sequence (e.g. a modified `final_input`).
    pub fn image_final_layer(&self, tape: &mut Tape, tokens: Var) -> Result<LayerOutput> {
        let block = self.vars.vision.blocks.last().expect("depth >= 1");
        let mask = self.image_mask();
        layer_forward(tape, block, tokens, self.cfg.heads, mask.as_ref())
    }
}

/// Image embedding on plain values: `(c_0, E_0)`.
pub fn embed_image(
    image: &Image,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (c, e) = enc.embed_image(&mut tape, image)?;
    Ok((tape.value(c).clone(), tape.value(e).clone()))
}

/// Text embedding on plain values: `(e_0, W_0)`.
pub fn embed_text(
    ids: &[usize],
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let (e, w) = enc.embed_text(&mut tape, ids)?;
    Ok((tape.value(e).clone(), w.map(|w| tape.value(w).clone())))
}

/// Plain-value result of a prompted image pass: `(c_K, E_K, P~_K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePass {
    pub cls: Tensor,
    pub patches: Tensor,
    pub prompts: Option<Tensor>,
}

pub fn encode_image_prompted(
    class_token: &Tensor,
    patches: &Tensor,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<ImagePass> {
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let c = tape.constant(class_token.clone());
    let e = tape.constant(patches.clone());
    let (pv, _) = Encoder::prompt_vars(&mut tape, prompts, false);
    let out = enc.encode_image(&mut tape, c, e, &pv)?;
    Ok(ImagePass {
        cls: tape.value(out.cls).clone(),
        patches: tape.value(out.patches).clone(),
        prompts: out.prompts.map(|p| tape.value(p).clone()),
    })
}

pub fn encode_text_prompted(
    eos: &Tensor,
    words: Option<&Tensor>,
    prompts: &PromptSet,
    cfg: &ModelConfig,
    state: &EncoderState,
) -> Result<Tensor> {
    prompts.check(cfg)?;
    let mut tape = Tape::new();
    let enc = Encoder::new(&mut tape, cfg, state)?;
    let e = tape.constant(eos.clone());
    let w = words.map(|w| tape.constant(w.clone()));
    let (_, pt) = Encoder::prompt_vars(&mut tape, prompts, false);
    let out = enc.encode_text(&mut tape, e, w, &pt)?;
    Ok(tape.value(out).clone())
}

fn project_rows(rows: &Tensor, projection: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(rows.clone());
    let w = tape.constant(projection.clone());
    let p = tape.matmul(x, w)?;
    let n = tape.l2_normalize_rows(p)?;
    Ok(tape.value(n).clone())
}

/// `x_p`: projected, unit-norm global image representation.
pub fn project_global(cls: &Tensor, state: &EncoderState) -> Result<Vec<f64>> {
    Ok(project_rows(cls, &state.vision.projection)?.into_values())
}

/// `z_p`: projected, unit-norm text representation.
pub fn project_text(eos: &Tensor, state: &EncoderState) -> Result<Vec<f64>> {
    Ok(project_rows(eos, &state.text.projection)?.into_values())
}

/// Augmented representations: each prompt output row through the same image projection.
pub fn project_augmented(prompt_outputs: Option<&Tensor>, state: &EncoderState) -> Result<Tensor> {
    match prompt_outputs {
        Some(p) => project_rows(p, &state.vision.projection),
        None => Err(Error::NoVisualPrompts),
    }
}

/// `(Q, K, V)` of a layer applied to plain token values.
pub fn layer_qkv(block: &TransformerBlock, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let b = BlockVars::load(&mut tape, block);
    let x = tape.constant(tokens.clone());
    let h = tape.layer_norm(x, b.ln1.0, b.ln1.1)?;
    let mut out = Vec::with_capacity(3);
    for (w, bias) in [b.q, b.k, b.v] {
        let y = tape.matmul(h, w)?;
        let y = tape.add_row(y, bias)?;
        out.push(tape.value(y).clone());
    }
    let v = out.pop().expect("v");
    let k = out.pop().expect("k");
    let q = out.pop().expect("q");
    Ok((q, k, v))
}
