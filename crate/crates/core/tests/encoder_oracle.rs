//! The image and text towers against a from-scratch loop implementation that
//! shares no code with the library's tape.

use prompt_lab::encoders::{
    build_prompt_mask, embed_image, embed_text, encode_image_prompted, encode_text_prompted,
    layer_qkv, project_global, EncoderState, ModelConfig, PromptSet, TransformerBlock,
};
use prompt_lab::image::Image;
use prompt_lab::numerics::{masked_attention, AttentionMask, Tensor};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Tensor) -> Mat {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &Mat, b: &Tensor) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b.values()).map(|(x, y)| x + y).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn layer_norm(a: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.values()[j] + b.values()[j])
                .collect()
        })
        .collect()
}

/// Blocked keys are dropped from the softmax outright.
fn attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    blocked: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let open: Vec<usize> = (0..k.len()).filter(|&j| !blocked(i, j)).collect();
            let scores: Vec<f64> = open
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&open) {
                for c in cols.clone() {
                    out[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    out
}

fn block(
    x: &Mat,
    b: &TransformerBlock,
    heads: usize,
    blocked: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let h = layer_norm(x, &b.ln1_gamma, &b.ln1_beta);
    let q = add_bias(&matmul(&h, &b.w_q), &b.b_q);
    let k = add_bias(&matmul(&h, &b.w_k), &b.b_k);
    let v = add_bias(&matmul(&h, &b.w_v), &b.b_v);
    let a = attention(&q, &k, &v, heads, blocked);
    let x1 = add(x, &add_bias(&matmul(&a, &b.w_o), &b.b_o));
    let h2 = layer_norm(&x1, &b.ln2_gamma, &b.ln2_beta);
    let f = add_bias(&matmul(&h2, &b.w_fc1), &b.b_fc1);
    let f: Mat = f
        .iter()
        .map(|r| r.iter().map(|&v| v / (1.0 + (-1.702 * v).exp())).collect())
        .collect();
    add(&x1, &add_bias(&matmul(&f, &b.w_fc2), &b.b_fc2))
}

/// `[head, body + pos, prompts_0]`, prompts swapped for `prompts_i` before layer `i < depth`.
fn tower(
    head: Mat,
    body: Mat,
    pos: &Tensor,
    prompts: &[Tensor],
    blocks: &[TransformerBlock],
    heads: usize,
    mask_prompts: bool,
) -> Mat {
    let body = add(&body, &mat(pos)[..body.len()].to_vec());
    let fixed = 1 + body.len();
    let p = prompts.first().map(|t| t.rows()).unwrap_or(0);
    let mut x: Mat = head.into_iter().chain(body).collect();
    if let Some(first) = prompts.first() {
        x.extend(mat(first));
    }
    let blocked = |i: usize, j: usize| mask_prompts && i >= fixed && j >= fixed && i != j;
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 && i < prompts.len() {
            x.truncate(fixed);
            x.extend(mat(&prompts[i]));
        }
        assert_eq!(x.len(), fixed + p);
        x = block(&x, b, heads, &blocked);
    }
    x
}

fn config(prompt_depth: usize, mask_prompts: bool) -> ModelConfig {
    ModelConfig {
        vision_width: 8,
        text_width: 8,
        shared_width: 4,
        depth: 2,
        heads: 2,
        patch_grid: (2, 2),
        image_size: 4,
        vocab_size: 6,
        context_length: 4,
        text_prompts: 2,
        visual_prompts: 3,
        prompt_depth,
        mask_prompts,
        ..ModelConfig::default()
    }
}

fn image(seed: u64) -> Image {
    Image::new(
        4,
        (0..16)
            .map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin())
            .collect(),
    )
    .unwrap()
}

fn close(a: &Mat, b: &Tensor, tol: f64) {
    assert_eq!((a.len(), a[0].len()), b.dims());
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!(
                (v - b.get(r, c)).abs() < tol,
                "({r},{c}): {v} vs {}",
                b.get(r, c)
            );
        }
    }
}

#[test]
fn patch_embedding_is_a_linear_map_of_row_major_patches() {
    let cfg = config(2, true);
    let state = EncoderState::random(&cfg, 4).unwrap();
    let img = image(1);
    let (cls, e) = embed_image(&img, &cfg, &state).unwrap();
    assert_eq!(cls, state.vision.class_token);
    // Patch (0, 1) covers rows 0..2, columns 2..4.
    let patch = [img.get(0, 2), img.get(0, 3), img.get(1, 2), img.get(1, 3)];
    for j in 0..cfg.vision_width {
        let want: f64 = patch
            .iter()
            .enumerate()
            .map(|(k, p)| p * state.vision.patch_proj.get(k, j))
            .sum::<f64>()
            + state.vision.patch_bias.values()[j];
        assert!((e.get(1, j) - want).abs() < 1e-14);
    }
}

#[test]
fn image_tower_matches_loop_oracle() {
    for (depth, mask) in [(1, false), (2, false), (1, true), (2, true)] {
        let cfg = config(depth, mask);
        let state = EncoderState::random(&cfg, 9).unwrap();
        let mut prompts = PromptSet::init(&cfg, 2).unwrap();
        let big: Vec<f64> = prompts.flat_values().iter().map(|v| v * 40.0).collect();
        prompts.set_flat_values(&big).unwrap();
        let (cls, e) = embed_image(&image(3), &cfg, &state).unwrap();
        let got = encode_image_prompted(&cls, &e, &prompts, &cfg, &state).unwrap();
        let want = tower(
            mat(&cls),
            mat(&e),
            &state.vision.positions,
            &prompts.visual,
            &state.vision.blocks,
            cfg.heads,
            mask,
        );
        close(&want[..1].to_vec(), &got.cls, 1e-10);
        close(&want[1..5].to_vec(), &got.patches, 1e-10);
        close(&want[5..].to_vec(), got.prompts.as_ref().unwrap(), 1e-10);
    }
}

#[test]
fn text_tower_matches_loop_oracle_and_is_never_masked() {
    let cfg = config(2, true);
    let state = EncoderState::random(&cfg, 9).unwrap();
    let prompts = PromptSet::init(&cfg, 2).unwrap();
    let ids = [0, 4, 2];
    let (eos, words) = embed_text(&ids, &cfg, &state).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(
            words.as_ref().unwrap().row_slice(r),
            state.text.token_embedding.row_slice(id)
        );
    }
    let got = encode_text_prompted(&eos, words.as_ref(), &prompts, &cfg, &state).unwrap();
    let want = tower(
        mat(&eos),
        mat(words.as_ref().unwrap()),
        &state.text.positions,
        &prompts.text,
        &state.text.blocks,
        cfg.heads,
        false,
    );
    close(&want[..1].to_vec(), &got, 1e-10);
}

#[test]
fn projection_is_unit_norm_linear_map() {
    let cfg = config(2, true);
    let state = EncoderState::random(&cfg, 9).unwrap();
    let cls = Tensor::row(vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.5, -0.75, 0.1]).unwrap();
    let x = project_global(&cls, &state).unwrap();
    let raw = matmul(&mat(&cls), &state.vision.projection);
    let n = raw[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    for (a, b) in x.iter().zip(&raw[0]) {
        assert!((a - b / n).abs() < 1e-14);
    }
}

fn vision_qkv(
    cfg: &ModelConfig,
    state: &EncoderState,
    prompt_seed: u64,
) -> (Tensor, Tensor, Tensor) {
    let prompts = PromptSet::init(cfg, prompt_seed).unwrap();
    let (cls, e) = embed_image(&image(prompt_seed), cfg, state).unwrap();
    let mut rows = mat(&cls);
    rows.extend(add(&mat(&e), &mat(&state.vision.positions)));
    rows.extend(
        mat(&prompts.visual[0])
            .into_iter()
            .map(|r| r.iter().map(|v| v * 50.0).collect::<Vec<_>>()),
    );
    layer_qkv(&state.vision.blocks[0], &Tensor::from_rows(&rows).unwrap()).unwrap()
}

fn zero_rows(t: &Tensor, rows: impl Iterator<Item = usize>) -> Tensor {
    let mut t = t.clone();
    let c = t.cols();
    for r in rows {
        t.values_mut()[r * c..(r + 1) * c].fill(0.0);
    }
    t
}

#[test]
fn masked_prompt_ignores_other_prompts_exactly() {
    let cfg = config(2, true);
    let state = EncoderState::random(&cfg, 5).unwrap();
    let (q, k, v) = vision_qkv(&cfg, &state, 6);
    let n = cfg.image_tokens();
    let first = n - cfg.visual_prompts;
    let mask = build_prompt_mask(cfg.visual_prompts, n);
    let base = masked_attention(&q, &k, &v, Some(&mask), cfg.heads).unwrap();
    for p in first..n {
        let others = || (first..n).filter(move |&j| j != p);
        let k2 = zero_rows(&k, others());
        let v2 = zero_rows(&v, others());
        let out = masked_attention(&q, &k2, &v2, Some(&mask), cfg.heads).unwrap();
        assert_eq!(out.row_slice(p), base.row_slice(p), "prompt row {p}");
    }
    // Without the mask the same perturbation does move the prompt outputs.
    let open = masked_attention(&q, &k, &v, None, cfg.heads).unwrap();
    let k2 = zero_rows(&k, first + 1..n);
    let moved = masked_attention(&q, &k2, &v, None, cfg.heads).unwrap();
    assert_ne!(moved.row_slice(first), open.row_slice(first));
}

#[test]
fn class_row_and_column_are_never_masked() {
    for (p, n) in [(0, 1), (1, 5), (3, 8), (32, 49)] {
        let mask = build_prompt_mask(p, n);
        assert!((0..n).all(|j| !mask.is_blocked(0, j) && !mask.is_blocked(j, 0)));
        assert_eq!(mask.count_blocked(), p * p.saturating_sub(1));
        assert_eq!(mask.first_fully_blocked_row(), None);
    }
    // 3 prompts among 8 tokens: the 6 ordered prompt pairs.
    assert_eq!(build_prompt_mask(3, 8).count_blocked(), 6);
}

#[test]
fn all_false_mask_is_bit_identical_to_no_mask() {
    let cfg = config(2, true);
    let state = EncoderState::random(&cfg, 5).unwrap();
    let (q, k, v) = vision_qkv(&cfg, &state, 3);
    let open = AttentionMask::unmasked(q.rows());
    assert_eq!(
        masked_attention(&q, &k, &v, Some(&open), cfg.heads).unwrap(),
        masked_attention(&q, &k, &v, None, cfg.heads).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn non_prompt_rows_ignore_the_mask(seed in 0u64..1000) {
        let cfg = config(2, true);
        let state = EncoderState::random(&cfg, seed).unwrap();
        let (q, k, v) = vision_qkv(&cfg, &state, seed + 1);
        let n = cfg.image_tokens();
        let first = n - cfg.visual_prompts;
        let mask = build_prompt_mask(cfg.visual_prompts, n);
        let masked = masked_attention(&q, &k, &v, Some(&mask), cfg.heads).unwrap();
        let open = masked_attention(&q, &k, &v, None, cfg.heads).unwrap();
        for r in 0..first {
            prop_assert_eq!(masked.row_slice(r), open.row_slice(r));
        }
    }
}
