//! GPT-style causal transformer over token windows: learned content + absolute
//! position embeddings, post-norm residual blocks, logits at every position.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::model::{TokenizedWindow, TransformerConfig, TABLE_MASK};
use crate::optim::ParamStore;
use crate::rng::stream_rng;
use crate::tensor::tape::{causal_mask, Tape, TokenRow, Var};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

pub fn init_transformer(config: &TransformerConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = stream_rng(seed, 0x7f);
    let e = config.embed_dim;
    let mut p = ParamStore::new();
    let proj = |p: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        p.insert(name.clone(), Tensor::trunc_normal(&[rows, cols], INIT_STD, rng));
        p.insert(name.replace("weight", "bias"), Tensor::zeros(&[cols]));
    };
    p.insert("embed.obs", Tensor::trunc_normal(&[config.obs_vocab, e], INIT_STD, &mut rng));
    p.insert("embed.action", Tensor::trunc_normal(&[config.num_actions, e], INIT_STD, &mut rng));
    p.insert("embed.reward", Tensor::trunc_normal(&[config.num_rewards, e], INIT_STD, &mut rng));
    p.insert("embed.mask", Tensor::trunc_normal(&[1, e], INIT_STD, &mut rng));
    p.insert("embed.pos", Tensor::trunc_normal(&[config.max_tokens(), e], INIT_STD, &mut rng));
    for i in 0..config.num_layers {
        for part in ["wq", "wk", "wv", "wo"] {
            p.insert(
                format!("blocks.{i}.attn.{part}.weight"),
                Tensor::trunc_normal(&[e, e], INIT_STD, &mut rng),
            );
            p.insert(format!("blocks.{i}.attn.{part}.bias"), Tensor::zeros(&[e]));
        }
        p.insert(format!("blocks.{i}.ln1.gain"), Tensor::ones(&[e]));
        p.insert(format!("blocks.{i}.ln1.bias"), Tensor::zeros(&[e]));
        proj(&mut p, format!("blocks.{i}.ff.w1.weight"), e, config.ff_dim, &mut rng);
        proj(&mut p, format!("blocks.{i}.ff.w2.weight"), config.ff_dim, e, &mut rng);
        p.insert(format!("blocks.{i}.ln2.gain"), Tensor::ones(&[e]));
        p.insert(format!("blocks.{i}.ln2.bias"), Tensor::zeros(&[e]));
    }
    proj(&mut p, "head.weight".to_string(), e, config.num_actions, &mut rng);
    Ok(p)
}

/// Exact parameter total as a closed form over the config.
pub fn count_params(config: &TransformerConfig) -> usize {
    let e = config.embed_dim;
    let f = config.ff_dim;
    let a = config.num_actions;
    let embeddings =
        config.obs_vocab * e + a * e + config.num_rewards * e + e + config.max_tokens() * e;
    let attn = 4 * (e * e + e);
    let norms = 2 * (2 * e);
    let ff = e * f + f + f * e + e;
    let per_block = attn + norms + ff;
    let head = e * a + a;
    embeddings + config.num_layers * per_block + head
}

/// A completed forward pass: the tape (for backprop), per-position action
/// logits, and per-layer/head attention weight nodes.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Layer-major, head-minor attention probability matrices [L, L].
    pub attention: Vec<Var>,
}

fn dropout_mask(len: usize, keep_prob: f32, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f32>() < keep_prob).collect()
}

/// Forward through the transformer. Dropout fires only when `train_mode`
/// and draws from its own per-call rng stream; eval passes are pure
/// functions of (params, tokens).
pub fn forward(
    params: &ParamStore,
    config: &TransformerConfig,
    window: &TokenizedWindow,
    train_mode: bool,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<ForwardPass> {
    let l = window.len();
    if l == 0 {
        return Err(contract("empty token window"));
    }
    if l > config.max_tokens() {
        return Err(contract(format!(
            "sequence of {l} tokens exceeds trained window {}",
            config.max_tokens()
        )));
    }
    let rng = if train_mode {
        if dropout_rng.is_none() {
            return Err(contract("train-mode forward needs a dropout rng"));
        }
        dropout_rng
    } else {
        None
    };

    let rows: Vec<TokenRow> = window
        .tokens
        .iter()
        .zip(&window.masked)
        .map(|(t, &m)| {
            if m {
                TokenRow { table: TABLE_MASK, token: 0 }
            } else {
                TokenRow { table: t.table, token: t.id }
            }
        })
        .collect();

    let mut tape = Tape::new();
    let tables = vec![
        tape.param("embed.obs", params.share("embed.obs")),
        tape.param("embed.action", params.share("embed.action")),
        tape.param("embed.reward", params.share("embed.reward")),
        tape.param("embed.mask", params.share("embed.mask")),
    ];
    let pos = tape.param("embed.pos", params.share("embed.pos"));
    let mut x = tape.embed_tokens(tables, pos, Arc::new(rows));

    let mask = causal_mask(l);
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut rng = rng;
    let mut attention = Vec::with_capacity(config.num_layers * config.num_heads);
    for i in 0..config.num_layers {
        let name = |part: &str| format!("blocks.{i}.{part}");
        let lin = |tape: &mut Tape, x: Var, part: &str| {
            let w = tape.param(&name(part), params.share(&name(part)));
            let b_name = name(part).replace("weight", "bias");
            let b = tape.param(&b_name, params.share(&b_name));
            let y = tape.matmul(x, w);
            tape.add_bias(y, b)
        };
        let q = lin(&mut tape, x, "attn.wq.weight");
        let k = lin(&mut tape, x, "attn.wk.weight");
        let v = lin(&mut tape, x, "attn.wv.weight");
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let qh = tape.cols(q, h * hd, hd);
            let kh = tape.cols(k, h * hd, hd);
            let vh = tape.cols(v, h * hd, hd);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let mut probs = tape.softmax_rows(scores, Some(Arc::clone(&mask)));
            attention.push(probs);
            if let Some(r) = rng.as_mut() {
                if config.attention_dropout > 0.0 {
                    let keep = 1.0 - config.attention_dropout;
                    probs = tape.dropout(probs, dropout_mask(l * l, keep, r), keep);
                }
            }
            heads.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(heads);
        let mut attn_out = lin(&mut tape, merged, "attn.wo.weight");
        if let Some(r) = rng.as_mut() {
            if config.dropout > 0.0 {
                let keep = 1.0 - config.dropout;
                attn_out = tape.dropout(attn_out, dropout_mask(l * config.embed_dim, keep, r), keep);
            }
        }
        let summed = tape.add(x, attn_out);
        let g1 = tape.param(&name("ln1.gain"), params.share(&name("ln1.gain")));
        let b1 = tape.param(&name("ln1.bias"), params.share(&name("ln1.bias")));
        x = tape.layer_norm(summed, g1, b1, LN_EPS);

        let ff = lin(&mut tape, x, "ff.w1.weight");
        let ff = tape.gelu(ff);
        let mut ff = lin(&mut tape, ff, "ff.w2.weight");
        if let Some(r) = rng.as_mut() {
            if config.dropout > 0.0 {
                let keep = 1.0 - config.dropout;
                ff = tape.dropout(ff, dropout_mask(l * config.embed_dim, keep, r), keep);
            }
        }
        let summed = tape.add(x, ff);
        let g2 = tape.param(&name("ln2.gain"), params.share(&name("ln2.gain")));
        let b2 = tape.param(&name("ln2.bias"), params.share(&name("ln2.bias")));
        x = tape.layer_norm(summed, g2, b2, LN_EPS);
    }
    let w = tape.param("head.weight", params.share("head.weight"));
    let b = tape.param("head.bias", params.share("head.bias"));
    let logits = tape.matmul(x, w);
    let logits = tape.add_bias(logits, b);
    Ok(ForwardPass { tape, logits, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvId;
    use crate::history::{obs_from, Transition};
    use crate::model::tokenize;
    use crate::rng::stream_rng;

    fn small_config() -> TransformerConfig {
        TransformerConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 32,
            ..TransformerConfig::for_env(EnvId::DarkRoom, 4)
        }
    }

    fn window(cfg: &TransformerConfig, n: usize, seed: u64) -> TokenizedWindow {
        let mut rng = stream_rng(seed, 1);
        let ts: Vec<Transition> = (0..n)
            .map(|i| Transition {
                observation: obs_from(&[rng.gen_range(0..9), rng.gen_range(0..9)]),
                action: rng.gen_range(0..5),
                reward: f32::from(u8::from(rng.gen_bool(0.2))),
                episode_start: i == 0,
            })
            .collect();
        tokenize(&ts, None, None, cfg).unwrap()
    }

    #[test]
    fn count_matches_enumeration() {
        let cfg = small_config();
        let params = init_transformer(&cfg, 0).unwrap();
        assert_eq!(params.total_params(), count_params(&cfg));
        // Published defaults too.
        let cfg = TransformerConfig::for_env(EnvId::DarkRoom, 80);
        let params = init_transformer(&cfg, 0).unwrap();
        assert_eq!(params.total_params(), count_params(&cfg));
    }

    #[test]
    fn count_is_linear_in_depth() {
        let cfg = small_config();
        let mut deeper = cfg.clone();
        deeper.num_layers = 4;
        let per_block = (count_params(&deeper) - count_params(&cfg)) / 2;
        let mut even_deeper = cfg.clone();
        even_deeper.num_layers = 6;
        assert_eq!(count_params(&even_deeper), count_params(&cfg) + 4 * per_block);
        let mut wider = cfg.clone();
        wider.embed_dim = 32;
        assert!(count_params(&wider) > count_params(&cfg));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_config();
        let params = init_transformer(&cfg, 3).unwrap();
        let w = window(&cfg, 4, 9);
        let a = forward(&params, &cfg, &w, false, None).unwrap();
        let b = forward(&params, &cfg, &w, false, None).unwrap();
        assert_eq!(a.tape.value(a.logits).data, b.tape.value(b.logits).data);
        assert!(a.tape.value(a.logits).is_finite());
    }

    #[test]
    fn logits_are_causal() {
        // Perturbing tokens after position p leaves logits at p unchanged.
        let cfg = small_config();
        let params = init_transformer(&cfg, 5).unwrap();
        let w = window(&cfg, 4, 11);
        let full = forward(&params, &cfg, &w, false, None).unwrap();
        let p = 5usize; // probe position
        let mut perturbed = w.clone();
        for t in 7..perturbed.tokens.len() {
            perturbed.tokens[t] = crate::model::Token { table: crate::model::TABLE_ACTION, id: 1 };
        }
        let half = forward(&params, &cfg, &perturbed, false, None).unwrap();
        let a = &full.tape.value(full.logits).data[p * cfg.num_actions..(p + 1) * cfg.num_actions];
        let b = &half.tape.value(half.logits).data[p * cfg.num_actions..(p + 1) * cfg.num_actions];
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_stochastic_lower_triangular() {
        let cfg = small_config();
        let params = init_transformer(&cfg, 7).unwrap();
        let w = window(&cfg, 4, 13);
        let l = w.len();
        let fwd = forward(&params, &cfg, &w, false, None).unwrap();
        assert_eq!(fwd.attention.len(), cfg.num_layers * cfg.num_heads);
        for &probs in &fwd.attention {
            let m = fwd.tape.value(probs);
            for i in 0..l {
                let row_sum: f64 = m.data[i * l..(i + 1) * l].iter().map(|&v| f64::from(v)).sum();
                assert!((row_sum - 1.0).abs() < 1e-5, "row {i} sums to {row_sum}");
                for j in (i + 1)..l {
                    assert_eq!(m.data[i * l + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_tokens_change_the_output() {
        let cfg = small_config();
        let params = init_transformer(&cfg, 9).unwrap();
        let w = window(&cfg, 4, 17);
        let mut masked = w.clone();
        masked.masked[1] = true;
        let a = forward(&params, &cfg, &w, false, None).unwrap();
        let b = forward(&params, &cfg, &masked, false, None).unwrap();
        assert_ne!(
            a.tape.value(a.logits).data,
            b.tape.value(b.logits).data,
            "mask substitution must alter downstream logits"
        );
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let cfg = small_config();
        let params = init_transformer(&cfg, 9).unwrap();
        let w = window(&cfg, 6, 17); // 18 tokens > 3*4 + 1
        assert!(forward(&params, &cfg, &w, false, None).is_err());
    }

    #[test]
    fn softmax_over_action_logits_is_a_distribution() {
        let cfg = small_config();
        let params = init_transformer(&cfg, 21).unwrap();
        let w = window(&cfg, 3, 23);
        let fwd = forward(&params, &cfg, &w, false, None).unwrap();
        let logits = fwd.tape.value(fwd.logits);
        for i in 0..w.len() {
            let row = &logits.data[i * cfg.num_actions..(i + 1) * cfg.num_actions];
            let lse = crate::tensor::log_sum_exp(row);
            let sum: f64 = row.iter().map(|&z| (f64::from(z) - lse).exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
