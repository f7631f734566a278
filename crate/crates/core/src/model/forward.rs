use rand_chacha::ChaCha8Rng;

use crate::error::{NestError, Result};
use crate::model::config::Architecture;
use crate::model::input::BatchInput;
use crate::model::weights::{BlockParams, ModelWeights};
use crate::numerics::{lit, AttentionSpec, Scalar, Tape, Var};

/// Source of dropout noise; `None` runs the model deterministically.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn check_batch<T: Scalar>(w: &ModelWeights<T>, input: &BatchInput) -> Result<()> {
    let cfg = &w.config;
    if input.n != cfg.n || input.m != cfg.m {
        return Err(NestError::Dimension(format!(
            "batch grid {}x{} differs from configured {}x{}",
            input.m, input.n, cfg.m, cfg.n
        )));
    }
    let rows = input.rows();
    if input.tokens.len() != rows
        || input.token_valid.len() != rows
        || input.set_valid.len() != input.batch * input.m
        || input.set_times.len() != input.batch * input.m
    {
        return Err(NestError::Dimension("batch arrays disagree with batch × m × n".into()));
    }
    Ok(())
}

/// One pre-norm block: attention and SwiGLU, each with a residual connection.
/// `positions` switches on rotary encoding of queries and keys.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    block: &BlockParams,
    x: Var,
    spec: AttentionSpec,
    positions: Option<&[f64]>,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    let cfg = &w.config;
    let p = &w.params;
    let gain = tape.param(p, block.norm_attn);
    let h = tape.layer_norm(x, gain)?;
    let (wq, wk, wv, wo) = (
        tape.param(p, block.w_q),
        tape.param(p, block.w_k),
        tape.param(p, block.w_v),
        tape.param(p, block.w_o),
    );
    let mut q = tape.matmul(h, wq)?;
    let mut k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    if let Some(pos) = positions {
        q = tape.rope(q, pos, cfg.n_heads, cfg.rope_base)?;
        k = tape.rope(k, pos, cfg.n_heads, cfg.rope_base)?;
    }
    let a = tape.attention(q, k, v, spec)?;
    let mut o = tape.matmul(a, wo)?;
    if let Some(r) = rng.as_deref_mut() {
        o = tape.dropout(o, cfg.dropout, r);
    }
    let x = tape.add(x, o)?;
    let gain = tape.param(p, block.norm_ffn);
    let h = tape.layer_norm(x, gain)?;
    let (w_in, w_gate, w_out) = (
        tape.param(p, block.ffn_in),
        tape.param(p, block.ffn_gate),
        tape.param(p, block.ffn_out),
    );
    let mut f = tape.swiglu(h, w_in, w_gate, w_out)?;
    if let Some(r) = rng {
        f = tape.dropout(f, cfg.dropout, r);
    }
    tape.add(x, f)
}

/// Embeds tokens and adds each set's Time2Vec vector to its slots.
pub fn embed_input<T: Scalar>(tape: &mut Tape<T>, w: &ModelWeights<T>, input: &BatchInput) -> Result<Var> {
    check_batch(w, input)?;
    let table = tape.param(&w.params, w.embedding);
    let x = tape.embedding(table, &input.tokens)?;
    let times: Vec<f64> = input.set_times.iter().map(|t| t * w.config.time_scale).collect();
    let (omega, phi) = (tape.param(&w.params, w.t2v_omega), tape.param(&w.params, w.t2v_phi));
    let t2v = tape.time2vec(&times, omega, phi)?;
    let t2v = tape.scale(t2v, lit(w.config.t2v_scale));
    let t2v = tape.expand_rows(t2v, input.n, !w.config.t2v_on_cls);
    tape.add(x, t2v)
}

/// Set-wise encoder: attention within each set, no positional signal.
pub fn swe_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    layer: usize,
    x: Var,
    input: &BatchInput,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    let spec = AttentionSpec {
        n_heads: w.config.n_heads,
        group_len: input.n,
        key_valid: input.token_valid.clone(),
        group_active: input.set_valid.clone(),
    };
    block_forward(tape, w, &w.layers[layer].main, x, spec, None, rng)
}

/// Cross-set encoder over the `B·m` [CLS] states, rotary-encoded at the set index.
pub fn cse_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    layer: usize,
    cls: Var,
    input: &BatchInput,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    let block = w.layers[layer]
        .cross
        .as_ref()
        .ok_or_else(|| NestError::Config("dense weights have no cross-set blocks".into()))?;
    let spec = AttentionSpec {
        n_heads: w.config.n_heads,
        group_len: input.m,
        key_valid: input.set_valid.clone(),
        group_active: vec![true; input.batch],
    };
    let positions: Vec<f64> = (0..input.batch * input.m).map(|r| (r % input.m) as f64).collect();
    block_forward(tape, w, block, cls, spec, Some(&positions), rng)
}

/// SWE over every set, then CSE over the [CLS] slots; other slots bypass CSE.
pub fn nest_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    layer: usize,
    x: Var,
    input: &BatchInput,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    let y = swe_forward(tape, w, layer, x, input, rng.as_deref_mut())?;
    let rows = input.cls_rows();
    let cls = tape.gather_rows(y, &rows)?;
    let cls = cse_forward(tape, w, layer, cls, input, rng)?;
    tape.scatter_rows(y, cls, &rows)
}

/// Hierarchical encoder; returns `B·m·n × d_model` hidden states after the
/// final LayerNorm.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    input: &BatchInput,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    if w.arch != Architecture::Nest {
        return Err(NestError::Config("encode needs hierarchical weights".into()));
    }
    let mut x = embed_input(tape, w, input)?;
    for l in 0..w.layers.len() {
        x = nest_layer_forward(tape, w, l, x, input, rng.as_deref_mut())?;
    }
    let gain = tape.param(&w.params, w.final_norm);
    tape.layer_norm(x, gain)
}

/// Flat baseline: dense attention over all `N = n·m` positions of each
/// subject with rotary encoding at the flat index.
pub fn flat_encode<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    input: &BatchInput,
    mut rng: DropoutRng<'_>,
) -> Result<Var> {
    if w.arch != Architecture::Dense {
        return Err(NestError::Config("flat_encode needs dense weights".into()));
    }
    let mut x = embed_input(tape, w, input)?;
    let len = input.n * input.m;
    let positions: Vec<f64> = (0..input.rows()).map(|r| (r % len) as f64).collect();
    for layer in &w.layers {
        let spec = AttentionSpec {
            n_heads: w.config.n_heads,
            group_len: len,
            key_valid: input.token_valid.clone(),
            group_active: vec![true; input.batch],
        };
        x = block_forward(tape, w, &layer.main, x, spec, Some(&positions), rng.as_deref_mut())?;
    }
    let gain = tape.param(&w.params, w.final_norm);
    tape.layer_norm(x, gain)
}

/// Runs whichever encoder matches the weights.
pub fn encode_any<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    input: &BatchInput,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    match w.arch {
        Architecture::Nest => encode(tape, w, input, rng),
        Architecture::Dense => flat_encode(tape, w, input, rng),
    }
}

/// Tied decoder: `hidden · embeddingᵀ` for the selected rows.
pub fn mlm_logits_tied<T: Scalar>(tape: &mut Tape<T>, w: &ModelWeights<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
    let h = tape.gather_rows(hidden, rows)?;
    let table = tape.param(&w.params, w.embedding);
    tape.matmul_nt(h, table)
}

/// MSM head logits `W2ᵀ·gelu(W1ᵀ·h)`; softmax of a row is the predicted
/// set distribution.
pub fn msm_head_logits<T: Scalar>(tape: &mut Tape<T>, w: &ModelWeights<T>, cls: Var) -> Result<Var> {
    let w1 = tape.param(&w.params, w.msm_w1);
    let w2 = tape.param(&w.params, w.msm_w2);
    let h = tape.matmul(cls, w1)?;
    let h = tape.gelu(h);
    tape.matmul(h, w2)
}

pub fn msm_head_forward<T: Scalar>(tape: &mut Tape<T>, w: &ModelWeights<T>, cls: Var) -> Result<Var> {
    let logits = msm_head_logits(tape, w, cls)?;
    tape.softmax_rows(logits, None)
}

/// Two-layer probe `P2ᵀ·gelu(P1ᵀ·h)` on given representations.
pub fn classification_probe<T: Scalar>(tape: &mut Tape<T>, w: &ModelWeights<T>, cls: Var) -> Result<Var> {
    let p1 = tape.param(&w.params, w.probe_p1);
    let p2 = tape.param(&w.params, w.probe_p2);
    let h = tape.matmul(cls, p1)?;
    let h = tape.gelu(h);
    tape.matmul(h, p2)
}

/// Hidden-state rows of each subject's last valid [CLS].
pub fn last_valid_cls_rows(input: &BatchInput) -> Result<Vec<usize>> {
    (0..input.batch)
        .map(|b| {
            let sets = &input.set_valid[b * input.m..(b + 1) * input.m];
            sets.iter()
                .rposition(|&v| v)
                .map(|i| input.cls_row(b, i))
                .ok_or_else(|| NestError::Input(format!("subject {b} has no valid set")))
        })
        .collect()
}

/// Probe logits per subject from the last valid set's [CLS] state.
pub fn probe_logits<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    hidden: Var,
    input: &BatchInput,
) -> Result<Var> {
    let rows = last_valid_cls_rows(input)?;
    let cls = tape.gather_rows(hidden, &rows)?;
    classification_probe(tape, w, cls)
}
