//! Toy decoder-only language model: word-level vocabulary, learned
//! positional embeddings, pre-norm single-head transformer blocks, and
//! low-rank adapters on the attention projections.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use numcore::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::lca::{build_lca_mask, TokenEntry, TokenKind, TokenSequence};
use crate::params::{Ctx, Init, ParamSpec};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOA: usize = 2;
pub const SEG: usize = 3;
pub const T1T2: usize = 4;
pub const T2T3: usize = 5;
pub const Q: usize = 6;
pub const A: usize = 7;

pub const RESERVED: [&str; 8] = ["<pad>", "<unk>", "<eoa>", "[SEG]", "<T1T2>", "<T2T3>", "<q>", "<a>"];

const ATTACH_LEFT: &str = ",.:;?%)";

/// Splits text into word tokens; digits and punctuation become single tokens
/// and bracketed specials such as `[SEG]` or `<eoa>` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if RESERVED.contains(&word) {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphabetic() || ch == '-' || ch == '_' || ch == '\'' {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_digit_token(t: &str) -> bool {
    t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
}

/// Inverse of [`tokenize`] for text produced by the dataset templates.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    let mut prev2: Option<&str> = None;
    for t in tokens.iter().map(AsRef::as_ref) {
        let glue = match prev {
            None => true,
            Some(p) => {
                (t.len() == 1 && ATTACH_LEFT.contains(t))
                    || p == "("
                    || (is_digit_token(p) && is_digit_token(t))
                    || (p == "." && is_digit_token(t) && prev2.is_some_and(is_digit_token))
            }
        };
        if !glue {
            out.push(' ');
        }
        out.push_str(t);
        prev2 = prev;
        prev = Some(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved entries first, then every token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Vocab::from_tokens(tokens).expect("reserved prefix")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(ModelError::Config(format!(
                    "vocabulary entry {i} must be {r}"
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(ModelError::Config("duplicate vocabulary entries".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        detokenize(&toks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let s = fs::read_to_string(path)?;
        Vocab::from_tokens(s.lines().map(str::to_string).collect())
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (l, f, v) = (cfg.lm_width, cfg.lm_ffn, cfg.vocab_size);
    let mut specs = vec![
        ParamSpec::new("lm.tok_emb", &[v, l], Init::Uniform(1.0)),
        ParamSpec::new("lm.pos_emb", &[cfg.max_seq, l], Init::Uniform(0.1)),
    ];
    for b in 1..=cfg.lm_layers {
        let p = format!("lm.b{b}");
        for ln in ["ln1", "ln2"] {
            specs.push(ParamSpec::new(format!("{p}.{ln}.g"), &[l], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.{ln}.b"), &[l], Init::Zeros));
        }
        for m in ["wq", "wk", "wv", "wo"] {
            specs.push(ParamSpec::linear(format!("{p}.attn.{m}"), l, l));
        }
        specs.push(ParamSpec::linear(format!("{p}.mlp.w1"), l, f));
        specs.push(ParamSpec::new(format!("{p}.mlp.b1"), &[f], Init::Zeros));
        specs.push(ParamSpec::linear(format!("{p}.mlp.w2"), f, l));
        specs.push(ParamSpec::new(format!("{p}.mlp.b2"), &[l], Init::Zeros));
    }
    specs.push(ParamSpec::new("lm.ln_f.g", &[l], Init::Ones));
    specs.push(ParamSpec::new("lm.ln_f.b", &[l], Init::Zeros));
    specs.push(ParamSpec::linear("lm.head", l, v));
    specs
}

pub fn lora_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (l, r) = (cfg.lm_width, cfg.lora_rank);
    let mut specs = Vec::new();
    for b in 1..=cfg.lm_layers {
        for m in ["q", "k", "v", "o"] {
            let p = format!("lora.b{b}.{m}");
            specs.push(ParamSpec::linear(format!("{p}.a"), l, r));
            specs.push(ParamSpec::new(format!("{p}.b"), &[r, l], Init::Zeros));
        }
    }
    specs
}

/// One contiguous piece of the LM input.
#[derive(Clone, Debug)]
pub enum InputPart {
    /// `[n, C_llm]` visual tokens with their phases.
    Visual(Var, Vec<usize>),
    Prompt(Var),
    Change(Var),
    Text(Vec<usize>),
}

#[derive(Clone, Debug, Default)]
pub struct LmInput {
    pub parts: Vec<InputPart>,
}

impl LmInput {
    pub fn token_sequence(&self, ctx: &Ctx) -> TokenSequence {
        let mut seq = TokenSequence::new();
        for part in &self.parts {
            match part {
                InputPart::Visual(_, phases) => seq.extend_visual(phases),
                InputPart::Prompt(v) => seq.extend_kind(TokenKind::Prompt, ctx.g.shape(*v)[0]),
                InputPart::Change(v) => seq.extend_kind(TokenKind::Change, ctx.g.shape(*v)[0]),
                InputPart::Text(ids) => seq.entries.extend(ids.iter().map(|&i| {
                    TokenEntry::of(if i == SEG { TokenKind::Seg } else { TokenKind::Text })
                })),
            }
        }
        seq
    }

    /// Text ids laid out at their absolute positions (`None` for embedded tokens).
    pub fn text_at_positions(&self, ctx: &Ctx) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for part in &self.parts {
            match part {
                InputPart::Text(ids) => out.extend(ids.iter().map(|&i| Some(i))),
                InputPart::Visual(v, _) | InputPart::Prompt(v) | InputPart::Change(v) => {
                    out.extend(std::iter::repeat(None).take(ctx.g.shape(*v)[0]))
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LmOutput {
    /// Post-final-norm hidden states `[n, C_llm]`.
    pub hidden: Var,
    /// `[rows.len(), V]` logits at the requested rows.
    pub logits: Option<Var>,
    /// Attention weights `[n, n]` per block.
    pub attention: Vec<Var>,
    pub sequence: TokenSequence,
}

fn norm_affine(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let n = ctx.g.layer_norm(x, 1e-5)?;
    let (g, b) = (ctx.p(&format!("{prefix}.g"))?, ctx.p(&format!("{prefix}.b"))?);
    let n = ctx.g.mul(n, g)?;
    Ok(ctx.g.add(n, b)?)
}

fn adapted(ctx: &mut Ctx, x: Var, block: usize, m: &str, scale: f64) -> Result<Var> {
    let w = ctx.p(&format!("lm.b{block}.attn.w{m}"))?;
    let base = ctx.g.matmul(x, w)?;
    let a_name = format!("lora.b{block}.{m}.a");
    if scale == 0.0 || !ctx.store().contains(&a_name) {
        return Ok(base);
    }
    let a = ctx.p(&a_name)?;
    let b = ctx.p(&format!("lora.b{block}.{m}.b"))?;
    let low = ctx.g.matmul(x, a)?;
    let low = ctx.g.matmul(low, b)?;
    let low = ctx.g.scale(low, scale)?;
    Ok(ctx.g.add(base, low)?)
}

/// Embeds the input, runs every block under the local causal mask (plain
/// causal when `phase_aware` is off) and returns hidden states plus head
/// logits at `logit_rows`.
pub fn lm_forward(
    ctx: &mut Ctx,
    input: &LmInput,
    logit_rows: &[usize],
    cfg: &ModelConfig,
    phase_aware: bool,
) -> Result<LmOutput> {
    let sequence = input.token_sequence(ctx);
    let n = sequence.len();
    if n > cfg.max_seq {
        return Err(ModelError::Capacity {
            len: n,
            max: cfg.max_seq,
        });
    }
    let mask = build_lca_mask(&sequence, phase_aware)?;
    let tok_emb = ctx.p("lm.tok_emb")?;
    let mut pieces = Vec::with_capacity(input.parts.len());
    for part in &input.parts {
        pieces.push(match part {
            InputPart::Visual(v, _) | InputPart::Prompt(v) | InputPart::Change(v) => *v,
            InputPart::Text(ids) => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
                    return Err(ModelError::Input(format!(
                        "token id {bad} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                ctx.g.gather_rows(tok_emb, ids)?
            }
        });
    }
    let x = if pieces.len() == 1 {
        pieces[0]
    } else {
        ctx.g.concat(&pieces, 0)?
    };
    let pos = ctx.p("lm.pos_emb")?;
    let pos = ctx.g.narrow(pos, 0, 0, n)?;
    let mut x = ctx.g.add(x, pos)?;
    let l = cfg.lm_width;
    let mut attention = Vec::with_capacity(cfg.lm_layers);
    for b in 1..=cfg.lm_layers {
        let h = norm_affine(ctx, x, &format!("lm.b{b}.ln1"))?;
        let q = adapted(ctx, h, b, "q", cfg.lora_scale)?;
        let k = adapted(ctx, h, b, "k", cfg.lora_scale)?;
        let v = adapted(ctx, h, b, "v", cfg.lora_scale)?;
        let kt = ctx.g.transpose(k)?;
        let s = ctx.g.matmul(q, kt)?;
        let s = ctx.g.scale(s, 1.0 / (l as f64).sqrt())?;
        let a = ctx.g.softmax(s, 1, Some(&mask))?;
        let o = ctx.g.matmul(a, v)?;
        let o = adapted(ctx, o, b, "o", cfg.lora_scale)?;
        x = ctx.g.add(x, o)?;
        attention.push(a);
        let h = norm_affine(ctx, x, &format!("lm.b{b}.ln2"))?;
        let p = format!("lm.b{b}.mlp");
        let (w1, b1) = (ctx.p(&format!("{p}.w1"))?, ctx.p(&format!("{p}.b1"))?);
        let (w2, b2) = (ctx.p(&format!("{p}.w2"))?, ctx.p(&format!("{p}.b2"))?);
        let h = ctx.g.linear(h, w1, Some(b1))?;
        let h = ctx.g.relu(h)?;
        let h = ctx.g.linear(h, w2, Some(b2))?;
        x = ctx.g.add(x, h)?;
    }
    let hidden = norm_affine(ctx, x, "lm.ln_f")?;
    let logits = if logit_rows.is_empty() {
        None
    } else {
        let rows = ctx.g.gather_rows(hidden, logit_rows)?;
        let head = ctx.p("lm.head")?;
        Some(ctx.g.matmul(rows, head)?)
    };
    Ok(LmOutput {
        hidden,
        logits,
        attention,
        sequence,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEvent {
    /// Absolute position of the `[SEG]` token in the final sequence.
    pub position: usize,
    /// 1-based phase pair.
    pub pair: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Generated ids, excluding the end-of-answer token.
    pub tokens: Vec<usize>,
    pub seg_events: Vec<SegEvent>,
    pub truncated: bool,
    /// Hidden states of the final full sequence, `[n, C_llm]`.
    pub hidden: Var,
}

/// Phase pairs of each `[SEG]` in `tokens`, following the most recent
/// transition marker; `(1, 2)` before any marker.
pub fn seg_pairs(tokens: &[usize]) -> Vec<(usize, (usize, usize))> {
    let mut pair = (1, 2);
    let mut out = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            T1T2 => pair = (1, 2),
            T2T3 => pair = (2, 3),
            SEG => out.push((i, pair)),
            _ => {}
        }
    }
    out
}

/// Greedy decoding until `<eoa>` or `max_new` tokens. The prefix must end
/// with a text part (normally `... <a>`).
pub fn generate(
    ctx: &mut Ctx,
    prefix: &LmInput,
    max_new: usize,
    cfg: &ModelConfig,
    phase_aware: bool,
) -> Result<Generation> {
    let mut input = prefix.clone();
    if !matches!(input.parts.last(), Some(InputPart::Text(_))) {
        input.parts.push(InputPart::Text(Vec::new()));
    }
    let start = input.token_sequence(ctx).len();
    let mut tokens = Vec::new();
    let mut truncated = true;
    for _ in 0..max_new {
        let n = start + tokens.len();
        if n >= cfg.max_seq {
            break;
        }
        let out = lm_forward(ctx, &input, &[n - 1], cfg, phase_aware)?;
        let logits = ctx.g.value(out.logits.expect("one row"));
        let next = argmax(logits.data());
        if next == EOA {
            truncated = false;
            break;
        }
        tokens.push(next);
        if let Some(InputPart::Text(ids)) = input.parts.last_mut() {
            ids.push(next);
        }
    }
    let out = lm_forward(ctx, &input, &[], cfg, phase_aware)?;
    let seg_events = seg_pairs(&tokens)
        .into_iter()
        .map(|(i, pair)| SegEvent {
            position: start + i,
            pair,
        })
        .collect();
    Ok(Generation {
        tokens,
        seg_events,
        truncated,
        hidden: out.hidden,
    })
}

/// First index of the maximum; ties resolve to the lowest id.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row `i` of a hidden-state matrix as a `[1, C_llm]` graph node.
pub fn hidden_row(ctx: &mut Ctx, hidden: Var, i: usize) -> Result<Var> {
    Ok(ctx.g.narrow(hidden, 0, i, 1)?)
}

pub fn text_tensor(ids: &[usize]) -> Tensor {
    Tensor::from_vec(ids.iter().map(|&i| i as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_round_trip() {
        for s in [
            "the area is 12.34% of the image.",
            "changed into water: 3 areas, mostly north-west",
            "<T1T2> [SEG] <eoa>",
            "(a) and (b)",
        ] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
        assert_eq!(tokenize("12.5%"), vec!["1", "2", ".", "5", "%"]);
    }

    #[test]
    fn vocab_reserved_indices() {
        let v = Vocab::build(["water tree", "tree"]);
        assert_eq!(v.id("[SEG]"), SEG);
        assert_eq!(v.id("<T2T3>"), T2T3);
        assert_eq!(v.id("tree"), 8);
        assert_eq!(v.id("water"), 9);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.decode(&v.encode("tree water")), "tree water");
    }

    #[test]
    fn seg_pairs_follow_markers() {
        assert_eq!(seg_pairs(&[10, SEG]), vec![(1, (1, 2))]);
        assert_eq!(
            seg_pairs(&[T1T2, SEG, 10, T2T3, SEG]),
            vec![(1, (1, 2)), (4, (2, 3))]
        );
    }
}
