//! Forward computation on the tape.
//!
//! `Bound` attaches a parameter set to a tape as leaves; every forward pass
//! (training and inference alike) goes through the same methods, so there is
//! exactly one implementation of each piece of model math.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{GaussianParams, LatentVector, ModelKind, ModelParams};
use crate::numerics::{Gradients, NodeId, Tape, Tensor};

/// Encoder side: prompts are always encodable; responses only exist on the
/// latent variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Prompt,
    Response,
}

impl Side {
    fn enc_prefixes(self) -> (&'static str, &'static str) {
        match self {
            Side::Prompt => ("enc_x_fw", "enc_x_bw"),
            Side::Response => ("enc_y_fw", "enc_y_bw"),
        }
    }

    fn repr_prefix(self) -> &'static str {
        match self {
            Side::Prompt => "repr_x",
            Side::Response => "repr_y",
        }
    }
}

/// One GRU cell's weights as plain tensors. W_* consume the input, U_* the
/// hidden state; b_* are biases.
#[derive(Debug, Clone)]
pub struct GruTensors {
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_u: Tensor,
    pub u_u: Tensor,
    pub b_u: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruTensors {
    pub fn zeros(input: usize, hidden: usize) -> GruTensors {
        let w = || Tensor::zeros(vec![hidden, input]).expect("positive dims");
        let u = || Tensor::zeros(vec![hidden, hidden]).expect("positive dims");
        let b = || Tensor::zeros(vec![hidden]).expect("positive dims");
        GruTensors {
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_u: w(),
            u_u: u(),
            b_u: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }
}

struct GruNodes {
    w_r: NodeId,
    u_r: NodeId,
    b_r: NodeId,
    w_u: NodeId,
    u_u: NodeId,
    b_u: NodeId,
    w_h: NodeId,
    u_h: NodeId,
    b_h: NodeId,
}

/// r = σ(W_r x + U_r h + b_r); u = σ(W_u x + U_u h + b_u);
/// h̃ = tanh(W_h x + U_h (r⊙h) + b_h); h' = u⊙h + (1−u)⊙h̃.
fn gru_step_on(tape: &mut Tape, g: &GruNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
    let gate = |tape: &mut Tape, w, u, b, hin| -> Result<NodeId> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, hin)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let pre_r = gate(tape, g.w_r, g.u_r, g.b_r, h)?;
    let r = tape.sigmoid(pre_r);
    let pre_u = gate(tape, g.w_u, g.u_u, g.b_u, h)?;
    let u = tape.sigmoid(pre_u);
    let rh = tape.mul(r, h)?;
    let pre_c = gate(tape, g.w_h, g.u_h, g.b_h, rh)?;
    let cand = tape.tanh(pre_c);

    let width = tape.value(h).numel();
    let ones = tape.leaf(Tensor::new(vec![width], vec![1.0; width])?);
    let neg_ones = tape.leaf(Tensor::new(vec![width], vec![-1.0; width])?);
    let neg_u = tape.mul(u, neg_ones)?;
    let one_minus_u = tape.add(ones, neg_u)?;
    let keep = tape.mul(u, h)?;
    let write = tape.mul(one_minus_u, cand)?;
    tape.add(keep, write)
}

/// A parameter set bound onto a tape. Created per training example or per
/// inference step; binding is cheap because tensors share storage.
pub struct Bound<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ModelParams,
    node_of: BTreeMap<String, NodeId>,
}

impl<'a> Bound<'a> {
    pub fn attach(tape: &'a mut Tape, params: &'a ModelParams) -> Bound<'a> {
        let node_of = params
            .tensors()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect();
        Bound {
            tape,
            params,
            node_of,
        }
    }

    /// Like `attach`, but one named tensor is replaced by an existing node
    /// (a finite-difference probe).
    pub fn attach_with_override(
        tape: &'a mut Tape,
        params: &'a ModelParams,
        name: &str,
        probe: NodeId,
    ) -> Bound<'a> {
        let node_of = params
            .tensors()
            .map(|(n, t)| {
                let id = if n == name { probe } else { tape.leaf(t.clone()) };
                (n.to_string(), id)
            })
            .collect();
        Bound {
            tape,
            params,
            node_of,
        }
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .node_of
            .get(name)
            .unwrap_or_else(|| panic!("no bound tensor named {name:?}"))
    }

    /// Gradient tensors per parameter name, from a backward pass over this
    /// bound tape.
    pub fn param_grads(&self, g: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.node_of
            .iter()
            .map(|(name, &id)| (name.clone(), g.wrt(id).to_vec()))
            .collect()
    }

    fn const_vec(&mut self, value: f64, len: usize) -> NodeId {
        self.tape
            .leaf(Tensor::new(vec![len], vec![value; len]).expect("positive len"))
    }

    fn gru_nodes(&self, prefix: &str) -> GruNodes {
        GruNodes {
            w_r: self.node(&format!("{prefix}.w_r")),
            u_r: self.node(&format!("{prefix}.u_r")),
            b_r: self.node(&format!("{prefix}.b_r")),
            w_u: self.node(&format!("{prefix}.w_u")),
            u_u: self.node(&format!("{prefix}.u_u")),
            b_u: self.node(&format!("{prefix}.b_u")),
            w_h: self.node(&format!("{prefix}.w_h")),
            u_h: self.node(&format!("{prefix}.u_h")),
            b_h: self.node(&format!("{prefix}.b_h")),
        }
    }

    pub fn embed_token(&mut self, id: usize) -> Result<NodeId> {
        if id >= self.params.config.vocab_size {
            return Err(Error::Usage(format!(
                "token id {id} out of range for vocabulary of {}",
                self.params.config.vocab_size
            )));
        }
        self.tape.embed(self.node("embedding"), id)
    }

    pub fn gru(&mut self, prefix: &str, x: NodeId, h: NodeId) -> Result<NodeId> {
        let nodes = self.gru_nodes(prefix);
        gru_step_on(self.tape, &nodes, x, h)
    }

    fn check_side(&self, side: Side) -> Result<()> {
        if side == Side::Response && self.params.kind == ModelKind::Baseline {
            return Err(Error::Usage(
                "baseline model has no response encoder".into(),
            ));
        }
        Ok(())
    }

    /// Bidirectional encoding: [final forward state ‖ final backward state].
    pub fn encode_seq(&mut self, side: Side, ids: &[usize]) -> Result<NodeId> {
        self.check_side(side)?;
        if ids.is_empty() {
            return Err(Error::Usage("cannot encode an empty sequence".into()));
        }
        let (fw, bw) = side.enc_prefixes();
        let hidden = self.params.config.enc_hidden;
        let embs = ids
            .iter()
            .map(|&id| self.embed_token(id))
            .collect::<Result<Vec<_>>>()?;

        let mut h_f = self.const_vec(0.0, hidden);
        for &e in &embs {
            h_f = self.gru(fw, e, h_f)?;
        }
        let mut h_b = self.const_vec(0.0, hidden);
        for &e in embs.iter().rev() {
            h_b = self.gru(bw, e, h_b)?;
        }
        self.tape.concat(&[h_f, h_b])
    }

    /// h = tanh(W·enc + b), mapping the 2·enc_hidden encoding down to
    /// enc_hidden.
    pub fn represent(&mut self, side: Side, enc: NodeId) -> Result<NodeId> {
        self.check_side(side)?;
        let prefix = side.repr_prefix();
        let w = self.node(&format!("{prefix}.w"));
        let b = self.node(&format!("{prefix}.b"));
        let we = self.tape.matmul(w, enc)?;
        let pre = self.tape.add(we, b)?;
        Ok(self.tape.tanh(pre))
    }

    /// Posterior parameters from [h_x ‖ h_y]: mu and per-coordinate
    /// log-variance, each a linear map.
    pub fn recognize(&mut self, h_x: NodeId, h_y: NodeId) -> Result<(NodeId, NodeId)> {
        let cat = self.tape.concat(&[h_x, h_y])?;
        let linear = |b: &mut Bound<'_>, w_name: &str, b_name: &str| -> Result<NodeId> {
            let w = b.node(w_name);
            let bias = b.node(b_name);
            let wx = b.tape.matmul(w, cat)?;
            b.tape.add(wx, bias)
        };
        let mu = linear(self, "recog.w_mu", "recog.b_mu")?;
        let logvar = linear(self, "recog.w_sigma", "recog.b_sigma")?;
        Ok((mu, logvar))
    }

    /// Reparametrized draw z = mu + exp(0.5·logvar) ⊙ eps.
    pub fn sample_latent(&mut self, mu: NodeId, logvar: NodeId, eps: &[f64]) -> Result<NodeId> {
        let d = self.tape.value(mu).numel();
        if eps.len() != d {
            return Err(Error::Usage(format!(
                "eps length {} does not match latent width {d}",
                eps.len()
            )));
        }
        let half = self.const_vec(0.5, d);
        let lv_half = self.tape.mul(logvar, half)?;
        let sd = self.tape.exp(lv_half)?;
        let eps_node = self.tape.leaf(Tensor::vector(eps.to_vec())?);
        let scaled = self.tape.mul(sd, eps_node)?;
        self.tape.add(mu, scaled)
    }

    /// KL(Q ‖ N(0, I)) = 0.5 · Σ (mu² + exp(logvar) − logvar − 1).
    pub fn kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let d = self.tape.value(mu).numel();
        let neg_ones = self.const_vec(-1.0, d);
        let mu2 = self.tape.mul(mu, mu)?;
        let var = self.tape.exp(logvar)?;
        let neg_lv = self.tape.mul(logvar, neg_ones)?;
        let a = self.tape.add(mu2, var)?;
        let b = self.tape.add(a, neg_lv)?;
        let c = self.tape.add(b, neg_ones)?;
        let total = self.tape.sum(c);
        let half = self.const_vec(0.5, 1);
        self.tape.mul(total, half)
    }

    /// Decoder start state [h_x ‖ z].
    pub fn decoder_start(&mut self, h_x: NodeId, z: NodeId) -> Result<NodeId> {
        let got = self.tape.value(h_x).numel() + self.tape.value(z).numel();
        if got != self.params.config.dec_hidden() {
            return Err(Error::Usage(format!(
                "decoder init width {got}, expected {}",
                self.params.config.dec_hidden()
            )));
        }
        self.tape.concat(&[h_x, z])
    }

    /// One decoder advance: embed the previous token and step the GRU.
    pub fn decoder_gru(&mut self, prev_id: usize, h: NodeId) -> Result<NodeId> {
        let emb = self.embed_token(prev_id)?;
        self.gru("dec", emb, h)
    }

    fn class_probs(&mut self, h: NodeId) -> Result<NodeId> {
        let w = self.node("tree.class_w");
        let b = self.node("tree.class_b");
        let wh = self.tape.matmul(w, h)?;
        let logits = self.tape.add(wh, b)?;
        self.tape.softmax(logits)
    }

    fn word_probs(&mut self, class: usize, h: NodeId) -> Result<NodeId> {
        let w = self.node(&format!("tree.word_w.{class:04}"));
        let b = self.node(&format!("tree.word_b.{class:04}"));
        let wh = self.tape.matmul(w, h)?;
        let logits = self.tape.add(wh, b)?;
        self.tape.softmax(logits)
    }

    /// log P(target | h) through the class tree: log P(class) + log P(word
    /// within class). Scalar node.
    pub fn step_log_prob(&mut self, h: NodeId, target: usize) -> Result<NodeId> {
        if target >= self.params.config.vocab_size {
            return Err(Error::Usage(format!(
                "target id {target} out of range for vocabulary of {}",
                self.params.config.vocab_size
            )));
        }
        let class = self.params.classes.class_of[target];
        let pos = self.params.classes.pos_in_class[target];
        let cp = self.class_probs(h)?;
        let pc = self.tape.slice(cp, class, 1)?;
        let log_pc = self.tape.log(pc)?;
        let wp = self.word_probs(class, h)?;
        let pw = self.tape.slice(wp, pos, 1)?;
        let log_pw = self.tape.log(pw)?;
        self.tape.add(log_pc, log_pw)
    }

    /// Full next-token distribution over the vocabulary at state `h`.
    pub fn full_distribution(&mut self, h: NodeId) -> Result<Vec<f64>> {
        let cp = self.class_probs(h)?;
        let class_probs = self.tape.value(cp).data().to_vec();
        let mut word_probs = Vec::with_capacity(self.params.classes.members.len());
        for c in 0..self.params.classes.members.len() {
            let wp = self.word_probs(c, h)?;
            word_probs.push(self.tape.value(wp).data().to_vec());
        }
        Ok(crate::model::tree::compose_tree_distribution(
            &class_probs,
            &word_probs,
            &self.params.classes,
        ))
    }

    /// Teacher-forced −Σ log P(target_t | …) from start state `h0`.
    /// `dec_inputs` are the tokens fed to the decoder (possibly word-dropped)
    /// and `targets` the gold tokens scored at each step.
    pub fn sequence_nll(
        &mut self,
        h0: NodeId,
        dec_inputs: &[usize],
        targets: &[usize],
    ) -> Result<NodeId> {
        if dec_inputs.len() != targets.len() {
            return Err(Error::Usage(format!(
                "{} decoder inputs vs {} targets",
                dec_inputs.len(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::Usage("empty response".into()));
        }
        let mut h = h0;
        let mut lps = Vec::with_capacity(targets.len());
        for (&inp, &tgt) in dec_inputs.iter().zip(targets) {
            h = self.decoder_gru(inp, h)?;
            lps.push(self.step_log_prob(h, tgt)?);
        }
        let cat = self.tape.concat(&lps)?;
        let total = self.tape.sum(cat);
        let neg = self.const_vec(-1.0, 1);
        self.tape.mul(total, neg)
    }
}

// ---------------------------------------------------------------------------
// Plain-value entry points. Each builds a scratch tape, runs the bound
// computation above, and extracts values.

/// One GRU step over standalone weights.
pub fn gru_step(w: &GruTensors, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = GruNodes {
        w_r: tape.leaf(w.w_r.clone()),
        u_r: tape.leaf(w.u_r.clone()),
        b_r: tape.leaf(w.b_r.clone()),
        w_u: tape.leaf(w.w_u.clone()),
        u_u: tape.leaf(w.u_u.clone()),
        b_u: tape.leaf(w.b_u.clone()),
        w_h: tape.leaf(w.w_h.clone()),
        u_h: tape.leaf(w.u_h.clone()),
        b_h: tape.leaf(w.b_h.clone()),
    };
    let xn = tape.leaf(x.clone());
    let hn = tape.leaf(h.clone());
    let out = gru_step_on(&mut tape, &nodes, xn, hn)?;
    Ok(tape.value(out).clone())
}

/// Bidirectional sequence encoding for one side of the model.
pub fn encode_bidir(params: &ModelParams, side: Side, ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let enc = b.encode_seq(side, ids)?;
    Ok(tape.value(enc).clone())
}

/// Representation layer h = tanh(W·enc + b) for one side.
pub fn represent(params: &ModelParams, side: Side, enc: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let enc_node = b.tape.leaf(enc.clone());
    let h = b.represent(side, enc_node)?;
    Ok(tape.value(h).clone())
}

/// Posterior parameters for a (prompt, response) representation pair.
pub fn recognize(params: &ModelParams, h_x: &Tensor, h_y: &Tensor) -> Result<GaussianParams> {
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let hx = b.tape.leaf(h_x.clone());
    let hy = b.tape.leaf(h_y.clone());
    let (mu, logvar) = b.recognize(hx, hy)?;
    Ok(GaussianParams {
        mu: tape.value(mu).data().to_vec(),
        log_sigma_diag: tape.value(logvar).data().to_vec(),
    })
}

/// z = mu + exp(0.5·log_sigma) ⊙ eps.
pub fn sample_latent(g: &GaussianParams, eps: &[f64]) -> Result<LatentVector> {
    if g.mu.len() != g.log_sigma_diag.len() || g.mu.len() != eps.len() {
        return Err(Error::Usage(format!(
            "latent lengths disagree: mu {}, log_sigma {}, eps {}",
            g.mu.len(),
            g.log_sigma_diag.len(),
            eps.len()
        )));
    }
    Ok(g.mu
        .iter()
        .zip(&g.log_sigma_diag)
        .zip(eps)
        .map(|((m, ls), e)| m + (0.5 * ls).exp() * e)
        .collect())
}

/// Decoder start state: the concatenation [h_x ‖ z].
pub fn decoder_init(h_x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h_x.len() + z.len());
    out.extend_from_slice(h_x);
    out.extend_from_slice(z);
    out
}

/// Encodes a prompt and returns the decoder start state [h_x ‖ z].
pub fn prompt_state(params: &ModelParams, x_ids: &[usize], z: &[f64]) -> Result<Tensor> {
    if z.len() != params.config.latent_dim {
        return Err(Error::Usage(format!(
            "latent width {} does not match configured {}",
            z.len(),
            params.config.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let enc = b.encode_seq(Side::Prompt, x_ids)?;
    let h_x = b.represent(Side::Prompt, enc)?;
    let z_node = b.tape.leaf(Tensor::vector(z.to_vec())?);
    let h0 = b.decoder_start(h_x, z_node)?;
    Ok(tape.value(h0).clone())
}

/// One decoding advance: consume `prev_id` from state `h_prev`, returning
/// the new state and the next-token distribution over the vocabulary.
pub fn decoder_step(
    params: &ModelParams,
    prev_id: usize,
    h_prev: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let h_node = b.tape.leaf(h_prev.clone());
    let h_next = b.decoder_gru(prev_id, h_node)?;
    let dist = b.full_distribution(h_next)?;
    Ok((tape.value(h_next).clone(), dist))
}

/// Total teacher-forced NLL of a BOS/EOS-delimited response given a prompt
/// and a fixed latent vector, in nats.
pub fn sequence_nll(params: &ModelParams, x_ids: &[usize], y_ids: &[usize], z: &[f64]) -> Result<f64> {
    if y_ids.len() < 2 {
        return Err(Error::Usage("empty response".into()));
    }
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let enc = b.encode_seq(Side::Prompt, x_ids)?;
    let h_x = b.represent(Side::Prompt, enc)?;
    let z_node = b.tape.leaf(Tensor::vector(z.to_vec())?);
    let h0 = b.decoder_start(h_x, z_node)?;
    let nll = b.sequence_nll(h0, &y_ids[..y_ids.len() - 1], &y_ids[1..])?;
    tape.value(nll).item()
}
