use ndarray::{Array2, ArrayView2};

use super::{EncodedFunction, EncoderLayerParams, Model, PoolingMode};
use crate::codebook::{select_centroid, Codebook, Selection, SelectionWeights};
use crate::diffcore::{Mode, RngStream, Tape, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{ScopeMatrix, StatementMatrix};

/// What fills the auxiliary encoder row.
pub enum Conditioning<'a> {
    /// Warm-up: the raw `d`-wide summary of the ground-truth scope.
    Scope,
    /// Main phase: the factorised scope, replaced by its selected centroid
    /// through the straight-through op and up-projected. `selection_rng`
    /// enables dropout on the selection scores.
    Quantized {
        codebook: &'a Codebook,
        selection_rng: Option<RngStream>,
    },
    /// A fixed `1×h` centroid, up-projected.
    Centroid(ArrayView2<'a, f64>),
    /// A fixed `1×d` auxiliary row.
    Aux(ArrayView2<'a, f64>),
}

pub struct ForwardOutput {
    /// `1×1` function probability.
    pub y_hat: Var,
    /// `m×1` probabilities for the kept statements.
    pub z_hat: Var,
    /// `1×h` factorised scope (quantised conditioning only).
    pub v: Option<Var>,
    pub selection: Option<Selection>,
}

fn sinusoid(rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Model {
    /// Embeds token sequences (one per row) into a `len×d` block.
    pub fn embed_rows(&self, tape: &mut Tape<'_>, rows: &[&[u32]]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Usage("no statements to embed".into()));
        }
        if let Some(&bad) = rows
            .iter()
            .flat_map(|r| r.iter())
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Usage(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let m = rows.len();
        match self.config.pooling {
            PoolingMode::Rnn => self.embed_rows_rnn(tape, rows),
            PoolingMode::Mean => {
                let ids: Vec<usize> = rows.iter().flat_map(|r| r.iter().map(|&i| i as usize)).collect();
                let tokens = tape.lookup(self.params.embedding, &ids)?;
                let mut avg = Array2::zeros((m, ids.len()));
                let mut col = 0;
                for (j, r) in rows.iter().enumerate() {
                    for _ in 0..r.len() {
                        avg[[j, col]] = 1.0 / r.len() as f64;
                        col += 1;
                    }
                }
                let avg = tape.constant(avg);
                tape.matmul(avg, tokens)
            }
            PoolingMode::Max => {
                let ids: Vec<usize> = rows.iter().flat_map(|r| r.iter().map(|&i| i as usize)).collect();
                let tokens = tape.lookup(self.params.embedding, &ids)?;
                let mut out = Vec::with_capacity(m);
                let mut start = 0;
                for r in rows {
                    let block = tape.slice_rows(tokens, start, start + r.len())?;
                    out.push(tape.reduce_max(block)?);
                    start += r.len();
                }
                tape.concat_rows(&out)
            }
        }
    }

    /// Runs the statement GRU over all rows at once, time-major. Rows are
    /// sorted by length so the still-running sequences at step `t` form a
    /// prefix; padding tokens are never fed to the cell.
    fn embed_rows_rnn(&self, tape: &mut Tape<'_>, rows: &[&[u32]]) -> Result<Var> {
        let m = rows.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| rows[b].len().cmp(&rows[a].len()).then(a.cmp(&b)));
        let longest = rows[order[0]].len();
        let mut ids = Vec::new();
        let mut active = Vec::with_capacity(longest);
        for t in 0..longest {
            let before = ids.len();
            for &j in &order {
                if rows[j].len() > t {
                    ids.push(rows[j][t] as usize);
                }
            }
            active.push(ids.len() - before);
        }
        let gru = self.params.gru_statement.bind(tape);
        let x = tape.lookup(self.params.embedding, &ids)?;
        let xw = gru.project_inputs(tape, x)?;
        let mut h = tape.zeros(m, self.config.d);
        let mut offset = 0;
        for &a in &active {
            let xt = tape.slice_rows(xw, offset, offset + a)?;
            offset += a;
            if a == m {
                h = gru.step_projected(tape, xt, h)?;
            } else {
                let head = tape.slice_rows(h, 0, a)?;
                let tail = tape.slice_rows(h, a, m)?;
                let stepped = gru.step_projected(tape, xt, head)?;
                h = tape.concat_rows(&[stepped, tail])?;
            }
        }
        let mut inverse = vec![0; m];
        for (pos, &j) in order.iter().enumerate() {
            inverse[j] = pos;
        }
        if inverse.iter().enumerate().all(|(j, &p)| j == p) {
            Ok(h)
        } else {
            tape.gather_rows(h, &inverse)
        }
    }

    /// `m×d` embeddings of the real statements only.
    pub fn statement_embeddings(&self, tape: &mut Tape<'_>, sm: &StatementMatrix) -> Result<Var> {
        let rows: Vec<&[u32]> = (0..sm.real_statements()).map(|j| sm.tokens(j)).collect();
        self.embed_rows(tape, &rows)
    }

    /// `n×d` statement embeddings; padded rows are zero.
    pub fn embed_statements(&self, tape: &mut Tape<'_>, sm: &StatementMatrix) -> Result<Var> {
        let real = self.statement_embeddings(tape, sm)?;
        let m = sm.real_statements();
        if m == sm.n() {
            return Ok(real);
        }
        let pad = tape.zeros(sm.n() - m, self.config.d);
        tape.concat_rows(&[real, pad])
    }

    /// `q×d` scope embedding; the learnable stand-in for benign functions.
    pub fn embed_scope(&self, tape: &mut Tape<'_>, pm: &ScopeMatrix) -> Result<Var> {
        if pm.is_benign {
            return Ok(tape.param(self.params.p_benign));
        }
        let k = pm.real_statements();
        let rows: Vec<&[u32]> = (0..k).map(|j| pm.tokens(j)).collect();
        let real = self.embed_rows(tape, &rows)?;
        if k == pm.q() {
            return Ok(real);
        }
        let pad = tape.zeros(pm.q() - k, self.config.d);
        tape.concat_rows(&[real, pad])
    }

    /// `1×d` summary of a `q×d` scope embedding.
    pub fn summarize_scope(&self, tape: &mut Tape<'_>, p: Var) -> Result<Var> {
        let gru = self.params.gru_vul.bind(tape);
        gru.run_sequence(tape, p)
    }

    /// `1×h` = LN(v_raw · W^F).
    pub fn factorize_scope(&self, tape: &mut Tape<'_>, v_raw: Var) -> Result<Var> {
        let w = tape.param(self.params.w_factor);
        let g = tape.param(self.params.factor_gain);
        let b = tape.param(self.params.factor_bias);
        let proj = tape.matmul(v_raw, w)?;
        tape.layer_norm(proj, g, b)
    }

    /// `1×h` → `1×d`.
    pub fn up_project(&self, tape: &mut Tape<'_>, quantized: Var) -> Result<Var> {
        let w = tape.param(self.params.w_up);
        tape.matmul(quantized, w)
    }

    pub fn selection_weights(&self) -> SelectionWeights<'_> {
        SelectionWeights {
            w_q: self.store.get(self.params.w_q),
            w_k: self.store.get(self.params.w_k),
            w_v: self.store.get(self.params.w_v),
        }
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        p: &EncoderLayerParams,
        attention: &mut Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.config.d;
        let heads = self.config.heads;
        let dh = d / heads;
        let rate = self.config.dropout;
        let w_qkv = tape.param(p.w_qkv);
        let b_qkv = tape.param(p.b_qkv);
        let qkv = tape.matmul(x, w_qkv)?;
        let qkv = tape.add(qkv, b_qkv)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
            let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let probs = tape.row_softmax(scores)?;
            if let Some(sink) = attention.as_deref_mut() {
                sink.push(probs);
            }
            let probs = tape.dropout(probs, rate)?;
            outs.push(tape.matmul(probs, v)?);
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let w_o = tape.param(p.w_o);
        let b_o = tape.param(p.b_o);
        let attn = tape.matmul(joined, w_o)?;
        let attn = tape.add(attn, b_o)?;
        let attn = tape.dropout(attn, rate)?;
        let g1 = tape.param(p.ln1_gain);
        let b1 = tape.param(p.ln1_bias);
        let normed = tape.layer_norm(attn, g1, b1)?;
        let a = tape.add(normed, x)?;

        let w1 = tape.param(p.w_ff1);
        let bf1 = tape.param(p.b_ff1);
        let w2 = tape.param(p.w_ff2);
        let bf2 = tape.param(p.b_ff2);
        let f = tape.matmul(a, w1)?;
        let f = tape.add(f, bf1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add(f, bf2)?;
        let f = tape.dropout(f, rate)?;
        let f = tape.add(f, a)?;
        let g2 = tape.param(p.ln2_gain);
        let b2 = tape.param(p.ln2_bias);
        tape.layer_norm(f, g2, b2)
    }

    /// Encoder over the real statement rows `s` (`m×d`) with `aux` (`1×d`)
    /// appended as an extra row; returns the `m` statement rows. When
    /// `attention` is given, every head's attention matrix is pushed to it.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        s: Var,
        aux: Var,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let [m, d] = tape.shape(s);
        if tape.shape(aux) != [1, d] {
            return Err(Error::dim("encoder aux", &tape.shape(aux), &[1, d]));
        }
        let s = if self.config.positional_encoding {
            let pe = tape.constant(sinusoid(m, d));
            tape.add(s, pe)?
        } else {
            s
        };
        let mut x = tape.concat_rows(&[s, aux])?;
        for layer in &self.params.layers {
            x = self.encoder_layer(tape, x, layer, &mut attention)?;
        }
        tape.slice_rows(x, 0, m)
    }

    /// `n×d` form of [`Model::encode`]: masked rows are left out of attention
    /// and come back as zeros.
    pub fn encoder_forward(&self, tape: &mut Tape<'_>, s: Var, mask: &[bool], aux: Var) -> Result<Var> {
        let n = tape.shape(s)[0];
        if mask.len() != n {
            return Err(Error::dim("encoder mask", &[mask.len()], &[n]));
        }
        let real: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
        if real.is_empty() {
            return Err(Error::Usage("encoder input has no real statements".into()));
        }
        let compact = tape.gather_rows(s, &real)?;
        let out = self.encode(tape, compact, aux, None)?;
        let zero = tape.zeros(1, self.config.d);
        let padded = tape.concat_rows(&[out, zero])?;
        let mut slot = vec![real.len(); n];
        for (i, &j) in real.iter().enumerate() {
            slot[j] = i;
        }
        tape.gather_rows(padded, &slot)
    }

    /// Function probability from the statement rows of `h` selected by
    /// `mask` (all rows when `None`).
    pub fn predict_function(&self, tape: &mut Tape<'_>, h: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = match mask {
            Some(mask) if mask.iter().any(|m| !m) => {
                let real: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
                tape.gather_rows(h, &real)?
            }
            _ => h,
        };
        let rate = self.config.dropout;
        let gru = self.params.gru_function.bind(tape);
        let summary = gru.run_sequence(tape, h)?;
        let x = tape.dropout(summary, rate)?;
        let w_g = tape.param(self.params.w_g);
        let t = tape.matmul(x, w_g)?;
        let t = tape.tanh(t)?;
        let t = tape.dropout(t, rate)?;
        let w_u = tape.param(self.params.w_u);
        let logit = tape.matmul(t, w_u)?;
        tape.sigmoid(logit)
    }

    /// Per-row statement probabilities (`rows×1`).
    pub fn predict_statements(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let rate = self.config.dropout;
        let x = tape.dropout(h, rate)?;
        let w_i = tape.param(self.params.w_i);
        let t = tape.matmul(x, w_i)?;
        let t = tape.tanh(t)?;
        let t = tape.dropout(t, rate)?;
        let w_j = tape.param(self.params.w_j);
        let logit = tape.matmul(t, w_j)?;
        tape.sigmoid(logit)
    }

    /// Full forward pass for one function.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ex: &EncodedFunction,
        conditioning: Conditioning<'_>,
    ) -> Result<ForwardOutput> {
        let s = self.statement_embeddings(tape, &ex.statements)?;
        let mut v = None;
        let mut selection = None;
        let aux = match conditioning {
            Conditioning::Scope => {
                let p = self.embed_scope(tape, &ex.scope)?;
                self.summarize_scope(tape, p)?
            }
            Conditioning::Quantized {
                codebook,
                selection_rng,
            } => {
                let p = self.embed_scope(tape, &ex.scope)?;
                let v_raw = self.summarize_scope(tape, p)?;
                let fv = self.factorize_scope(tape, v_raw)?;
                let mut rng = selection_rng;
                let dropout = match (tape.mode(), rng.as_mut()) {
                    (Mode::Train, Some(r)) => Some((self.config.dropout, r)),
                    _ => None,
                };
                let sel = select_centroid(tape.value(fv).view(), codebook, self.selection_weights(), dropout)?;
                let quantized = tape.straight_through(fv, codebook.centroid(sel.index))?;
                v = Some(fv);
                selection = Some(sel);
                self.up_project(tape, quantized)?
            }
            Conditioning::Centroid(c) => {
                let c = tape.constant(c.to_owned());
                self.up_project(tape, c)?
            }
            Conditioning::Aux(a) => tape.constant(a.to_owned()),
        };
        let h = self.encode(tape, s, aux, None)?;
        let y_hat = self.predict_function(tape, h, None)?;
        let z_hat = self.predict_statements(tape, h)?;
        Ok(ForwardOutput {
            y_hat,
            z_hat,
            v,
            selection,
        })
    }

    /// Evaluation-mode `m×d` statement embeddings, reusable across several
    /// conditioned passes.
    pub fn statement_values(&self, sm: &StatementMatrix) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let s = self.statement_embeddings(&mut tape, sm)?;
        Ok(tape.value(s).clone())
    }

    /// Evaluation-mode heads given precomputed statement embeddings and a
    /// `1×d` auxiliary row: (ŷ, ẑ over the kept statements).
    pub fn predict_with_aux(&self, s: ArrayView2<'_, f64>, aux: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let s = tape.constant(s.to_owned());
        let aux = tape.constant(aux.to_owned());
        let h = self.encode(&mut tape, s, aux, None)?;
        let y = self.predict_function(&mut tape, h, None)?;
        let z = self.predict_statements(&mut tape, h)?;
        Ok((tape.scalar(y), tape.value(z).iter().copied().collect()))
    }

    /// `1×d` auxiliary row for a centroid (`1×h`).
    pub fn centroid_aux(&self, centroid: ArrayView2<'_, f64>) -> Array2<f64> {
        centroid.dot(self.store.get(self.params.w_up))
    }

    /// `1×d` summary of the benign stand-in scope, the scope-free auxiliary
    /// row a warm-up model can use at inference.
    pub fn benign_aux(&self) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let p = tape.param(self.params.p_benign);
        let v = self.summarize_scope(&mut tape, p)?;
        Ok(tape.value(v).clone())
    }

    /// Evaluation-mode factorised scope vector `1×h` of a function.
    pub fn scope_vector(&self, pm: &ScopeMatrix) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let p = self.embed_scope(&mut tape, pm)?;
        let v_raw = self.summarize_scope(&mut tape, p)?;
        let v = self.factorize_scope(&mut tape, v_raw)?;
        Ok(tape.value(v).clone())
    }
}
