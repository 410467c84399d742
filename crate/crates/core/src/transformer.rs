//! Encoder/decoder attention stack with the feature interaction module.
//!
//! ```text
//! m_sa  = SA(m_ori)                          encoder
//! q_sa  = SA(q_ori)                          decoder self-attention
//! m_x   = m_e ⊙ m_ori                        mask gating
//! m_out = CA(q: m_sa, k: q_sa, v: q_sa)      interaction, memory side
//! q_out = CA(q: q_sa, k: m_sa, v: m_x)       interaction, query side
//! t_out = CA(q: q_out, k: m_out, v: m_out)   decoder cross-attention
//! ```
//!
//! Memory-side tensors have `T·HW` rows, query-side tensors `HW` rows, and
//! every tensor has `C` columns. There are no positional encodings, so the
//! memory behaves as an unordered token set.

use crate::attention::{ca_block, sa_block, AttentionParams};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Var};

/// Five independent attention blocks.
#[derive(Debug, Clone, Copy)]
pub struct InteractiveTransformerParams {
    pub enc_sa: AttentionParams,
    pub dec_sa: AttentionParams,
    pub fim_mem_ca: AttentionParams,
    pub fim_query_ca: AttentionParams,
    pub dec_ca: AttentionParams,
}

impl InteractiveTransformerParams {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        channels: usize,
        key_dim: usize,
        ln_eps: f64,
    ) -> Self {
        let mut block = |name: &str| {
            AttentionParams::register(store, init, &format!("transformer.{name}"), channels, key_dim, ln_eps)
        };
        Self {
            enc_sa: block("enc_sa"),
            dec_sa: block("dec_sa"),
            fim_mem_ca: block("fim_mem_ca"),
            fim_query_ca: block("fim_query_ca"),
            dec_ca: block("dec_ca"),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &AttentionParams); 5] {
        [
            ("enc_sa", &self.enc_sa),
            ("dec_sa", &self.dec_sa),
            ("fim_mem_ca", &self.fim_mem_ca),
            ("fim_query_ca", &self.fim_query_ca),
            ("dec_ca", &self.dec_ca),
        ]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks().iter().flat_map(|(_, b)| b.ids()).collect()
    }
}

/// Every intermediate embedding of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TransformerState<'t, T: Element> {
    pub m_ori: Var<'t, T>,
    pub q_ori: Var<'t, T>,
    pub m_sa: Var<'t, T>,
    pub q_sa: Var<'t, T>,
    pub m_e: Var<'t, T>,
    pub m_x: Var<'t, T>,
    pub m_out: Var<'t, T>,
    pub q_out: Var<'t, T>,
    pub t_out: Var<'t, T>,
}

/// Attention maps of the blocks that ran, in evaluation order.
pub type AttentionMaps<'t, T> = Vec<(&'static str, Var<'t, T>)>;

pub struct Transformer<'a, 't, T: Element> {
    pub tape: &'t Tape<T>,
    pub store: &'a ParamStore<T>,
    pub params: &'a InteractiveTransformerParams,
    maps: AttentionMaps<'t, T>,
}

impl<'a, 't, T: Element> Transformer<'a, 't, T> {
    pub fn new(
        tape: &'t Tape<T>,
        store: &'a ParamStore<T>,
        params: &'a InteractiveTransformerParams,
    ) -> Self {
        Self {
            tape,
            store,
            params,
            maps: Vec::new(),
        }
    }

    pub fn attention_maps(&self) -> &AttentionMaps<'t, T> {
        &self.maps
    }

    pub fn into_attention_maps(self) -> AttentionMaps<'t, T> {
        self.maps
    }

    pub fn encode(&mut self, m_ori: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = sa_block(self.tape, self.store, m_ori, &self.params.enc_sa)?;
        self.maps.push(("enc_sa", out.weights));
        Ok(out.output)
    }

    pub fn decoder_self(&mut self, q_ori: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = sa_block(self.tape, self.store, q_ori, &self.params.dec_sa)?;
        self.maps.push(("dec_sa", out.weights));
        Ok(out.output)
    }

    /// Returns `(m_x, m_out, q_out)`.
    pub fn fim(
        &mut self,
        m_sa: Var<'t, T>,
        q_sa: Var<'t, T>,
        m_ori: Var<'t, T>,
        m_e: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        if m_e.shape() != m_ori.shape() || m_sa.shape() != m_ori.shape() {
            return Err(Error::dim(
                "fim",
                format!(
                    "m_sa {:?}, m_ori {:?}, m_e {:?} must match",
                    m_sa.shape(),
                    m_ori.shape(),
                    m_e.shape()
                ),
            ));
        }
        let m_x = m_e.mul(m_ori)?;
        let mem = ca_block(self.tape, self.store, m_sa, q_sa, q_sa, &self.params.fim_mem_ca)?;
        let query = ca_block(self.tape, self.store, q_sa, m_sa, m_x, &self.params.fim_query_ca)?;
        self.maps.push(("fim_mem_ca", mem.weights));
        self.maps.push(("fim_query_ca", query.weights));
        Ok((m_x, mem.output, query.output))
    }

    pub fn decode_cross(&mut self, q_out: Var<'t, T>, m_out: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = ca_block(self.tape, self.store, q_out, m_out, m_out, &self.params.dec_ca)?;
        self.maps.push(("dec_ca", out.weights));
        Ok(out.output)
    }

    /// Full pass. With `use_fim = false` the interaction module is bypassed
    /// (`m_out := m_sa`, `q_out := q_sa`), which removes the only path by
    /// which mask information reaches the output.
    pub fn forward(
        &mut self,
        m_ori: Var<'t, T>,
        m_e: Var<'t, T>,
        q_ori: Var<'t, T>,
        use_fim: bool,
    ) -> Result<TransformerState<'t, T>> {
        let (ms, qs) = (m_ori.shape(), q_ori.shape());
        if ms.len() != 2 || qs.len() != 2 || ms[1] != qs[1] || ms[0] % qs[0] != 0 {
            return Err(Error::dim(
                "transformer",
                format!("memory {ms:?} is not a whole number of query grids {qs:?}"),
            ));
        }
        let m_sa = self.encode(m_ori)?;
        let q_sa = self.decoder_self(q_ori)?;
        let (m_x, m_out, q_out) = if use_fim {
            self.fim(m_sa, q_sa, m_ori, m_e)?
        } else {
            (m_e.mul(m_ori)?, m_sa, q_sa)
        };
        let t_out = self.decode_cross(q_out, m_out)?;
        Ok(TransformerState {
            m_ori,
            q_ori,
            m_sa,
            q_sa,
            m_e,
            m_x,
            m_out,
            q_out,
            t_out,
        })
    }
}
