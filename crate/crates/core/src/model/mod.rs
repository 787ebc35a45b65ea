//! The matching network: audio encoder, text encoder, cross-attention pattern extractor and
//! Bi-GRU pattern discriminator.
//!
//! Sequences travel through the tape as `[positions, features]` row matrices. Padded inputs are
//! trimmed to their unmasked prefix before any layer runs, so right padding cannot change a score.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_into, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::dsp::MelSpectrogram;
use crate::embeddings::{EmbeddingLayerTag, TtsEmbeddingSequence};
use crate::error::{Error, Result};
use crate::numerics::{
    derive_seed, prefix_len, xavier_shaped, BatchNormParams, Graph, GruHandles, Mode, NodeId,
    ParamId, ParamStore, Tensor, LEAKY_RELU_ALPHA,
};

/// Architecture constants. All of them are stored in checkpoints and checked on load.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embedding_tag: EmbeddingLayerTag,
    pub text_input_width: usize,
    pub n_mels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub audio_gru_hidden: usize,
    pub text_gru_hidden: usize,
    pub embed_dim: usize,
    pub disc_gru_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn for_tag(tag: EmbeddingLayerTag) -> Self {
        ModelConfig {
            embedding_tag: tag,
            text_input_width: tag.width(),
            n_mels: 80,
            conv1_channels: 32,
            conv2_channels: 64,
            audio_gru_hidden: 64,
            text_gru_hidden: 64,
            embed_dim: 128,
            disc_gru_hidden: 128,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Name/value pairs in checkpoint order.
    pub fn constants(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("embedding_tag", f64::from(self.embedding_tag.byte())),
            ("text_input_width", self.text_input_width as f64),
            ("n_mels", self.n_mels as f64),
            ("conv1_channels", self.conv1_channels as f64),
            ("conv2_channels", self.conv2_channels as f64),
            ("audio_gru_hidden", self.audio_gru_hidden as f64),
            ("text_gru_hidden", self.text_gru_hidden as f64),
            ("embed_dim", self.embed_dim as f64),
            ("disc_gru_hidden", self.disc_gru_hidden as f64),
            ("bn_eps", self.bn_eps),
            ("bn_momentum", self.bn_momentum),
        ]
    }

    pub(crate) fn from_constants(values: &[(String, f64)]) -> Result<Self> {
        let get = |name: &str| -> Result<f64> {
            values
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::format("constants", format!("missing `{name}`")))
        };
        let int = |name: &str| -> Result<usize> {
            let v = get(name)?;
            if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::format(
                    "constants",
                    format!("`{name}` = {v} is not a positive integer"),
                ))
            }
        };
        let tag_byte = int("embedding_tag")?;
        let embedding_tag = u8::try_from(tag_byte)
            .ok()
            .and_then(EmbeddingLayerTag::from_byte)
            .ok_or_else(|| Error::format("constants", format!("`embedding_tag` = {tag_byte}")))?;
        let cfg = ModelConfig {
            embedding_tag,
            text_input_width: int("text_input_width")?,
            n_mels: int("n_mels")?,
            conv1_channels: int("conv1_channels")?,
            conv2_channels: int("conv2_channels")?,
            audio_gru_hidden: int("audio_gru_hidden")?,
            text_gru_hidden: int("text_gru_hidden")?,
            embed_dim: int("embed_dim")?,
            disc_gru_hidden: int("disc_gru_hidden")?,
            bn_eps: get("bn_eps")?,
            bn_momentum: get("bn_momentum")?,
        };
        cfg.validate()
            .map_err(|e| Error::format("constants", e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.text_input_width,
            self.n_mels,
            self.conv1_channels,
            self.conv2_channels,
            self.audio_gru_hidden,
            self.text_gru_hidden,
            self.embed_dim,
            self.disc_gru_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        if self.text_input_width != self.embedding_tag.width() {
            return Err(Error::validation(
                "text_input_width",
                self.embedding_tag.width(),
                self.text_input_width,
            ));
        }
        if self.bn_eps.is_nan()
            || self.bn_eps <= 0.0
            || !(0.0..=1.0).contains(&self.bn_momentum)
            || self.bn_momentum == 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "batch-norm eps {} / momentum {} out of range",
                self.bn_eps, self.bn_momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    k: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BiGru {
    fwd: GruHandles,
    bwd: GruHandles,
}

#[derive(Debug, Clone, Copy)]
struct Handles {
    conv1: Conv,
    bn1: BatchNormParams,
    conv2: Conv,
    bn2: BatchNormParams,
    audio_gru1: BiGru,
    audio_gru2: BiGru,
    audio_dense: Dense,
    text_gru: BiGru,
    text_dense: Dense,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    disc_gru: BiGru,
    disc_dense: Dense,
}

/// Encoded text, `embed_dim × m`, with the mask of real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Encoded audio, `embed_dim × n'` with `n' = ceil(n / 2)`, with the mask of real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Attention output, one `embed_dim` row per text position, plus the `m × n'` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSequence {
    pub values: Tensor,
    pub weights: Tensor,
}

/// One scoring request: `[n, n_mels]` features and `[m, width]` text input, both unpadded.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub mel: &'a Tensor,
    pub text: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct KwsModel {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    h: Handles,
}

/// Rows `0..len` of sample `b` of a `[batch, rows, cols]` block.
pub fn trim_sample(block: &Tensor, b: usize, len: usize) -> Result<Tensor> {
    let s = block.shape();
    if s.len() != 3 || b >= s[0] || len > s[1] {
        return Err(Error::Shape(format!(
            "sample {b}, length {len} of block {s:?}"
        )));
    }
    let start = b * s[1] * s[2];
    Tensor::new(
        vec![len, s[2]],
        block.data()[start..start + len * s[2]].to_vec(),
    )
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

impl KwsModel {
    /// A freshly initialized model: Xavier-uniform weights, zero biases, unit batch-norm scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut next = 0u64;
        let mut xavier = |store: &mut ParamStore,
                          name: &str,
                          shape: &[usize],
                          fi: usize,
                          fo: usize|
         -> Result<ParamId> {
            let t = xavier_shaped(shape, fi, fo, derive_seed(seed, &[next]))?;
            next += 1;
            Ok(store.add(name, t, true))
        };
        let zeros = |store: &mut ParamStore, name: &str, n: usize| {
            store.add(name, Tensor::zeros(&[n]), true)
        };

        fn conv(
            store: &mut ParamStore,
            xavier: &mut impl FnMut(&mut ParamStore, &str, &[usize], usize, usize) -> Result<ParamId>,
            name: &str,
            c_in: usize,
            c_out: usize,
        ) -> Result<Conv> {
            let k = xavier(
                store,
                &format!("{name}.kernel"),
                &[c_out, c_in, 3, 3],
                c_in * 9,
                c_out * 9,
            )?;
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true);
            Ok(Conv { k, b })
        }
        fn bn(store: &mut ParamStore, name: &str, c: usize, cfg: &ModelConfig) -> BatchNormParams {
            BatchNormParams {
                gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[c], 1.0), true),
                beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
                running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
                running_var: store.add(
                    format!("{name}.running_var"),
                    Tensor::filled(&[c], 1.0),
                    false,
                ),
                eps: cfg.bn_eps,
                momentum: cfg.bn_momentum,
            }
        }
        fn gru(
            store: &mut ParamStore,
            xavier: &mut impl FnMut(&mut ParamStore, &str, &[usize], usize, usize) -> Result<ParamId>,
            name: &str,
            input: usize,
            hidden: usize,
        ) -> Result<GruHandles> {
            Ok(GruHandles {
                w: xavier(
                    store,
                    &format!("{name}.w"),
                    &[3 * hidden, input],
                    input,
                    hidden,
                )?,
                u: xavier(
                    store,
                    &format!("{name}.u"),
                    &[3 * hidden, hidden],
                    hidden,
                    hidden,
                )?,
                b: store.add(format!("{name}.b"), Tensor::zeros(&[3 * hidden]), true),
                hidden,
            })
        }
        fn bigru(
            store: &mut ParamStore,
            xavier: &mut impl FnMut(&mut ParamStore, &str, &[usize], usize, usize) -> Result<ParamId>,
            name: &str,
            input: usize,
            hidden: usize,
        ) -> Result<BiGru> {
            Ok(BiGru {
                fwd: gru(store, xavier, &format!("{name}.fwd"), input, hidden)?,
                bwd: gru(store, xavier, &format!("{name}.bwd"), input, hidden)?,
            })
        }

        let c = &config;
        let d = c.embed_dim;
        let conv1 = conv(&mut store, &mut xavier, "audio.conv1", 1, c.conv1_channels)?;
        let bn1 = bn(&mut store, "audio.bn1", c.conv1_channels, c);
        let conv2 = conv(
            &mut store,
            &mut xavier,
            "audio.conv2",
            c.conv1_channels,
            c.conv2_channels,
        )?;
        let bn2 = bn(&mut store, "audio.bn2", c.conv2_channels, c);
        let audio_gru1 = bigru(
            &mut store,
            &mut xavier,
            "audio.gru1",
            c.conv2_channels * c.n_mels,
            c.audio_gru_hidden,
        )?;
        let audio_gru2 = bigru(
            &mut store,
            &mut xavier,
            "audio.gru2",
            2 * c.audio_gru_hidden,
            c.audio_gru_hidden,
        )?;
        let audio_dense = Dense {
            w: xavier(
                &mut store,
                "audio.dense.w",
                &[d, 2 * c.audio_gru_hidden],
                2 * c.audio_gru_hidden,
                d,
            )?,
            b: zeros(&mut store, "audio.dense.b", d),
        };
        let text_gru = bigru(
            &mut store,
            &mut xavier,
            "text.gru",
            c.text_input_width,
            c.text_gru_hidden,
        )?;
        let text_dense = Dense {
            w: xavier(
                &mut store,
                "text.dense.w",
                &[d, 2 * c.text_gru_hidden],
                2 * c.text_gru_hidden,
                d,
            )?,
            b: zeros(&mut store, "text.dense.b", d),
        };
        let wq = xavier(&mut store, "attn.wq", &[d, d], d, d)?;
        let wk = xavier(&mut store, "attn.wk", &[d, d], d, d)?;
        let wv = xavier(&mut store, "attn.wv", &[d, d], d, d)?;
        let disc_gru = bigru(&mut store, &mut xavier, "disc.gru", d, c.disc_gru_hidden)?;
        let disc_dense = Dense {
            w: xavier(
                &mut store,
                "disc.dense.w",
                &[1, 2 * c.disc_gru_hidden],
                2 * c.disc_gru_hidden,
                1,
            )?,
            b: zeros(&mut store, "disc.dense.b", 1),
        };
        let h = Handles {
            conv1,
            bn1,
            conv2,
            bn2,
            audio_gru1,
            audio_gru2,
            audio_dense,
            text_gru,
            text_dense,
            wq,
            wk,
            wv,
            disc_gru,
            disc_dense,
        };
        Ok(KwsModel {
            config,
            seed,
            store,
            h,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Sets every parameter, trainable or not, to zero.
    pub fn zero_parameters(&mut self) {
        for p in self.store.iter_mut() {
            p.value.fill(0.0);
        }
    }

    fn check_mel(&self, mel: &Tensor) -> Result<()> {
        if mel.shape().len() != 2 || mel.shape()[1] != self.config.n_mels || mel.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "mel input must be n×{} with n ≥ 1, got {:?}",
                self.config.n_mels,
                mel.shape()
            )));
        }
        Ok(())
    }

    fn check_text(&self, text: &Tensor) -> Result<()> {
        let w = self.config.text_input_width;
        if text.shape().len() != 2 || text.shape()[1] != w || text.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "text input must be m×{w} with m ≥ 1, got {:?}",
                text.shape()
            )));
        }
        Ok(())
    }

    fn dense(&self, g: &mut Graph<'_>, x: NodeId, d: Dense) -> Result<NodeId> {
        let (w, b) = (g.param(d.w), g.param(d.b));
        g.linear(x, w, Some(b))
    }

    fn bigru(&self, g: &mut Graph<'_>, x: NodeId, p: BiGru, len: usize) -> Result<NodeId> {
        Ok(g.bigru(x, &p.fwd, &p.bwd, len)?.0)
    }

    /// Audio encoder over a batch of unpadded `[n_i, n_mels]` features. Batch norm pools
    /// statistics across the whole batch in train mode. Returns `[ceil(n_i/2), embed_dim]` nodes.
    pub fn audio_nodes(&self, g: &mut Graph<'_>, mels: &[&Tensor]) -> Result<Vec<NodeId>> {
        let h = &self.h;
        let mut xs = Vec::with_capacity(mels.len());
        for mel in mels {
            self.check_mel(mel)?;
            let x = g.constant(
                (*mel)
                    .clone()
                    .reshape(vec![1, mel.rows(), self.config.n_mels])?,
            );
            let (k, b) = (g.param(h.conv1.k), g.param(h.conv1.b));
            xs.push(g.conv2d(x, k, b, 2)?);
        }
        let mut ys = Vec::with_capacity(xs.len());
        for x in g.batch_norm(&xs, &h.bn1)? {
            let a = g.leaky_relu(x, LEAKY_RELU_ALPHA);
            let a = g.dropout(a);
            let (k, b) = (g.param(h.conv2.k), g.param(h.conv2.b));
            ys.push(g.conv2d(a, k, b, 1)?);
        }
        let mut out = Vec::with_capacity(ys.len());
        for y in g.batch_norm(&ys, &h.bn2)? {
            let a = g.leaky_relu(y, LEAKY_RELU_ALPHA);
            let a = g.dropout(a);
            let frames = g.channels_to_frames(a)?;
            let len = g.value(frames).rows();
            let r1 = self.bigru(g, frames, h.audio_gru1, len)?;
            let r1 = g.dropout(r1);
            let r2 = self.bigru(g, r1, h.audio_gru2, len)?;
            let r2 = g.dropout(r2);
            let e = self.dense(g, r2, h.audio_dense)?;
            out.push(g.dropout(e));
        }
        Ok(out)
    }

    /// Text encoder over unpadded `[m, width]` input. Returns `[m, embed_dim]`.
    pub fn text_node(&self, g: &mut Graph<'_>, text: &Tensor) -> Result<NodeId> {
        self.check_text(text)?;
        let x = g.constant(text.clone());
        let r = self.bigru(g, x, self.h.text_gru, text.rows())?;
        let r = g.dropout(r);
        let e = self.dense(g, r, self.h.text_dense)?;
        Ok(g.dropout(e))
    }

    /// Single-head scaled dot-product attention, text rows as queries. Returns
    /// `(context [m, d], weights [m, n'])`.
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        text: NodeId,
        audio: NodeId,
        audio_mask: &[bool],
    ) -> Result<(NodeId, NodeId)> {
        let (wq, wk, wv) = (g.param(self.h.wq), g.param(self.h.wk), g.param(self.h.wv));
        let q = g.linear(text, wq, None)?;
        let k = g.linear(audio, wk, None)?;
        let v = g.linear(audio, wv, None)?;
        let logits = g.matmul(q, k, false, true)?;
        let logits = g.scale(logits, 1.0 / (self.config.embed_dim as f64).sqrt());
        let w = g.masked_softmax(logits, audio_mask)?;
        let ctx = g.matmul(w, v, false, false)?;
        Ok((ctx, w))
    }

    /// Discriminator over the first `len` context rows. Returns a one-element probability.
    pub fn discriminate_node(
        &self,
        g: &mut Graph<'_>,
        context: NodeId,
        len: usize,
    ) -> Result<NodeId> {
        if len == 0 {
            return Err(Error::InvalidArgument(
                "discriminator needs at least one text position".into(),
            ));
        }
        let p = self.h.disc_gru;
        let f = g.gru(context, &p.fwd, len, false)?;
        let b = g.gru(context, &p.bwd, len, true)?;
        let last_f = g.select_row(f, len - 1)?;
        let first_b = g.select_row(b, 0)?;
        let both = g.concat(&[last_f, first_b])?;
        let logit = self.dense(g, both, self.h.disc_dense)?;
        Ok(g.sigmoid(logit))
    }

    /// Scores a batch of unpadded pairs. Returns a `[batch]` probability node.
    pub fn forward_batch(&self, g: &mut Graph<'_>, pairs: &[PairInput<'_>]) -> Result<NodeId> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mels: Vec<&Tensor> = pairs.iter().map(|p| p.mel).collect();
        let audio = self.audio_nodes(g, &mels)?;
        let mut probs = Vec::with_capacity(pairs.len());
        for (pair, a) in pairs.iter().zip(audio) {
            let t = self.text_node(g, pair.text)?;
            let mask = vec![true; g.value(a).rows()];
            let (ctx, _) = self.attend(g, t, a, &mask)?;
            probs.push(self.discriminate_node(g, ctx, pair.text.rows())?);
        }
        g.concat(&probs)
    }

    /// Scores a batch without recording gradients or touching running statistics.
    pub fn score_batch(&self, pairs: &[PairInput<'_>], mode: Mode) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, mode);
        let p = self.forward_batch(&mut g, pairs)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Probability that `mel` is an utterance of the keyword behind `emb`.
    pub fn score_pair(
        &self,
        mel: &MelSpectrogram,
        emb: &TtsEmbeddingSequence,
        mode: Mode,
    ) -> Result<f64> {
        self.check_tag(emb)?;
        let s = self.score_batch(
            &[PairInput {
                mel: mel.values(),
                text: emb.values(),
            }],
            mode,
        )?;
        Ok(s[0])
    }

    /// Scores a right-padded pair: `mel` is `[N, n_mels]`, `text` is `[M, width]`, and the masks
    /// mark real rows.
    pub fn score_padded(
        &self,
        mel: &Tensor,
        mel_mask: &[bool],
        text: &Tensor,
        text_mask: &[bool],
        mode: Mode,
    ) -> Result<f64> {
        if mel.rows() != mel_mask.len() || text.rows() != text_mask.len() {
            return Err(Error::Shape("mask lengths differ from row counts".into()));
        }
        let (n, m) = (prefix_len(mel_mask)?, prefix_len(text_mask)?);
        let mel = trim_sample(&mel.clone().reshape(vec![1, mel.rows(), mel.cols()])?, 0, n)?;
        let text = trim_sample(
            &text.clone().reshape(vec![1, text.rows(), text.cols()])?,
            0,
            m,
        )?;
        Ok(self.score_batch(
            &[PairInput {
                mel: &mel,
                text: &text,
            }],
            mode,
        )?[0])
    }

    fn check_tag(&self, emb: &TtsEmbeddingSequence) -> Result<()> {
        if emb.cols() != self.config.text_input_width {
            return Err(Error::Shape(format!(
                "{} embedding has width {}, model expects {}",
                emb.tag(),
                emb.cols(),
                self.config.text_input_width
            )));
        }
        Ok(())
    }

    /// Text encoder output as `embed_dim × m`.
    pub fn text_encode(&self, emb: &TtsEmbeddingSequence, mode: Mode) -> Result<TextEmbedding> {
        self.check_tag(emb)?;
        let mut g = Graph::new(&self.store, mode);
        let t = self.text_node(&mut g, emb.values())?;
        Ok(TextEmbedding {
            values: transpose(g.value(t)),
            mask: vec![true; emb.rows()],
        })
    }

    /// Audio encoder output as `embed_dim × ceil(n/2)`. Train mode needs a batch, so a single
    /// utterance is only accepted in eval mode.
    pub fn audio_encode(&self, mel: &MelSpectrogram, mode: Mode) -> Result<AudioEmbedding> {
        let mut g = Graph::new(&self.store, mode);
        let a = self.audio_nodes(&mut g, &[mel.values()])?[0];
        let n = g.value(a).rows();
        Ok(AudioEmbedding {
            values: transpose(g.value(a)),
            mask: vec![true; n],
        })
    }

    /// Cross-attention between encoded text and audio; audio positions masked off get weight 0.
    pub fn cross_attend(&self, t: &TextEmbedding, a: &AudioEmbedding) -> Result<ContextSequence> {
        let d = self.config.embed_dim;
        if t.values.rows() != d || a.values.rows() != d {
            return Err(Error::Shape(format!(
                "embeddings must have {d} rows, got {:?} and {:?}",
                t.values.shape(),
                a.values.shape()
            )));
        }
        if a.mask.len() != a.values.cols() {
            return Err(Error::Shape(
                "audio mask length differs from positions".into(),
            ));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let tn = g.constant(transpose(&t.values));
        let an = g.constant(transpose(&a.values));
        let (ctx, w) = self.attend(&mut g, tn, an, &a.mask)?;
        Ok(ContextSequence {
            values: g.value(ctx).clone(),
            weights: g.value(w).clone(),
        })
    }

    /// Discriminator score for a context sequence whose real rows are marked by `text_mask`.
    pub fn discriminate(&self, c: &ContextSequence, text_mask: &[bool], mode: Mode) -> Result<f64> {
        if text_mask.len() != c.values.rows() {
            return Err(Error::Shape(
                "text mask length differs from context rows".into(),
            ));
        }
        let len = prefix_len(text_mask)?;
        let mut g = Graph::new(&self.store, mode);
        let x = g.constant(c.values.clone());
        let p = self.discriminate_node(&mut g, x, len)?;
        Ok(g.value(p).data()[0])
    }
}
