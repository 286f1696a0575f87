use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Mode, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::synth::{Image, Region, RegionKind, Vocab};

/// Zeroes every pixel outside `region`. Whole-image regions return the input.
pub fn apply_mask(image: &Image, region: &Region) -> Image {
    if region.kind == RegionKind::Whole {
        return image.clone();
    }
    let mut out = image.clone();
    let r2 = region.radius * region.radius;
    for c in 0..image.channels {
        for y in 0..image.height {
            let dy = f64::from(y) - region.center.y;
            for x in 0..image.width {
                let dx = f64::from(x) - region.center.x;
                if dx * dx + dy * dy > r2 {
                    out.set(c, x, y, 0.0);
                }
            }
        }
    }
    out
}

/// Token ids truncated or padded (id 0) to `max_len`.
pub fn encode_tokens(vocab: &Vocab, tokens: &[String], max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.token_id(t)).collect();
    ids.resize(max_len, 0);
    ids
}

/// One forward-pass input.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub image: &'a Image,
    pub region: &'a Region,
    pub token_ids: &'a [usize],
}

/// Positions of each parameter in the store (and in a bound handle list).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub conv: Vec<(usize, usize)>,
    pub embed: usize,
    pub rnn_in: usize,
    pub rnn_hidden: usize,
    pub rnn_bias: usize,
    pub rnn_init: usize,
    pub att_proj_w: usize,
    pub att_proj_b: usize,
    pub att_glimpse_w: usize,
    pub att_glimpse_b: usize,
    pub cls_hidden_w: usize,
    pub cls_hidden_b: usize,
    pub cls_out_w: usize,
    pub cls_out_b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Concatenated glimpse features, length `glimpses * C`.
    pub attended: Var,
    /// `(glimpses, h * w)` spatial softmax maps.
    pub maps: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub features: Var,
    pub question: Var,
    pub attention: AttentionOutput,
    /// Answer distribution over the answer set.
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqaModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub index: ParamIndex,
}

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

impl<T: Scalar> VqaModel<T> {
    /// He-uniform convolutions, Glorot-uniform dense layers, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let mut conv = Vec::new();
        let mut in_ch = c.channels;
        for (i, st) in c.conv_stages.iter().enumerate() {
            let fan_in = in_ch * st.kernel * st.kernel;
            let w = params.insert(
                format!("conv{i}.weight"),
                uniform_tensor(&mut rng, &[st.filters, in_ch, st.kernel, st.kernel], (6.0 / fan_in as f64).sqrt()),
            )?;
            let b = params.insert(format!("conv{i}.bias"), Tensor::zeros(&[st.filters]))?;
            conv.push((w, b));
            in_ch = st.filters;
        }
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut dense = |params: &mut ParamStore<T>, name: &str, rows: usize, cols: usize| {
            params.insert(name, uniform_tensor(&mut rng, &[rows, cols], glorot(cols, rows)))
        };
        let (q, d, cf) = (c.question_dim, c.word_dim, c.feature_dim);
        let fused = c.glimpses * cf + q;
        let embed = dense(&mut params, "embed", c.token_vocab_size, d)?;
        let rnn_in = dense(&mut params, "rnn.w_in", q, d)?;
        let rnn_hidden = dense(&mut params, "rnn.w_hidden", q, q)?;
        let rnn_bias = params.insert("rnn.bias", Tensor::zeros(&[q]))?;
        let rnn_init = params.insert("rnn.init", Tensor::zeros(&[q]))?;
        let att_proj_w = dense(&mut params, "att.proj_w", q, cf)?;
        let att_proj_b = params.insert("att.proj_b", Tensor::zeros(&[q]))?;
        let att_glimpse_w = dense(&mut params, "att.glimpse_w", c.glimpses, q)?;
        let att_glimpse_b = params.insert("att.glimpse_b", Tensor::zeros(&[c.glimpses]))?;
        let cls_hidden_w = dense(&mut params, "cls.hidden_w", c.classifier_hidden, fused)?;
        let cls_hidden_b = params.insert("cls.hidden_b", Tensor::zeros(&[c.classifier_hidden]))?;
        let cls_out_w = dense(&mut params, "cls.out_w", c.answer_count, c.classifier_hidden)?;
        let cls_out_b = params.insert("cls.out_b", Tensor::zeros(&[c.answer_count]))?;
        Ok(Self {
            config,
            params,
            index: ParamIndex {
                conv,
                embed,
                rnn_in,
                rnn_hidden,
                rnn_bias,
                rnn_init,
                att_proj_w,
                att_proj_b,
                att_glimpse_w,
                att_glimpse_b,
                cls_hidden_w,
                cls_hidden_b,
                cls_out_w,
                cls_out_b,
            },
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> VqaModel<U> {
        VqaModel {
            config: self.config.clone(),
            params: self.params.cast(),
            index: self.index.clone(),
        }
    }

    /// Replaces parameter values, checking names and shapes.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Convolution stages (conv, ReLU, max-pool) over a masked image,
    /// giving the `(C, h, w)` feature map.
    pub fn encode_image(&self, g: &mut Graph<T>, p: &[Var], image: &Image) -> Result<Var> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        let got = [image.channels as usize, image.height as usize, image.width as usize];
        if expected != got {
            return Err(Error::shape("encode_image", &expected, &got));
        }
        let data = image.data.iter().map(|&v| T::of(f64::from(v))).collect();
        let mut x = g.constant(Tensor::from_vec(&expected, data)?);
        for (st, &(w, b)) in c.conv_stages.iter().zip(&self.index.conv) {
            x = g.conv2d(x, p[w], p[b], 1, st.kernel / 2)?;
            x = g.relu(x)?;
            if st.pool > 1 {
                x = g.max_pool2d(x, st.pool)?;
            }
        }
        Ok(x)
    }

    /// Single-layer tanh recurrence over the non-pad tokens. The final hidden
    /// state is the embedding; with no tokens it is `tanh(init)`.
    pub fn encode_question(&self, g: &mut Graph<T>, p: &[Var], token_ids: &[usize]) -> Result<Var> {
        let ix = &self.index;
        let (q, d) = (self.config.question_dim, self.config.word_dim);
        let vocab = self.config.token_vocab_size;
        let init = g.tanh(p[ix.rnn_init])?;
        let mut h = g.reshape(init, &[q, 1])?;
        for &id in token_ids.iter().take(self.config.max_question_len) {
            if id == 0 {
                continue;
            }
            let id = if id < vocab { id } else { 1 };
            let e = g.embedding(p[ix.embed], &[id])?;
            let e = g.reshape(e, &[d, 1])?;
            let a = g.matmul(p[ix.rnn_in], e)?;
            let b = g.matmul(p[ix.rnn_hidden], h)?;
            let s = g.add(a, b)?;
            let s = g.add_col(s, p[ix.rnn_bias])?;
            h = g.tanh(s)?;
        }
        g.reshape(h, &[q])
    }

    /// Scores `tanh(W_p v + b_p + q)` with a per-glimpse 1x1 projection, spatial
    /// softmax per glimpse, and map-weighted sums of `v`.
    pub fn attend<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        features: Var,
        question: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<AttentionOutput> {
        let ix = &self.index;
        let s = g.shape(features)?.to_vec();
        let (c, n) = (s[0], s[1] * s[2]);
        let v = g.reshape(features, &[c, n])?;
        let proj = g.matmul(p[ix.att_proj_w], v)?;
        let proj = g.add_col(proj, p[ix.att_proj_b])?;
        let joint = g.add_col(proj, question)?;
        let joint = g.tanh(joint)?;
        let joint = g.dropout(joint, self.config.dropout_rate, mode, rng)?;
        let scores = g.matmul(p[ix.att_glimpse_w], joint)?;
        let scores = g.add_col(scores, p[ix.att_glimpse_b])?;
        let maps = g.softmax(scores, 1)?;
        let pooled = g.spatial_weighted_sum(maps, v)?;
        let attended = g.reshape(pooled, &[self.config.glimpses * c])?;
        Ok(AttentionOutput { attended, maps })
    }

    /// `softmax(W_2 dropout(relu(W_1 [v', q] + b_1)) + b_2)`.
    pub fn fuse_classify<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        attended: Var,
        question: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let ix = &self.index;
        let fused = g.concat(&[attended, question])?;
        let n = g.value(fused)?.len();
        let x = g.reshape(fused, &[n, 1])?;
        let h = g.matmul(p[ix.cls_hidden_w], x)?;
        let h = g.add_col(h, p[ix.cls_hidden_b])?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.config.dropout_rate, mode, rng)?;
        let logits = g.matmul(p[ix.cls_out_w], h)?;
        let logits = g.add_col(logits, p[ix.cls_out_b])?;
        let logits = g.reshape(logits, &[self.config.answer_count])?;
        g.softmax(logits, 0)
    }

    /// Mask, encode both inputs, attend and classify, recording on `g`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        input: ModelInput<'_>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        if p.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        let masked = apply_mask(input.image, input.region);
        let features = self.encode_image(g, p, &masked)?;
        let question = self.encode_question(g, p, input.token_ids)?;
        let attention = self.attend(g, p, features, question, mode, rng)?;
        let probs = self.fuse_classify(g, p, attention.attended, question, mode, rng)?;
        Ok(ForwardOutput {
            features,
            question,
            attention,
            probs,
        })
    }

    /// Eval-mode answer distribution and attention maps on a fresh graph.
    pub fn predict(&self, input: ModelInput<'_>) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &p, input, Mode::Eval, &mut rng)?;
        Ok((
            g.value(out.probs)?.data().to_vec(),
            g.value(out.attention.maps)?.data().to_vec(),
        ))
    }
}
