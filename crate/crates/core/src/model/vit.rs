use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::functional::{add_broadcast, argmax_rows, broadcast_leading, gelu, layer_norm, mean_axis};
use crate::autodiff::{Element, NoGradGuard, Tensor};

use super::{ModelConfig, ModelError, PruneMask};

/// Query/key/value matrices for each head plus the shared output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Element> {
    pub query: Vec<Tensor<T>>,
    pub key: Vec<Tensor<T>>,
    pub value: Vec<Tensor<T>>,
    /// `[heads * dim, dim]`: maps the concatenated head outputs back to `dim`.
    pub output: Tensor<T>,
    pub output_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Mlp<T: Element> {
    pub norm_gain: Tensor<T>,
    pub norm_shift: Tensor<T>,
    pub hidden: Tensor<T>,
    pub hidden_bias: Tensor<T>,
    pub out: Tensor<T>,
    pub out_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Block<T: Element> {
    pub attention: AttentionParams<T>,
    pub mlp: Option<Mlp<T>>,
}

#[derive(Debug, Clone)]
pub struct Vit<T: Element = f32> {
    pub config: ModelConfig,
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub positions: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub classifier: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

/// Result of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Element> {
    pub output: Tensor<T>,
    /// Rescaled head outputs `[B, N, D]`; `None` for pruned heads.
    pub heads: Vec<Option<Tensor<T>>>,
    /// `[h_1 .. h_H]`, the input of the output projection.
    pub concat: Tensor<T>,
}

/// Intermediates a forward pass exposes at the regularized layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Element> {
    pub logits: Tensor<T>,
    /// Tokens entering the regularized block, `[B, N, D]`.
    pub block_input: Tensor<T>,
    pub attention: AttentionOutput<T>,
}

/// Splits `[B, H, W, C]` images into `[B, N, p*p*C]` non-overlapping patches,
/// grid in row-major order, each patch flattened as (row, column, channel).
pub fn patchify<T: Element>(images: &Tensor<T>, config: &ModelConfig) -> Result<Tensor<T>, ModelError> {
    let [h, w, c] = config.image_shape();
    if images.ndim() != 4 || images.shape()[1..] != [h, w, c] {
        let batch = images.shape().first().copied().unwrap_or(0);
        return Err(ModelError::Input {
            expected: vec![batch, h, w, c],
            got: images.shape().to_vec(),
        });
    }
    let p = config.patch_size;
    let (gh, gw) = (h / p, w / p);
    let batch = images.shape()[0];
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..batch {
        let img = &src[b * h * w * c..(b + 1) * h * w * c];
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = gy * p + py;
                    let start = (row * w + gx * p) * c;
                    out.extend_from_slice(&img[start..start + p * c]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[batch, gh * gw, config.patch_dim()], out)?)
}

/// Patch projection plus learned positional embeddings, `[B, N, D]`.
pub fn patchify_embed<T: Element>(images: &Tensor<T>, model: &Vit<T>) -> Result<Tensor<T>, ModelError> {
    let patches = patchify(images, &model.config)?;
    let projected = add_broadcast(&patches.matmul(&model.patch_weight)?, &model.patch_bias)?;
    let n = model.config.num_tokens();
    let index: Vec<usize> = (0..n).collect();
    let pos = model.positions.gather_rows(&index)?;
    Ok(projected.add(&broadcast_leading(&pos, &[patches.shape()[0]])?)?)
}

/// Multi-head self-attention over `[B, N, D]` tokens.
///
/// Head `i` computes `softmax(x Wq_i (x Wk_i)^T / sqrt(D)) x Wv_i`. Pruned
/// heads contribute zeros; kept heads are scaled by `rescale` before the
/// concatenation is projected by the output matrix.
pub fn mhsa_forward<T: Element>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    keep: &[bool],
    rescale: f64,
) -> Result<AttentionOutput<T>, ModelError> {
    if !keep.iter().any(|&k| k) {
        return Err(ModelError::Mask("every head is pruned".into()));
    }
    if keep.len() != params.query.len() {
        return Err(ModelError::Mask(format!(
            "mask has {} heads, layer has {}",
            keep.len(),
            params.query.len()
        )));
    }
    let dim = *x.shape().last().unwrap_or(&0);
    let inv_sqrt_d = T::from_f64_lossy(1.0 / (dim as f64).sqrt());
    let rescale = T::from_f64_lossy(rescale);
    let mut heads = Vec::with_capacity(keep.len());
    for (i, &kept) in keep.iter().enumerate() {
        if !kept {
            heads.push(None);
            continue;
        }
        let q = x.matmul(&params.query[i])?;
        let k = x.matmul(&params.key[i])?;
        let v = x.matmul(&params.value[i])?;
        let attn = q.matmul(&k.transpose_last2()?)?.scale(inv_sqrt_d)?.softmax_last()?;
        let mut h = attn.matmul(&v)?;
        if rescale != T::one() {
            h = h.scale(rescale)?;
        }
        heads.push(Some(h));
    }
    let zeros = Tensor::zeros(x.shape());
    let parts: Vec<&Tensor<T>> = heads.iter().map(|h| h.as_ref().unwrap_or(&zeros)).collect();
    let concat = Tensor::concat_last(&parts)?;
    let output = add_broadcast(&concat.matmul(&params.output)?, &params.output_bias)?;
    Ok(AttentionOutput { output, heads, concat })
}

fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect();
    Tensor::parameter(shape, data).expect("shape matches data")
}

fn zeros_param<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).requires_grad_(true)
}

fn ones_param<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one()).requires_grad_(true)
}

impl<T: Element> Vit<T> {
    /// Random initialization: weights uniform in `±1/sqrt(fan_in)`, positional
    /// table uniform in `±0.02`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_weight = uniform(&mut rng, &[config.patch_dim(), d], fan(config.patch_dim()));
        let positions = uniform(&mut rng, &[config.num_tokens(), d], 0.02);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut query = Vec::new();
            let mut key = Vec::new();
            let mut value = Vec::new();
            for _ in 0..config.heads {
                query.push(uniform(&mut rng, &[d, d], fan(d)));
                key.push(uniform(&mut rng, &[d, d], fan(d)));
                value.push(uniform(&mut rng, &[d, d], fan(d)));
            }
            let output = uniform(&mut rng, &[config.heads * d, d], fan(config.heads * d));
            let mlp = (config.mlp_hidden > 0).then(|| Mlp {
                norm_gain: ones_param(&[d]),
                norm_shift: zeros_param(&[d]),
                hidden: uniform(&mut rng, &[d, config.mlp_hidden], fan(d)),
                hidden_bias: zeros_param(&[config.mlp_hidden]),
                out: uniform(&mut rng, &[config.mlp_hidden, d], fan(config.mlp_hidden)),
                out_bias: zeros_param(&[d]),
            });
            blocks.push(Block {
                attention: AttentionParams {
                    query,
                    key,
                    value,
                    output,
                    output_bias: zeros_param(&[d]),
                },
                mlp,
            });
        }
        let classifier = uniform(&mut rng, &[d, config.num_classes], fan(d));
        Ok(Self {
            config: config.clone(),
            patch_weight,
            patch_bias: zeros_param(&[d]),
            positions,
            blocks,
            classifier,
            classifier_bias: zeros_param(&[config.num_classes]),
        })
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("patch.weight".to_string(), self.patch_weight.clone()),
            ("patch.bias".to_string(), self.patch_bias.clone()),
            ("positions".to_string(), self.positions.clone()),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            let a = &block.attention;
            for h in 0..a.query.len() {
                out.push((format!("blocks.{l}.attn.query.{h}"), a.query[h].clone()));
                out.push((format!("blocks.{l}.attn.key.{h}"), a.key[h].clone()));
                out.push((format!("blocks.{l}.attn.value.{h}"), a.value[h].clone()));
            }
            out.push((format!("blocks.{l}.attn.output"), a.output.clone()));
            out.push((format!("blocks.{l}.attn.output_bias"), a.output_bias.clone()));
            if let Some(m) = &block.mlp {
                out.push((format!("blocks.{l}.mlp.norm_gain"), m.norm_gain.clone()));
                out.push((format!("blocks.{l}.mlp.norm_shift"), m.norm_shift.clone()));
                out.push((format!("blocks.{l}.mlp.hidden"), m.hidden.clone()));
                out.push((format!("blocks.{l}.mlp.hidden_bias"), m.hidden_bias.clone()));
                out.push((format!("blocks.{l}.mlp.out"), m.out.clone()));
                out.push((format!("blocks.{l}.mlp.out_bias"), m.out_bias.clone()));
            }
        }
        out.push(("classifier.weight".to_string(), self.classifier.clone()));
        out.push(("classifier.bias".to_string(), self.classifier_bias.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_slots(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.positions];
        for block in &mut self.blocks {
            let a = &mut block.attention;
            for ((q, k), v) in a.query.iter_mut().zip(a.key.iter_mut()).zip(a.value.iter_mut()) {
                out.push(q);
                out.push(k);
                out.push(v);
            }
            out.push(&mut a.output);
            out.push(&mut a.output_bias);
            if let Some(m) = &mut block.mlp {
                out.extend([
                    &mut m.norm_gain,
                    &mut m.norm_shift,
                    &mut m.hidden,
                    &mut m.hidden_bias,
                    &mut m.out,
                    &mut m.out_bias,
                ]);
            }
        }
        out.push(&mut self.classifier);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Replaces every parameter, in [`named_parameters`](Self::named_parameters) order.
    /// The new tensors become trainable leaves.
    pub fn set_parameters(&mut self, values: Vec<Tensor<T>>) -> Result<(), ModelError> {
        let mut slots = self.parameter_slots();
        if slots.len() != values.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, value) in slots.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(ModelError::Input {
                    expected: slot.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            **slot = value.requires_grad_(true);
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> Vit<U> {
        let mut out = Vit::<U>::init(&self.config, 0).expect("config already validated");
        let values = self.parameters().iter().map(|t| t.cast::<U>()).collect();
        out.set_parameters(values).expect("identical layout");
        out
    }

    pub fn forward(&self, images: &Tensor<T>, mask: Option<&PruneMask>) -> Result<ForwardTrace<T>, ModelError> {
        let tokens = patchify_embed(images, self)?;
        self.forward_tokens(&tokens, mask)
    }

    /// Runs the blocks and readout on already-embedded tokens.
    pub fn forward_tokens(&self, tokens: &Tensor<T>, mask: Option<&PruneMask>) -> Result<ForwardTrace<T>, ModelError> {
        if let Some(m) = mask {
            m.check(&self.config)?;
        }
        let mut x = tokens.clone();
        let mut trace = None;
        for (l, block) in self.blocks.iter().enumerate() {
            let all = vec![true; self.config.heads];
            let (keep, rescale) = match mask {
                Some(m) => (m.layer(l), m.rescale(l)),
                None => (all.as_slice(), 1.0),
            };
            let attn = mhsa_forward(&x, &block.attention, keep, rescale)?;
            let mut y = if self.config.use_residual {
                x.add(&attn.output)?
            } else {
                attn.output.clone()
            };
            if let Some(m) = &block.mlp {
                let normed = layer_norm(&y, &m.norm_gain, &m.norm_shift, T::from_f64_lossy(1e-5))?;
                let hidden = gelu(&add_broadcast(&normed.matmul(&m.hidden)?, &m.hidden_bias)?)?;
                let out = add_broadcast(&hidden.matmul(&m.out)?, &m.out_bias)?;
                y = if self.config.use_residual { y.add(&out)? } else { out };
            }
            if l == self.config.regularized_layer {
                trace = Some((x.clone(), attn));
            }
            x = y;
        }
        let batch = x.shape()[0];
        let pooled = mean_axis(&x, 1)?.reshape(&[batch, self.config.dim])?;
        let logits = add_broadcast(&pooled.matmul(&self.classifier)?, &self.classifier_bias)?;
        let (block_input, attention) = trace.expect("regularized layer validated");
        Ok(ForwardTrace {
            logits,
            block_input,
            attention,
        })
    }

    pub fn logits(&self, images: &Tensor<T>, mask: Option<&PruneMask>) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward(images, mask)?.logits)
    }

    /// Predicted classes without recording a graph; ties go to the lowest class.
    pub fn predict(&self, images: &Tensor<T>, mask: Option<&PruneMask>) -> Result<Vec<usize>, ModelError> {
        let _guard = NoGradGuard::new();
        Ok(argmax_rows(&self.logits(images, mask)?))
    }

    /// A one-head model built from `head` of a single-layer model, with that
    /// head's block of the output projection scaled by the original head count.
    /// Its forward equals this model's forward under [`PruneMask::single`].
    pub fn extract_head(&self, head: usize) -> Result<Vit<T>, ModelError> {
        if self.config.layers != 1 {
            return Err(ModelError::Config {
                field: "layers",
                reason: "head extraction needs a single-layer model".into(),
            });
        }
        if head >= self.config.heads {
            return Err(ModelError::Mask(format!("head {head} out of range")));
        }
        let d = self.config.dim;
        let src = &self.blocks[0].attention;
        let scale = T::from_usize(self.config.heads).unwrap();
        let rows = &src.output.data()[head * d * d..(head + 1) * d * d];
        let output = Tensor::parameter(&[d, d], rows.iter().map(|&v| v * scale).collect())?;
        let mut config = self.config.clone();
        config.heads = 1;
        let leaf = |t: &Tensor<T>| t.detach().requires_grad_(true);
        Ok(Vit {
            config,
            patch_weight: leaf(&self.patch_weight),
            patch_bias: leaf(&self.patch_bias),
            positions: leaf(&self.positions),
            blocks: vec![Block {
                attention: AttentionParams {
                    query: vec![leaf(&src.query[head])],
                    key: vec![leaf(&src.key[head])],
                    value: vec![leaf(&src.value[head])],
                    output,
                    output_bias: leaf(&src.output_bias),
                },
                mlp: self.blocks[0].mlp.clone(),
            }],
            classifier: leaf(&self.classifier),
            classifier_bias: leaf(&self.classifier_bias),
        })
    }
}
