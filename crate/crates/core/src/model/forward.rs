use super::config::{GcInput, ModelConfig};
use super::params::{Block, Gm3dParams, Layout, Linear, Mlp, Norm};
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::geometry::PatchSet;
use crate::masking::MaskPartition;

const LN_EPS: f64 = 1e-5;

/// Patch coordinates of the selected patches as a `[n, K, 3]` tensor.
pub fn patch_tensor<T: Scalar>(ps: &PatchSet, idx: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(idx.len() * ps.k * 3);
    for &i in idx {
        for p in ps.patch(i) {
            data.extend(p.iter().map(|&c| T::from_f32(c).unwrap()));
        }
    }
    Tensor::new(vec![idx.len(), ps.k, 3], data).expect("patch tensor")
}

/// Centers of the selected patches as a `[n, 3]` tensor.
pub fn center_tensor<T: Scalar>(ps: &PatchSet, idx: &[usize]) -> Tensor<T> {
    let data = idx
        .iter()
        .flat_map(|&i| ps.centers[i].iter().map(|&c| T::from_f32(c).unwrap()))
        .collect();
    Tensor::new(vec![idx.len(), 3], data).expect("center tensor")
}

/// A parameter tree bound into a graph.
pub struct Net<'a> {
    pub config: &'a ModelConfig,
    pub layout: &'a Layout,
    pub vars: Vec<Var>,
}

/// Output of the decoder stage.
pub struct Decoded {
    /// `[Z^v, t_mask...]` plus decoder positional embeddings, `[N, d]`.
    pub input: Var,
    /// Decoder blocks applied to `input`, `[N, d]`.
    pub output: Var,
}

/// Everything the student produces for one masked sample.
pub struct StudentOutput {
    pub latent: Var,
    pub decoded: Decoded,
    /// Complexity score per token in decoder order (visible, then masked).
    pub gc: Var,
    /// Reconstructed masked patches, `[N^m, K, 3]`.
    pub recon: Var,
}

impl<'a> Net<'a> {
    /// Loads every tensor as a leaf. Only trainable bindings receive gradients.
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        params: &'a Gm3dParams<T>,
        layout: &'a Layout,
        trainable: bool,
    ) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Net {
            config: &params.config,
            layout,
            vars,
        }
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn linear<T: Scalar>(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Var {
        let y = g.matmul(x, self.v(l.w));
        g.add_row(y, self.v(l.b))
    }

    pub fn mlp<T: Scalar>(&self, g: &mut Graph<T>, x: Var, m: Mlp) -> Var {
        let h = self.linear(g, x, m.fc1);
        let h = g.gelu(h);
        self.linear(g, h, m.fc2)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Var {
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul_row(y, self.v(n.gain));
        g.add_row(y, self.v(n.bias))
    }

    fn attention<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: &Block) -> Var {
        let d = self.config.embed_dim;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = self.linear(g, x, b.qkv);
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let q = g.slice_cols(qkv, h * hd, hd);
                let k = g.slice_cols(qkv, d + h * hd, hd);
                let v = g.slice_cols(qkv, 2 * d + h * hd, hd);
                let kt = g.transpose(k);
                let s = g.matmul(q, kt);
                let s = g.scale(s, scale);
                let a = g.softmax(s);
                g.matmul(a, v)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.linear(g, cat, b.proj)
    }

    /// Pre-norm transformer block.
    fn block<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: &Block) -> Var {
        let h = self.norm(g, x, b.norm1);
        let a = self.attention(g, h, b);
        let x = g.add(x, a);
        let h = self.norm(g, x, b.norm2);
        let m = self.mlp(g, h, b.mlp);
        g.add(x, m)
    }

    /// Mini-PointNet: per-point MLP, then max over each patch's points.
    /// `patches` is `[n, K, 3]`, output `[n, d]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, patches: Var) -> Var {
        let s = g.shape(patches).to_vec();
        let (n, k) = (s[0], s[1]);
        let flat = g.reshape(patches, &[n * k, 3]);
        let h = self.mlp(g, flat, self.layout.embed);
        let h = g.reshape(h, &[n, k, self.config.embed_dim]);
        g.max_axis(h, 1)
    }

    /// Adds encoder positional embeddings of `centers` and runs the encoder.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var, centers: Var) -> Var {
        let pos = self.mlp(g, centers, self.layout.enc_pos);
        let mut x = g.add(tokens, pos);
        for b in &self.layout.encoder {
            x = self.block(g, x, b);
        }
        x
    }

    /// Appends one shared mask token per masked center after the latent
    /// tokens, adds decoder positional embeddings and runs the decoder.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        latent: Var,
        visible_centers: Var,
        masked_centers: Var,
    ) -> Decoded {
        let n_masked = g.shape(masked_centers)[0];
        let d = self.config.embed_dim;
        let (tokens, centers) = if n_masked == 0 {
            (latent, visible_centers)
        } else {
            let tok = g.reshape(self.v(self.layout.mask_token), &[1, d]);
            let masks = g.gather(tok, &vec![0; n_masked]);
            (
                g.concat(&[latent, masks]),
                g.concat(&[visible_centers, masked_centers]),
            )
        };
        let pos = self.mlp(g, centers, self.layout.dec_pos);
        let input = g.add(tokens, pos);
        let mut x = input;
        for b in &self.layout.decoder {
            x = self.block(g, x, b);
        }
        Decoded { input, output: x }
    }

    /// Tokenwise complexity score, `[n, d] -> [n]`.
    pub fn gc_head<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> Var {
        let n = g.shape(tokens)[0];
        let s = self.mlp(g, tokens, self.layout.gc_head);
        g.reshape(s, &[n])
    }

    /// Linear map from decoder tokens to center-relative patches, `[m, d] -> [m, K, 3]`.
    pub fn recon_head<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var) -> Var {
        let m = g.shape(tokens)[0];
        let y = self.linear(g, tokens, self.layout.recon);
        g.reshape(y, &[m, self.config.patch_size, 3])
    }

    /// Encoder over every patch of the cloud, `[N, d]`.
    pub fn encode_full<T: Scalar>(&self, g: &mut Graph<T>, ps: &PatchSet) -> Var {
        let all: Vec<usize> = (0..ps.n()).collect();
        let patches = g.constant(patch_tensor(ps, &all));
        let centers = g.constant(center_tensor(ps, &all));
        let tokens = self.embed(g, patches);
        self.encode(g, tokens, centers)
    }

    /// Complexity scores computed from the complete input, one per patch.
    pub fn teacher_scores<T: Scalar>(&self, g: &mut Graph<T>, ps: &PatchSet) -> Var {
        let z = self.encode_full(g, ps);
        match self.config.gc_input {
            GcInput::Tokens => self.gc_head(g, z),
            GcInput::Decoder => {
                let all: Vec<usize> = (0..ps.n()).collect();
                let centers = g.constant(center_tensor(ps, &all));
                let none = g.constant(center_tensor(ps, &[]));
                let decoded = self.decode(g, z, centers, none);
                self.gc_head(g, decoded.output)
            }
        }
    }

    /// Masked-autoencoder forward pass: encode visible patches, decode with
    /// mask tokens, score every token and reconstruct the masked patches.
    pub fn student<T: Scalar>(&self, g: &mut Graph<T>, ps: &PatchSet, mask: &MaskPartition) -> StudentOutput {
        let vis_patches = g.constant(patch_tensor(ps, &mask.visible));
        let vis_centers = g.constant(center_tensor(ps, &mask.visible));
        let mask_centers = g.constant(center_tensor(ps, &mask.masked));
        let tokens = self.embed(g, vis_patches);
        let latent = self.encode(g, tokens, vis_centers);
        let decoded = self.decode(g, latent, vis_centers, mask_centers);
        let gc = match self.config.gc_input {
            GcInput::Tokens => self.gc_head(g, decoded.input),
            GcInput::Decoder => self.gc_head(g, decoded.output),
        };
        let nv = mask.visible.len();
        let masked_rows: Vec<usize> = (nv..nv + mask.n_masked()).collect();
        let masked_tokens = g.gather(decoded.output, &masked_rows);
        let recon = self.recon_head(g, masked_tokens);
        StudentOutput {
            latent,
            decoded,
            gc,
            recon,
        }
    }
}

/// Runs `f` on a gradient-free binding of `params` and returns the value of
/// the node it produces.
pub fn infer<T: Scalar, F>(params: &Gm3dParams<T>, layout: &Layout, f: F) -> Tensor<T>
where
    F: FnOnce(&Net<'_>, &mut Graph<T>) -> Var,
{
    let mut g = Graph::new();
    let net = Net::bind(&mut g, params, layout, false);
    let out = f(&net, &mut g);
    debug_assert!(!g.requires_grad(out));
    g.value(out).clone()
}
