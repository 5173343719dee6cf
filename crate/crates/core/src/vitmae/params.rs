//! Parameter containers generic over the slot type.
//!
//! The same structure holds tensors (weights), tape handles (a bound model),
//! shape descriptions (the layout) and optimizer moments, so every consumer
//! walks parameters in one fixed order.

use super::config::ModelConfig;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Decoder,
    Head,
}

/// Role of a parameter, used by initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Linear map stored `[fan_in, fan_out]`.
    Linear,
    Bias,
    NormGain,
    NormShift,
    MaskToken,
    /// Fixed sin-cos table, never trained.
    Position,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: Group,
}

impl ParamSpec {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Position
    }

    /// Decoupled weight decay applies to linear maps and the mask token.
    pub fn decays(&self) -> bool {
        matches!(self.kind, ParamKind::Linear | ParamKind::MaskToken)
    }
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)*
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn collect_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
                $(out.push(&self.$field);)*
            }

            pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
                $(out.push(&mut self.$field);)*
            }
        }
    };
}

param_struct!(
    /// Pre-norm Transformer block.
    BlockParams {
        norm1_gamma, norm1_beta, qkv_w, qkv_b, proj_w, proj_b,
        norm2_gamma, norm2_beta, fc1_w, fc1_b, fc2_w, fc2_b,
    }
);

param_struct!(
    /// Pooled-feature classifier: norm then linear projection.
    HeadParams { norm_gamma, norm_beta, w, b }
);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub pos: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm_gamma: P,
    pub norm_beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<P> {
    pub embed_w: P,
    pub embed_b: P,
    pub mask_token: P,
    pub pos: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm_gamma: P,
    pub norm_beta: P,
    pub pred_w: P,
    pub pred_b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub encoder: EncoderParams<P>,
    pub decoder: DecoderParams<P>,
    pub head: HeadParams<P>,
}

impl<P> Params<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Params<Q> {
        let f = &mut f;
        let e = &self.encoder;
        let encoder = EncoderParams {
            patch_w: f(&e.patch_w),
            patch_b: f(&e.patch_b),
            pos: f(&e.pos),
            blocks: e.blocks.iter().map(|b| b.map(f)).collect(),
            norm_gamma: f(&e.norm_gamma),
            norm_beta: f(&e.norm_beta),
        };
        let d = &self.decoder;
        let decoder = DecoderParams {
            embed_w: f(&d.embed_w),
            embed_b: f(&d.embed_b),
            mask_token: f(&d.mask_token),
            pos: f(&d.pos),
            blocks: d.blocks.iter().map(|b| b.map(f)).collect(),
            norm_gamma: f(&d.norm_gamma),
            norm_beta: f(&d.norm_beta),
            pred_w: f(&d.pred_w),
            pred_b: f(&d.pred_b),
        };
        let head = self.head.map(f);
        Params { encoder, decoder, head }
    }

    /// All slots in canonical order (the order `map` visits them).
    pub fn refs(&self) -> Vec<&P> {
        let mut out = Vec::new();
        let e = &self.encoder;
        out.extend([&e.patch_w, &e.patch_b, &e.pos]);
        e.blocks.iter().for_each(|b| b.collect_refs(&mut out));
        out.extend([&e.norm_gamma, &e.norm_beta]);
        let d = &self.decoder;
        out.extend([&d.embed_w, &d.embed_b, &d.mask_token, &d.pos]);
        d.blocks.iter().for_each(|b| b.collect_refs(&mut out));
        out.extend([&d.norm_gamma, &d.norm_beta, &d.pred_w, &d.pred_b]);
        self.head.collect_refs(&mut out);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        let e = &mut self.encoder;
        out.push(&mut e.patch_w);
        out.push(&mut e.patch_b);
        out.push(&mut e.pos);
        e.blocks.iter_mut().for_each(|b| b.collect_mut(&mut out));
        out.push(&mut e.norm_gamma);
        out.push(&mut e.norm_beta);
        let d = &mut self.decoder;
        out.push(&mut d.embed_w);
        out.push(&mut d.embed_b);
        out.push(&mut d.mask_token);
        out.push(&mut d.pos);
        d.blocks.iter_mut().for_each(|b| b.collect_mut(&mut out));
        out.push(&mut d.norm_gamma);
        out.push(&mut d.norm_beta);
        out.push(&mut d.pred_w);
        out.push(&mut d.pred_b);
        self.head.collect_mut(&mut out);
        out
    }

    /// Pairs slots of two structures with identical layout.
    pub fn zip_map<Q, R>(&self, other: &Params<Q>, mut f: impl FnMut(&P, &Q) -> R) -> Params<R> {
        let mut others = other.refs().into_iter();
        self.map(|p| f(p, others.next().expect("identical layouts")))
    }
}

fn spec(name: String, shape: Vec<usize>, kind: ParamKind, group: Group) -> ParamSpec {
    ParamSpec { name, shape, kind, group }
}

fn block_layout(prefix: &str, width: usize, hidden: usize, group: Group) -> BlockParams<ParamSpec> {
    let s = |n: &str, shape: Vec<usize>, kind| spec(format!("{prefix}.{n}"), shape, kind, group);
    BlockParams {
        norm1_gamma: s("norm1.weight", vec![width], ParamKind::NormGain),
        norm1_beta: s("norm1.bias", vec![width], ParamKind::NormShift),
        qkv_w: s("attn.qkv.weight", vec![width, 3 * width], ParamKind::Linear),
        qkv_b: s("attn.qkv.bias", vec![3 * width], ParamKind::Bias),
        proj_w: s("attn.proj.weight", vec![width, width], ParamKind::Linear),
        proj_b: s("attn.proj.bias", vec![width], ParamKind::Bias),
        norm2_gamma: s("norm2.weight", vec![width], ParamKind::NormGain),
        norm2_beta: s("norm2.bias", vec![width], ParamKind::NormShift),
        fc1_w: s("mlp.fc1.weight", vec![width, hidden], ParamKind::Linear),
        fc1_b: s("mlp.fc1.bias", vec![hidden], ParamKind::Bias),
        fc2_w: s("mlp.fc2.weight", vec![hidden, width], ParamKind::Linear),
        fc2_b: s("mlp.fc2.bias", vec![width], ParamKind::Bias),
    }
}

/// Names, shapes and roles of every parameter for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Params<ParamSpec> {
    use Group::*;
    use ParamKind::*;
    let (n, pd, ew, dw) = (cfg.num_patches(), cfg.patch_dim(), cfg.enc_width, cfg.dec_width);
    let e = |name: &str, shape, kind| spec(format!("encoder.{name}"), shape, kind, Encoder);
    let d = |name: &str, shape, kind| spec(format!("decoder.{name}"), shape, kind, Decoder);
    let h = |name: &str, shape, kind| spec(format!("head.{name}"), shape, kind, Head);
    Params {
        encoder: EncoderParams {
            patch_w: e("patch_embed.weight", vec![pd, ew], Linear),
            patch_b: e("patch_embed.bias", vec![ew], Bias),
            pos: e("pos_embed", vec![n, ew], Position),
            blocks: (0..cfg.enc_depth)
                .map(|i| block_layout(&format!("encoder.blocks.{i}"), ew, cfg.mlp_hidden(ew), Encoder))
                .collect(),
            norm_gamma: e("norm.weight", vec![ew], NormGain),
            norm_beta: e("norm.bias", vec![ew], NormShift),
        },
        decoder: DecoderParams {
            embed_w: d("embed.weight", vec![ew, dw], Linear),
            embed_b: d("embed.bias", vec![dw], Bias),
            mask_token: d("mask_token", vec![1, dw], MaskToken),
            pos: d("pos_embed", vec![n, dw], Position),
            blocks: (0..cfg.dec_depth)
                .map(|i| block_layout(&format!("decoder.blocks.{i}"), dw, cfg.mlp_hidden(dw), Decoder))
                .collect(),
            norm_gamma: d("norm.weight", vec![dw], NormGain),
            norm_beta: d("norm.bias", vec![dw], NormShift),
            pred_w: d("pred.weight", vec![dw, pd], Linear),
            pred_b: d("pred.bias", vec![pd], Bias),
        },
        head: HeadParams {
            norm_gamma: h("norm.weight", vec![ew], NormGain),
            norm_beta: h("norm.bias", vec![ew], NormShift),
            w: h("linear.weight", vec![ew, cfg.num_aus], Linear),
            b: h("linear.bias", vec![cfg.num_aus], Bias),
        },
    }
}
