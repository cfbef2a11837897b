//! Small U-shaped encoder–decoder whose features are scaled and shifted by
//! the timestep and prompt embedding at every resolution.
//!
//! Parameters are addressed by name, so a trainable copy of the encoder
//! (the control adapter) can run the same code against its own store.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{
    init_uniform, timestep_features, Bound, Conv2d, Linear, ParamId, ParamStore, Tape, Var,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Channels of the diffused signal (3 for RGB).
    pub data_channels: usize,
    /// Extra conditioning channels concatenated to the input.
    pub cond_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub image_size: usize,
    pub embed_dim: usize,
    /// Prompt vocabulary size; embedding row 0 is the null prompt.
    pub n_prompts: usize,
}

impl ArchDescriptor {
    pub fn new(
        data_channels: usize,
        cond_channels: usize,
        image_size: usize,
        n_prompts: usize,
    ) -> Self {
        ArchDescriptor {
            data_channels,
            cond_channels,
            base_channels: 16,
            channel_mults: vec![1, 2],
            image_size,
            embed_dim: 32,
            n_prompts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.channel_mults.is_empty(),
            "at least one resolution level required"
        );
        ensure!(
            self.base_channels > 0 && self.embed_dim >= 2,
            "empty architecture"
        );
        let div = 1usize << self.channel_mults.len();
        ensure!(
            self.image_size % div == 0 && self.image_size >= div,
            "image size {} must be a multiple of {div}",
            self.image_size
        );
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn input_channels(&self) -> usize {
        self.data_channels + self.cond_channels
    }

    /// Channel count of each injection site: every encoder level, then the
    /// bottleneck.
    pub fn site_channels(&self) -> Vec<usize> {
        let mut c = self.channels();
        c.push(*c.last().unwrap());
        c
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unet(in={}+{}, base={}, mults={:?}, size={}, embed={}, prompts={})",
            self.data_channels,
            self.cond_channels,
            self.base_channels,
            self.channel_mults,
            self.image_size,
            self.embed_dim,
            self.n_prompts
        )
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EmbedLayout {
    t1: Linear,
    t2: Linear,
    prompt: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayout {
    conv_in: Conv2d,
    blocks: Vec<Conv2d>,
    downs: Vec<Conv2d>,
    mid: Conv2d,
    proj: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayout {
    ups: Vec<Conv2d>,
    proj: Vec<Linear>,
    out: Conv2d,
    skip: Conv2d,
}

#[derive(Debug, Clone)]
pub(crate) struct UNetLayout {
    pub embed: EmbedLayout,
    pub encoder: EncoderLayout,
    pub decoder: DecoderLayout,
}

impl EmbedLayout {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        arch: &ArchDescriptor,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let e = arch.embed_dim;
        let t1 = Linear::new(store, "embed.t1", e, e, rng);
        let t2 = Linear::new(store, "embed.t2", e, e, rng);
        let prompt = store.insert(
            "embed.prompt",
            init_uniform::<T>(&[arch.n_prompts + 1, e], 1, rng),
        );
        EmbedLayout { t1, t2, prompt }
    }

    pub fn find<T: Scalar>(store: &ParamStore<T>) -> Option<Self> {
        Some(EmbedLayout {
            t1: Linear::find(store, "embed.t1")?,
            t2: Linear::find(store, "embed.t2")?,
            prompt: store.find("embed.prompt")?,
        })
    }

    /// `silu(MLP(sinusoid(t)) + prompt_row)`, shape `[N, E]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        embed_dim: usize,
        ts: &[usize],
        prompt_rows: &[usize],
    ) -> Var {
        let tf = tape.leaf(timestep_features::<T>(ts, embed_dim), false);
        let h = self.t1.forward(tape, p, tf);
        let h = tape.silu(h);
        let h = self.t2.forward(tape, p, h);
        let pe = tape.embedding(p.var(self.prompt), prompt_rows);
        let e = tape.add(h, pe);
        tape.silu(e)
    }
}

impl EncoderLayout {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        arch: &ArchDescriptor,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ch = arch.channels();
        let l = arch.levels();
        let conv_in = Conv2d::new(
            store,
            "enc.conv_in",
            arch.input_channels(),
            ch[0],
            3,
            1,
            rng,
        );
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut proj = Vec::new();
        for i in 0..l {
            blocks.push(Conv2d::new(
                store,
                &format!("enc.block{i}"),
                ch[i],
                ch[i],
                3,
                1,
                rng,
            ));
            proj.push(Linear::new(
                store,
                &format!("enc.proj{i}"),
                arch.embed_dim,
                2 * ch[i],
                rng,
            ));
            let next = ch[(i + 1).min(l - 1)];
            downs.push(Conv2d::new(
                store,
                &format!("enc.down{i}"),
                ch[i],
                next,
                3,
                2,
                rng,
            ));
        }
        let mid = Conv2d::new(store, "enc.mid", ch[l - 1], ch[l - 1], 3, 1, rng);
        proj.push(Linear::new(
            store,
            "enc.proj_mid",
            arch.embed_dim,
            2 * ch[l - 1],
            rng,
        ));
        EncoderLayout {
            conv_in,
            blocks,
            downs,
            mid,
            proj,
        }
    }

    pub fn find<T: Scalar>(store: &ParamStore<T>, arch: &ArchDescriptor) -> Option<Self> {
        let l = arch.levels();
        let mut proj: Vec<Linear> = (0..l)
            .map(|i| Linear::find(store, &format!("enc.proj{i}")))
            .collect::<Option<_>>()?;
        proj.push(Linear::find(store, "enc.proj_mid")?);
        Some(EncoderLayout {
            conv_in: Conv2d::find(store, "enc.conv_in", 1)?,
            blocks: (0..l)
                .map(|i| Conv2d::find(store, &format!("enc.block{i}"), 1))
                .collect::<Option<_>>()?,
            downs: (0..l)
                .map(|i| Conv2d::find(store, &format!("enc.down{i}"), 2))
                .collect::<Option<_>>()?,
            mid: Conv2d::find(store, "enc.mid", 1)?,
            proj,
        })
    }

    /// Returns the feature map of every injection site.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, emb: Var) -> Vec<Var> {
        let mut h = self.conv_in.forward(tape, p, x);
        let mut sites = Vec::with_capacity(self.blocks.len() + 1);
        for i in 0..self.blocks.len() {
            let c = self.blocks[i].forward(tape, p, h);
            let b = self.proj[i].forward(tape, p, emb);
            let c = tape.film(c, b);
            let c = tape.silu(c);
            let c = tape.add(h, c);
            sites.push(c);
            let d = self.downs[i].forward(tape, p, c);
            h = tape.silu(d);
        }
        let c = self.mid.forward(tape, p, h);
        let b = self.proj[self.blocks.len()].forward(tape, p, emb);
        let c = tape.film(c, b);
        let c = tape.silu(c);
        sites.push(tape.add(h, c));
        sites
    }
}

impl DecoderLayout {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        arch: &ArchDescriptor,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ch = arch.channels();
        let l = arch.levels();
        let mut ups = Vec::new();
        let mut proj = Vec::new();
        for i in 0..l {
            let below = ch[(i + 1).min(l - 1)];
            ups.push(Conv2d::new(
                store,
                &format!("dec.up{i}"),
                below + ch[i],
                ch[i],
                3,
                1,
                rng,
            ));
            proj.push(Linear::new(
                store,
                &format!("dec.proj{i}"),
                arch.embed_dim,
                2 * ch[i],
                rng,
            ));
        }
        let out = Conv2d::new(store, "dec.out", ch[0], arch.data_channels, 3, 1, rng);
        let skip = Conv2d::new(
            store,
            "dec.skip",
            arch.input_channels(),
            arch.data_channels,
            1,
            1,
            rng,
        );
        DecoderLayout {
            ups,
            proj,
            out,
            skip,
        }
    }

    pub fn find<T: Scalar>(store: &ParamStore<T>, arch: &ArchDescriptor) -> Option<Self> {
        let l = arch.levels();
        Some(DecoderLayout {
            ups: (0..l)
                .map(|i| Conv2d::find(store, &format!("dec.up{i}"), 1))
                .collect::<Option<_>>()?,
            proj: (0..l)
                .map(|i| Linear::find(store, &format!("dec.proj{i}")))
                .collect::<Option<_>>()?,
            out: Conv2d::find(store, "dec.out", 1)?,
            skip: Conv2d::find(store, "dec.skip", 1)?,
        })
    }

    /// `input` feeds a 1×1 skip straight to the output.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: Var,
        sites: &[Var],
        emb: Var,
    ) -> Var {
        let l = self.ups.len();
        let mut h = sites[l];
        for i in (0..l).rev() {
            let up = tape.upsample2(h);
            let cat = tape.concat(up, sites[i]);
            let c = self.ups[i].forward(tape, p, cat);
            let b = self.proj[i].forward(tape, p, emb);
            let c = tape.film(c, b);
            h = tape.silu(c);
        }
        let out = self.out.forward(tape, p, h);
        let skip = self.skip.forward(tape, p, input);
        tape.add(out, skip)
    }
}

impl UNetLayout {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        arch: &ArchDescriptor,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        UNetLayout {
            embed: EmbedLayout::init(store, arch, rng),
            encoder: EncoderLayout::init(store, arch, rng),
            decoder: DecoderLayout::init(store, arch, rng),
        }
    }

    pub fn find<T: Scalar>(store: &ParamStore<T>, arch: &ArchDescriptor) -> Option<Self> {
        Some(UNetLayout {
            embed: EmbedLayout::find(store)?,
            encoder: EncoderLayout::find(store, arch)?,
            decoder: DecoderLayout::find(store, arch)?,
        })
    }
}

/// Shape check for stores loaded from disk.
pub(crate) fn expected_shapes<T: Scalar>(arch: &ArchDescriptor) -> Vec<(String, Vec<usize>)> {
    let mut store = ParamStore::<T>::new();
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    UNetLayout::init(&mut store, arch, &mut rng);
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect()
}

/// Width and depth of a U-Net, independent of its input/conditioning shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        ModelSize {
            base_channels: 16,
            channel_mults: vec![1, 2],
            embed_dim: 32,
        }
    }
}

impl ModelSize {
    pub fn arch(
        &self,
        data_channels: usize,
        cond_channels: usize,
        image_size: usize,
        n_prompts: usize,
    ) -> ArchDescriptor {
        ArchDescriptor {
            data_channels,
            cond_channels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            image_size,
            embed_dim: self.embed_dim,
            n_prompts,
        }
    }
}
