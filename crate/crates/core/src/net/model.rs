//! Three-stage encoder-decoder with a bottleneck pooling block, long
//! connections, and deeply supervised auxiliary heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ddsp::{BlockCache, DdspBlock, DdspConfig, Wiring};
use super::layers::{
    sigmoid, sigmoid_backward, upsample_nearest, upsample_nearest_backward, Conv3d, ConvBnRelu,
    Mode, Module, Param, UnitCache, UpBnRelu,
};
use super::tensor::{Scalar, Tensor5};
use super::NetError;
use crate::losses::SupervisionWeights;
use crate::volgrid::Dims;

/// What sits at the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    None,
    Ddsp,
    Aspp,
}

/// How encoder features rejoin the decoder at equal resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LongConnection {
    None,
    /// Element-wise addition.
    Residual,
    /// Channel concatenation followed by a 1x1x1 merge.
    Concat,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(&self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(format!("unknown {} {other:?}", stringify!($ty))),
                }
            }
        }
    };
}

keyword_enum!(BlockKind { None => "none", Ddsp => "ddsp", Aspp => "aspp" });
keyword_enum!(LongConnection { None => "none", Residual => "residual", Concat => "concat" });

/// Which heads take part in the fused output: main, stage 2, stage 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FusionMask(pub [bool; 3]);

impl FusionMask {
    pub const MAIN_ONLY: FusionMask = FusionMask([true, false, false]);
    pub const ALL: FusionMask = FusionMask([true, true, true]);

    pub fn new(mask: [bool; 3]) -> Result<Self, NetError> {
        if !mask[0] {
            return Err(NetError::InvalidConfig("the fusion mask must enable the main head".into()));
        }
        Ok(Self(mask))
    }
}

impl fmt::Display for FusionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0.map(|v| v as u8);
        write!(f, "[{a},{b},{c}]")
    }
}

impl FromStr for FusionMask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let bits: Vec<bool> = inner
            .split(',')
            .map(|t| match t.trim() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(format!("bad fusion flag {other:?}")),
            })
            .collect::<Result<_, _>>()?;
        let arr: [bool; 3] = bits.try_into().map_err(|_| format!("fusion mask needs three flags: {s:?}"))?;
        FusionMask::new(arr).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Channel width of the full-, half-, and quarter-resolution stages.
    pub widths: [usize; 3],
    pub block: BlockKind,
    pub ddsp: DdspConfig,
    pub long_connection: LongConnection,
    pub supervision: SupervisionWeights,
    pub fusion: FusionMask,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [4, 8, 16],
            block: BlockKind::Ddsp,
            ddsp: DdspConfig::default(),
            long_connection: LongConnection::Residual,
            supervision: SupervisionWeights::default(),
            fusion: FusionMask::MAIN_ONLY,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(NetError::InvalidConfig("channel widths must be positive".into()));
        }
        if self.block != BlockKind::None {
            self.ddsp.validate()?;
        }
        FusionMask::new(self.fusion.0)?;
        Ok(())
    }
}

/// Sigmoid probabilities of the three heads, all at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads<T> {
    pub main: Tensor5<T>,
    pub stage2: Tensor5<T>,
    pub stage3: Tensor5<T>,
}

impl<T: Scalar> Heads<T> {
    pub fn as_array(&self) -> [&Tensor5<T>; 3] {
        [&self.main, &self.stage2, &self.stage3]
    }
}

/// Equal-weight average of the heads enabled in `mask`.
pub fn fuse_outputs<T: Scalar>(heads: &Heads<T>, mask: FusionMask) -> Tensor5<T> {
    let enabled: Vec<&Tensor5<T>> = heads
        .as_array()
        .into_iter()
        .zip(mask.0)
        .filter_map(|(h, on)| on.then_some(h))
        .collect();
    let mut out = enabled[0].clone();
    for h in &enabled[1..] {
        out.add_assign(h);
    }
    let k = T::of(enabled.len() as f64);
    out.map(|v| v / k)
}

#[derive(Debug, Clone)]
struct Head<T> {
    conv: Conv3d<T>,
    rate: usize,
}

#[derive(Debug, Clone)]
enum Bottleneck<T> {
    Identity,
    Block(DdspBlock<T>),
}

#[derive(Debug, Clone)]
enum Joiner<T> {
    Skip,
    Add,
    Merge(ConvBnRelu<T>),
}

#[derive(Debug, Clone)]
pub struct Net<T> {
    config: NetConfig,
    enc1a: ConvBnRelu<T>,
    enc1b: ConvBnRelu<T>,
    down1: ConvBnRelu<T>,
    enc2: ConvBnRelu<T>,
    down2: ConvBnRelu<T>,
    block: Bottleneck<T>,
    merge: ConvBnRelu<T>,
    up2: UpBnRelu<T>,
    join2: Joiner<T>,
    dec2: ConvBnRelu<T>,
    up1: UpBnRelu<T>,
    join1: Joiner<T>,
    dec1: ConvBnRelu<T>,
    head1: Head<T>,
    head2: Head<T>,
    head3: Head<T>,
    /// Multiplies encoder features at the long-connection sites; 1 normally.
    skip_gate: T,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetCache<T> {
    enc1a: UnitCache<T>,
    enc1b: UnitCache<T>,
    down1: UnitCache<T>,
    enc2: UnitCache<T>,
    down2: UnitCache<T>,
    block: Option<BlockCache<T>>,
    merge: UnitCache<T>,
    up2: UnitCache<T>,
    join2: Option<UnitCache<T>>,
    dec2: UnitCache<T>,
    up1: UnitCache<T>,
    join1: Option<UnitCache<T>>,
    dec1: UnitCache<T>,
    feats: [Tensor5<T>; 3],
    probs: [Tensor5<T>; 3],
}

impl<T: Scalar> Net<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let [w1, w2, w3] = config.widths;
        let cbr = |name: &str, i, o, k, s, r: &mut ChaCha8Rng| ConvBnRelu::new(name, i, o, k, s, 1, r);
        let enc1a = cbr("enc1a", config.in_channels, w1, 3, 1, r)?;
        let enc1b = cbr("enc1b", w1, w1, 3, 1, r)?;
        let down1 = cbr("down1", w1, w2, 3, 2, r)?;
        let enc2 = cbr("enc2", w2, w2, 3, 1, r)?;
        let down2 = cbr("down2", w2, w3, 3, 2, r)?;
        let (block, block_out) = match config.block {
            BlockKind::None => (Bottleneck::Identity, w3),
            kind => {
                let wiring = if kind == BlockKind::Ddsp { Wiring::Dense } else { Wiring::Parallel };
                let b = DdspBlock::new("block", w3, config.ddsp.clone(), wiring, r)?;
                let c = b.output_channels();
                (Bottleneck::Block(b), c)
            }
        };
        let merge = cbr("merge", block_out, w3, 1, 1, r)?;
        let up2 = UpBnRelu::new("up2", w3, w2);
        let joiner = |name: &str, w: usize, r: &mut ChaCha8Rng| -> Result<Joiner<T>, NetError> {
            Ok(match config.long_connection {
                LongConnection::None => Joiner::Skip,
                LongConnection::Residual => Joiner::Add,
                LongConnection::Concat => Joiner::Merge(ConvBnRelu::new(name, 2 * w, w, 1, 1, 1, r)?),
            })
        };
        let join2 = joiner("join2", w2, r)?;
        let dec2 = cbr("dec2", w2, w2, 3, 1, r)?;
        let up1 = UpBnRelu::new("up1", w2, w1);
        let join1 = joiner("join1", w1, r)?;
        let dec1 = cbr("dec1", w1, w1, 3, 1, r)?;
        let head = |name: &str, w, rate, r: &mut ChaCha8Rng| -> Result<Head<T>, NetError> {
            Ok(Head {
                conv: Conv3d::new(name, w, 1, 1, 1, 1, r)?,
                rate,
            })
        };
        let head1 = head("head_main", w1, 1, r)?;
        let head2 = head("head_stage2", w2, 2, r)?;
        let head3 = head("head_stage3", w3, 4, r)?;
        Ok(Self {
            config,
            enc1a,
            enc1b,
            down1,
            enc2,
            down2,
            block,
            merge,
            up2,
            join2,
            dec2,
            up1,
            join1,
            dec1,
            head1,
            head2,
            head3,
            skip_gate: T::one(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Scale applied to encoder features where they rejoin the decoder.
    /// Setting 0 turns a residual network into its no-connection twin.
    pub fn set_skip_gate(&mut self, gate: T) {
        self.skip_gate = gate;
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Heads<T>, NetCache<T>), NetError> {
        let d = x.dims();
        if d.nx % 4 != 0 || d.ny % 4 != 0 || d.nz % 4 != 0 {
            return Err(NetError::IndivisibleDims(d));
        }
        let (a, c_enc1a) = self.enc1a.forward(x, mode)?;
        let (e1, c_enc1b) = self.enc1b.forward(&a, mode)?;
        let (h, c_down1) = self.down1.forward(&e1, mode)?;
        let (e2, c_enc2) = self.enc2.forward(&h, mode)?;
        let (b0, c_down2) = self.down2.forward(&e2, mode)?;
        let (b1, c_block) = match &mut self.block {
            Bottleneck::Identity => (b0, None),
            Bottleneck::Block(b) => {
                let (y, c) = b.forward(&b0, mode)?;
                (y, Some(c))
            }
        };
        let (f3, c_merge) = self.merge.forward(&b1, mode)?;
        let (u2, c_up2) = self.up2.forward(&f3, mode)?;
        let (j2, c_join2) = join(&mut self.join2, u2, &e2, self.skip_gate, mode)?;
        let (f2, c_dec2) = self.dec2.forward(&j2, mode)?;
        let (u1, c_up1) = self.up1.forward(&f2, mode)?;
        let (j1, c_join1) = join(&mut self.join1, u1, &e1, self.skip_gate, mode)?;
        let (f1, c_dec1) = self.dec1.forward(&j1, mode)?;

        let p1 = head_forward(&self.head1, &f1, d)?;
        let p2 = head_forward(&self.head2, &f2, d)?;
        let p3 = head_forward(&self.head3, &f3, d)?;
        let heads = Heads {
            main: p1.clone(),
            stage2: p2.clone(),
            stage3: p3.clone(),
        };
        let cache = NetCache {
            enc1a: c_enc1a,
            enc1b: c_enc1b,
            down1: c_down1,
            enc2: c_enc2,
            down2: c_down2,
            block: c_block,
            merge: c_merge,
            up2: c_up2,
            join2: c_join2,
            dec2: c_dec2,
            up1: c_up1,
            join1: c_join1,
            dec1: c_dec1,
            feats: [f1, f2, f3],
            probs: [p1, p2, p3],
        };
        Ok((heads, cache))
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to each head's probabilities; returns the input gradient.
    pub fn backward(&mut self, cache: &NetCache<T>, grads: [&Tensor5<T>; 3]) -> Tensor5<T> {
        let gf1 = head_backward(&mut self.head1, &cache.feats[0], &cache.probs[0], grads[0]);
        let mut gf2 = head_backward(&mut self.head2, &cache.feats[1], &cache.probs[1], grads[1]);
        let mut gf3 = head_backward(&mut self.head3, &cache.feats[2], &cache.probs[2], grads[2]);

        let gj1 = self.dec1.backward(&cache.dec1, &gf1);
        let (gu1, mut ge1) = join_backward(&mut self.join1, cache.join1.as_ref(), &gj1, self.skip_gate);
        gf2.add_assign(&self.up1.backward(&cache.up1, &gu1));
        let gj2 = self.dec2.backward(&cache.dec2, &gf2);
        let (gu2, mut ge2) = join_backward(&mut self.join2, cache.join2.as_ref(), &gj2, self.skip_gate);
        gf3.add_assign(&self.up2.backward(&cache.up2, &gu2));
        let gb1 = self.merge.backward(&cache.merge, &gf3);
        let gb0 = match (&mut self.block, &cache.block) {
            (Bottleneck::Identity, _) => gb1,
            (Bottleneck::Block(b), Some(c)) => b.backward(c, &gb1),
            (Bottleneck::Block(_), None) => unreachable!("block cache recorded on forward"),
        };
        add_opt(&mut ge2, self.down2.backward(&cache.down2, &gb0));
        let ge2 = ge2.expect("down2 contributes");
        let gh = self.enc2.backward(&cache.enc2, &ge2);
        add_opt(&mut ge1, self.down1.backward(&cache.down1, &gh));
        let ge1 = ge1.expect("down1 contributes");
        let ga = self.enc1b.backward(&cache.enc1b, &ge1);
        self.enc1a.backward(&cache.enc1a, &ga)
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }

    /// Copy of this network in another precision.
    pub fn convert<U: Scalar>(&self) -> Net<U> {
        let mut out = Net::<U>::new(self.config.clone(), 0).expect("config already validated");
        let mut values: Vec<Vec<f64>> = Vec::new();
        self.visit(&mut |p| values.push(p.value.iter().map(|v| v.as_f64()).collect()));
        let mut it = values.into_iter();
        out.visit_mut(&mut |p| {
            let v = it.next().expect("same parameter layout");
            p.value = v.into_iter().map(U::of).collect();
        });
        out.skip_gate = U::of(self.skip_gate.as_f64());
        out
    }
}

fn add_opt<T: Scalar>(acc: &mut Option<Tensor5<T>>, t: Tensor5<T>) {
    match acc {
        Some(a) => a.add_assign(&t),
        None => *acc = Some(t),
    }
}

fn join<T: Scalar>(
    joiner: &mut Joiner<T>,
    up: Tensor5<T>,
    enc: &Tensor5<T>,
    gate: T,
    mode: Mode,
) -> Result<(Tensor5<T>, Option<UnitCache<T>>), NetError> {
    Ok(match joiner {
        Joiner::Skip => (up, None),
        Joiner::Add => {
            let mut y = up;
            y.add_assign(&enc.map(|v| v * gate));
            (y, None)
        }
        Joiner::Merge(unit) => {
            let cat = Tensor5::concat(&[&up, &enc.map(|v| v * gate)]);
            let (y, c) = unit.forward(&cat, mode)?;
            (y, Some(c))
        }
    })
}

/// Returns the gradients for the decoder path and the encoder features.
fn join_backward<T: Scalar>(
    joiner: &mut Joiner<T>,
    cache: Option<&UnitCache<T>>,
    g: &Tensor5<T>,
    gate: T,
) -> (Tensor5<T>, Option<Tensor5<T>>) {
    match joiner {
        Joiner::Skip => (g.clone(), None),
        Joiner::Add => (g.clone(), Some(g.map(|v| v * gate))),
        Joiner::Merge(unit) => {
            let gcat = unit.backward(cache.expect("merge cache recorded on forward"), g);
            let c = gcat.channels() / 2;
            let mut parts = gcat.split(&[c, c]);
            let ge = parts.pop().expect("two halves").map(|v| v * gate);
            (parts.pop().expect("two halves"), Some(ge))
        }
    }
}

fn head_forward<T: Scalar>(head: &Head<T>, f: &Tensor5<T>, out: Dims) -> Result<Tensor5<T>, NetError> {
    let z = head.conv.forward(f)?;
    let z = if head.rate == 1 { z } else { upsample_nearest(&z, head.rate, out) };
    Ok(sigmoid(&z))
}

fn head_backward<T: Scalar>(head: &mut Head<T>, feat: &Tensor5<T>, prob: &Tensor5<T>, g: &Tensor5<T>) -> Tensor5<T> {
    let gz = sigmoid_backward(prob, g);
    let gz = if head.rate == 1 {
        gz
    } else {
        upsample_nearest_backward(&gz, head.rate, feat.dims())
    };
    head.conv.backward(feat, &gz)
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}

impl<T: Scalar> Module<T> for Net<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.enc1a.visit(f);
        self.enc1b.visit(f);
        self.down1.visit(f);
        self.enc2.visit(f);
        self.down2.visit(f);
        if let Bottleneck::Block(b) = &self.block {
            b.visit(f);
        }
        self.merge.visit(f);
        self.up2.visit(f);
        if let Joiner::Merge(u) = &self.join2 {
            u.visit(f);
        }
        self.dec2.visit(f);
        self.up1.visit(f);
        if let Joiner::Merge(u) = &self.join1 {
            u.visit(f);
        }
        self.dec1.visit(f);
        self.head1.visit(f);
        self.head2.visit(f);
        self.head3.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.enc1a.visit_mut(f);
        self.enc1b.visit_mut(f);
        self.down1.visit_mut(f);
        self.enc2.visit_mut(f);
        self.down2.visit_mut(f);
        if let Bottleneck::Block(b) = &mut self.block {
            b.visit_mut(f);
        }
        self.merge.visit_mut(f);
        self.up2.visit_mut(f);
        if let Joiner::Merge(u) = &mut self.join2 {
            u.visit_mut(f);
        }
        self.dec2.visit_mut(f);
        self.up1.visit_mut(f);
        if let Joiner::Merge(u) = &mut self.join1 {
            u.visit_mut(f);
        }
        self.dec1.visit_mut(f);
        self.head1.visit_mut(f);
        self.head2.visit_mut(f);
        self.head3.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_are_full_resolution_probabilities() {
        let mut net = Net::<f32>::new(NetConfig::default(), 1).unwrap();
        let x = Tensor5::filled(1, 1, Dims::cube(16), 0.3);
        let (heads, _) = net.forward(&x, Mode::Train).unwrap();
        for h in heads.as_array() {
            assert_eq!(h.shape(), [1, 1, 16, 16, 16]);
            assert!(h.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let mut net = Net::<f32>::new(NetConfig::default(), 1).unwrap();
        let x = Tensor5::zeros(1, 1, Dims::new(16, 16, 6));
        assert!(matches!(net.forward(&x, Mode::Train), Err(NetError::IndivisibleDims(_))));
    }

    #[test]
    fn residual_with_gated_skips_equals_no_connection() {
        let x = Tensor5::from_vec(1, 1, Dims::cube(8), (0..512).map(|i| ((i * 37) % 11) as f64 / 11.0).collect());
        let base = NetConfig::default();
        let mut res = Net::<f64>::new(NetConfig { long_connection: LongConnection::Residual, ..base.clone() }, 5).unwrap();
        let mut none = Net::<f64>::new(NetConfig { long_connection: LongConnection::None, ..base }, 5).unwrap();
        let (a, _) = res.forward(&x, Mode::Train).unwrap();
        let (b, _) = none.forward(&x, Mode::Train).unwrap();
        assert_ne!(a, b);
        res.set_skip_gate(0.0);
        let (a, _) = res.forward(&x, Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fusion_averages_enabled_heads() {
        let d = Dims::cube(1);
        let heads = Heads {
            main: Tensor5::from_vec(1, 1, d, vec![0.2f64]),
            stage2: Tensor5::from_vec(1, 1, d, vec![0.5]),
            stage3: Tensor5::from_vec(1, 1, d, vec![0.8]),
        };
        assert_eq!(fuse_outputs(&heads, FusionMask::MAIN_ONLY).data(), &[0.2]);
        assert!((fuse_outputs(&heads, FusionMask::ALL).data()[0] - 0.5).abs() < 1e-15);
        assert!(FusionMask::new([false, true, true]).is_err());
        assert_eq!("[1,1,1]".parse::<FusionMask>().unwrap(), FusionMask::ALL);
    }

    #[test]
    fn parameter_names_are_unique() {
        for lc in [LongConnection::None, LongConnection::Residual, LongConnection::Concat] {
            for block in [BlockKind::None, BlockKind::Ddsp, BlockKind::Aspp] {
                let net = Net::<f32>::new(NetConfig { long_connection: lc, block, ..NetConfig::default() }, 0).unwrap();
                let mut names = Vec::new();
                net.visit(&mut |p| names.push(p.name.clone()));
                let n = names.len();
                names.sort();
                names.dedup();
                assert_eq!(names.len(), n);
            }
        }
    }
}
