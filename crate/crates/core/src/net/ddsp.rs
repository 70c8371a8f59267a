//! Densely dilated spatial pooling: dilated-convolution and pyramid-pooling
//! branches joined by cumulative channel concatenation.

use rand::Rng;
use serde::Serialize;

use super::layers::{
    avg_pool, avg_pool_backward, pooled_dims, relu, relu_backward, upsample_nearest,
    upsample_nearest_backward, BatchNorm3d, BnCache, Conv3d, ConvBnRelu, Mode, Module, Param,
    UnitCache,
};
use super::tensor::{Scalar, Tensor5};
use super::NetError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DdspConfig {
    pub dilation_rates: Vec<usize>,
    pub pooling_rates: Vec<usize>,
    /// Output channels of every branch.
    pub growth: usize,
}

impl Default for DdspConfig {
    fn default() -> Self {
        Self {
            dilation_rates: vec![1, 2, 3, 4],
            pooling_rates: vec![2, 4, 6],
            growth: 4,
        }
    }
}

fn strictly_increasing(rates: &[usize]) -> bool {
    rates.first().is_none_or(|&r| r >= 1) && rates.windows(2).all(|w| w[0] < w[1])
}

impl DdspConfig {
    pub fn new(dilation_rates: Vec<usize>, pooling_rates: Vec<usize>, growth: usize) -> Result<Self, NetError> {
        let cfg = Self {
            dilation_rates,
            pooling_rates,
            growth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !strictly_increasing(&self.dilation_rates) || !strictly_increasing(&self.pooling_rates) {
            return Err(NetError::InvalidConfig(format!(
                "rates must be positive and strictly increasing, got {:?} / {:?}",
                self.dilation_rates, self.pooling_rates
            )));
        }
        if self.branch_count() == 0 {
            return Err(NetError::InvalidConfig("a DDSP block needs at least one branch".into()));
        }
        if self.growth == 0 {
            return Err(NetError::InvalidConfig("growth channels must be positive".into()));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.dilation_rates.len() + self.pooling_rates.len()
    }

    /// `C_in + (dilations + poolings) * growth`.
    pub fn output_channels(&self, in_ch: usize) -> usize {
        in_ch + self.branch_count() * self.growth
    }
}

/// Average pool, 1x1x1 projection, nearest upsample back, batch-norm, ReLU.
#[derive(Debug, Clone)]
pub struct PyramidPool<T> {
    pub rate: usize,
    pub proj: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    input_dims: crate::volgrid::Dims,
    pooled: Tensor5<T>,
    bn: BnCache<T>,
    out: Tensor5<T>,
}

impl<T: Scalar> PyramidPool<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rate: usize, rng: &mut impl Rng) -> Result<Self, NetError> {
        if rate == 0 {
            return Err(NetError::InvalidConfig("pooling rate must be at least 1".into()));
        }
        Ok(Self {
            rate,
            proj: Conv3d::new(&format!("{name}.proj"), in_ch, out_ch, 1, 1, 1, rng)?,
            bn: BatchNorm3d::new(&format!("{name}.bn"), out_ch),
        })
    }

    /// Pool, project, and upsample; the part before batch-norm.
    pub fn project(&self, x: &Tensor5<T>) -> Result<(Tensor5<T>, Tensor5<T>), NetError> {
        let pooled = avg_pool(x, self.rate);
        let z = self.proj.forward(&pooled)?;
        Ok((pooled, upsample_nearest(&z, self.rate, x.dims())))
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, PoolCache<T>), NetError> {
        let (pooled, up) = self.project(x)?;
        let (n, bn) = self.bn.forward(&up, mode);
        let out = relu(&n);
        Ok((
            out.clone(),
            PoolCache {
                input_dims: x.dims(),
                pooled,
                bn,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &PoolCache<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let g = relu_backward(&cache.out, gout);
        let g = self.bn.backward(&cache.bn, &g);
        let g = upsample_nearest_backward(&g, self.rate, pooled_dims(cache.input_dims, self.rate));
        let g = self.proj.backward(&cache.pooled, &g);
        avg_pool_backward(&g, cache.input_dims, self.rate)
    }
}

impl<T: Scalar> Module<T> for PyramidPool<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.proj.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.proj.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub enum Branch<T> {
    Dilated(ConvBnRelu<T>),
    Pool(PyramidPool<T>),
}

#[derive(Debug, Clone)]
enum BranchCache<T> {
    Dilated(UnitCache<T>),
    Pool(PoolCache<T>),
}

impl<T: Scalar> Branch<T> {
    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BranchCache<T>), NetError> {
        Ok(match self {
            Branch::Dilated(u) => {
                let (y, c) = u.forward(x, mode)?;
                (y, BranchCache::Dilated(c))
            }
            Branch::Pool(p) => {
                let (y, c) = p.forward(x, mode)?;
                (y, BranchCache::Pool(c))
            }
        })
    }

    fn backward(&mut self, cache: &BranchCache<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        match (self, cache) {
            (Branch::Dilated(u), BranchCache::Dilated(c)) => u.backward(c, gout),
            (Branch::Pool(p), BranchCache::Pool(c)) => p.backward(c, gout),
            _ => unreachable!("branch cache kind follows the branch kind"),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Branch::Dilated(u) => u.visit(f),
            Branch::Pool(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Branch::Dilated(u) => u.visit_mut(f),
            Branch::Pool(p) => p.visit_mut(f),
        }
    }
}

/// How branch inputs are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Wiring {
    /// Branch `i` sees the block input concatenated with branches `0..i`.
    Dense,
    /// Every branch sees only the block input (parallel atrous pyramid).
    Parallel,
}

/// The block output is the block input concatenated with every branch output.
#[derive(Debug, Clone)]
pub struct DdspBlock<T> {
    pub config: DdspConfig,
    pub wiring: Wiring,
    pub in_ch: usize,
    pub branches: Vec<Branch<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    branches: Vec<BranchCache<T>>,
}

impl<T: Scalar> DdspBlock<T> {
    pub fn new(name: &str, in_ch: usize, config: DdspConfig, wiring: Wiring, rng: &mut impl Rng) -> Result<Self, NetError> {
        config.validate()?;
        let g = config.growth;
        let mut branches = Vec::with_capacity(config.branch_count());
        let width = |i: usize| match wiring {
            Wiring::Dense => in_ch + i * g,
            Wiring::Parallel => in_ch,
        };
        for (i, &r) in config.dilation_rates.iter().enumerate() {
            branches.push(Branch::Dilated(ConvBnRelu::new(
                &format!("{name}.dil{r}"),
                width(i),
                g,
                3,
                1,
                r,
                rng,
            )?));
        }
        let offset = config.dilation_rates.len();
        for (j, &r) in config.pooling_rates.iter().enumerate() {
            branches.push(Branch::Pool(PyramidPool::new(
                &format!("{name}.pool{r}"),
                width(offset + j),
                g,
                r,
                rng,
            )?));
        }
        Ok(Self {
            config,
            wiring,
            in_ch,
            branches,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.config.output_channels(self.in_ch)
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BlockCache<T>), NetError> {
        let mut outputs: Vec<Tensor5<T>> = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        let mut dense = x.clone();
        for branch in &mut self.branches {
            let input = match self.wiring {
                Wiring::Dense => &dense,
                Wiring::Parallel => x,
            };
            let (y, c) = branch.forward(input, mode)?;
            if self.wiring == Wiring::Dense {
                dense = Tensor5::concat(&[&dense, &y]);
            }
            outputs.push(y);
            caches.push(c);
        }
        let out = match self.wiring {
            Wiring::Dense => dense,
            Wiring::Parallel => {
                let mut parts = vec![x];
                parts.extend(outputs.iter());
                Tensor5::concat(&parts)
            }
        };
        Ok((out, BlockCache { branches: caches }))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let g = self.config.growth;
        let n = self.branches.len();
        let mut widths = vec![self.in_ch];
        widths.extend(std::iter::repeat_n(g, n));
        let mut parts = gout.split(&widths);
        let mut gbranch: Vec<Tensor5<T>> = parts.split_off(1);
        let mut gx = parts.pop().expect("input slot");
        for i in (0..n).rev() {
            let gin = self.branches[i].backward(&cache.branches[i], &gbranch[i]);
            match self.wiring {
                Wiring::Parallel => gx.add_assign(&gin),
                Wiring::Dense => {
                    let mut w = vec![self.in_ch];
                    w.extend(std::iter::repeat_n(g, i));
                    let mut pieces = gin.split(&w).into_iter();
                    gx.add_assign(&pieces.next().expect("input slot"));
                    for (j, p) in pieces.enumerate() {
                        gbranch[j].add_assign(&p);
                    }
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for DdspBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.branches.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.branches.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

/// Standalone pyramid pooling of `x` at `rate` through a fresh projection.
pub fn global_pyramid_pool<T: Scalar>(
    x: &Tensor5<T>,
    rate: usize,
    growth: usize,
    rng: &mut impl Rng,
) -> Result<Tensor5<T>, NetError> {
    let pool = PyramidPool::new("pool", x.channels(), growth, rate, rng)?;
    Ok(pool.project(x)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_channel_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = DdspBlock::<f32>::new("b", 8, DdspConfig::default(), Wiring::Dense, &mut rng).unwrap();
        assert_eq!(block.output_channels(), 36);
        let x = Tensor5::filled(1, 8, Dims::cube(8), 0.5);
        let (y, _) = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.channels(), 36);
        assert_eq!(y.dims(), Dims::cube(8));
    }

    #[test]
    fn table_rows_with_a_missing_axis_build() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [
            DdspConfig::new(vec![1, 2, 3, 4], vec![], 4).unwrap(),
            DdspConfig::new(vec![], vec![2, 4, 6], 4).unwrap(),
        ] {
            let mut b = DdspBlock::<f32>::new("b", 8, cfg.clone(), Wiring::Dense, &mut rng).unwrap();
            let (y, _) = b.forward(&Tensor5::zeros(2, 8, Dims::cube(4)), Mode::Train).unwrap();
            assert_eq!(y.channels(), cfg.output_channels(8));
        }
    }

    #[test]
    fn rejects_unordered_rates() {
        assert!(DdspConfig::new(vec![2, 1], vec![], 4).is_err());
        assert!(DdspConfig::new(vec![], vec![0, 2], 4).is_err());
        assert!(DdspConfig::new(vec![], vec![], 4).is_err());
    }

    #[test]
    fn pyramid_pool_shapes_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor5::filled(1, 2, Dims::cube(4), 1.25f64);
        let y = global_pyramid_pool(&x, 2, 3, &mut rng).unwrap();
        assert_eq!(y.dims(), Dims::cube(4));
        assert_eq!(y.channels(), 3);
        for c in 0..3 {
            let ch = y.channel(0, c);
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-15));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = PyramidPool::<f64>::new("p", 2, 3, 1, &mut rng).unwrap();
        let direct = pool.proj.forward(&x).unwrap();
        assert_eq!(pool.project(&x).unwrap().1, direct);
    }
}
