//! Building blocks: convolution units and the extended inception module.
//!
//! Every convolution that is followed by batch normalization is bias-free;
//! the normalization's shift absorbs it. The extended inception module runs
//! four parallel branches — 1x1, 3x3, and two dilated 3x3s with distinct
//! rates — each behind a 1x1 channel reduction, and projects the
//! concatenated branch outputs back to the requested width with a final 1x1.
//! There is no pooling branch; down-sampling between encoder levels happens
//! outside the module.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::nn::graph::{BnParams, Graph, Value};
use crate::nn::params::ParamSet;
use crate::nn::ParamId;

use super::BlockVariant;

/// conv -> batch norm -> relu
#[derive(Debug, Clone)]
pub struct ConvUnit {
    w: ParamId,
    bn: BnParams,
    spec: ConvSpec,
}

impl ConvUnit {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
    ) -> Self {
        let (kh, kw) = kernel;
        let w = ps.add_conv_weight(
            format!("{name}.w"),
            &[out_c, in_c, kh, kw],
            in_c * kh * kw,
            rng,
        );
        let bn = BnParams {
            gamma: ps.add_ones(format!("{name}.bn.gamma"), &[out_c], true),
            beta: ps.add_zeros(format!("{name}.bn.beta"), &[out_c], true),
            running_mean: ps.add_zeros(format!("{name}.bn.running_mean"), &[out_c], false),
            running_var: ps.add_ones(format!("{name}.bn.running_var"), &[out_c], false),
        };
        ConvUnit {
            w,
            bn,
            spec: ConvSpec::same(kh, kw, dilation.0, dilation.1),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamSet, x: &Value, train: bool) -> Value {
        let c = g.conv2d_no_bias(ps, self.w, x, self.spec);
        let b = g.batch_norm(ps, &self.bn, &c, train);
        g.relu(&b)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

/// A spatial convolution inside an inception branch: either a single k x k
/// unit or the 1 x k / k x 1 factorized pair of the asymmetric variant.
#[derive(Debug, Clone)]
pub enum SpatialConv {
    Single(ConvUnit),
    Factorized(ConvUnit, ConvUnit),
}

impl SpatialConv {
    fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        k: usize,
        dilation: usize,
        variant: BlockVariant,
    ) -> Self {
        match variant {
            BlockVariant::Standard => SpatialConv::Single(ConvUnit::new(
                ps,
                rng,
                name,
                channels,
                channels,
                (k, k),
                (dilation, dilation),
            )),
            BlockVariant::Asymmetric => {
                let row = ConvUnit::new(
                    ps,
                    rng,
                    &format!("{name}.row"),
                    channels,
                    channels,
                    (1, k),
                    (1, dilation),
                );
                let col = ConvUnit::new(
                    ps,
                    rng,
                    &format!("{name}.col"),
                    channels,
                    channels,
                    (k, 1),
                    (dilation, 1),
                );
                SpatialConv::Factorized(row, col)
            }
        }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamSet, x: &Value, train: bool) -> Value {
        match self {
            SpatialConv::Single(u) => u.forward(g, ps, x, train),
            SpatialConv::Factorized(row, col) => {
                let r = row.forward(g, ps, x, train);
                col.forward(g, ps, &r, train)
            }
        }
    }
}

struct Branch {
    reduce: ConvUnit,
    spatial: Option<SpatialConv>,
    pointwise: Option<ConvUnit>,
}

/// Multi-scale convolution module with two extra dilated branches.
pub struct ExtendedInception {
    branches: Vec<Branch>,
    project: ConvUnit,
    in_channels: usize,
    out_channels: usize,
}

impl ExtendedInception {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        variant: BlockVariant,
        dilation_rates: (usize, usize),
    ) -> Result<Self> {
        if in_channels < 1 || out_channels < 1 {
            return Err(Error::Validation(format!(
                "inception channels must be >= 1, got in={in_channels} out={out_channels}"
            )));
        }
        let rc = (out_channels / 4).max(1);
        let mut branches = Vec::with_capacity(4);
        // branch 0: 1x1; branches 1..3: 3x3 at dilation 1, d0, d1
        let spatial_dilations = [1usize, dilation_rates.0, dilation_rates.1];
        for (i, spatial) in std::iter::once(None)
            .chain(spatial_dilations.iter().map(Some))
            .enumerate()
        {
            let bname = format!("{name}.br{i}");
            let reduce = ConvUnit::new(
                ps,
                rng,
                &format!("{bname}.reduce"),
                in_channels,
                rc,
                (1, 1),
                (1, 1),
            );
            let (spatial, pointwise) = match spatial {
                None => {
                    let pw = ConvUnit::new(
                        ps,
                        rng,
                        &format!("{bname}.conv"),
                        rc,
                        rc,
                        (1, 1),
                        (1, 1),
                    );
                    (None, Some(pw))
                }
                Some(&d) => (
                    Some(SpatialConv::new(
                        ps,
                        rng,
                        &format!("{bname}.conv"),
                        rc,
                        3,
                        d,
                        variant,
                    )),
                    None,
                ),
            };
            branches.push(Branch {
                reduce,
                spatial,
                pointwise,
            });
        }
        let project = ConvUnit::new(
            ps,
            rng,
            &format!("{name}.project"),
            4 * rc,
            out_channels,
            (1, 1),
            (1, 1),
        );
        Ok(ExtendedInception {
            branches,
            project,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamSet, x: &Value, train: bool) -> Value {
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let r = br.reduce.forward(g, ps, x, train);
            let y = match (&br.spatial, &br.pointwise) {
                (Some(sp), None) => sp.forward(g, ps, &r, train),
                (None, Some(pw)) => pw.forward(g, ps, &r, train),
                _ => unreachable!("branch has exactly one of spatial/pointwise"),
            };
            outs.push(y);
        }
        let refs: Vec<&Value> = outs.iter().collect();
        let cat = g.concat_channels(&refs);
        self.project.forward(g, ps, &cat, train)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// Learned 2x up-sampling: transposed conv (2x2, stride 2), bias-free,
/// followed by batch norm and relu.
#[derive(Debug, Clone)]
pub struct UpsampleUnit {
    w: ParamId,
    bn: BnParams,
}

impl UpsampleUnit {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        let w = ps.add_conv_weight(format!("{name}.w"), &[in_c, out_c, 2, 2], in_c * 4, rng);
        let bn = BnParams {
            gamma: ps.add_ones(format!("{name}.bn.gamma"), &[out_c], true),
            beta: ps.add_zeros(format!("{name}.bn.beta"), &[out_c], true),
            running_mean: ps.add_zeros(format!("{name}.bn.running_mean"), &[out_c], false),
            running_var: ps.add_ones(format!("{name}.bn.running_var"), &[out_c], false),
        };
        UpsampleUnit { w, bn }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamSet, x: &Value, train: bool) -> Value {
        let t = g.conv_transpose2x2_no_bias(ps, self.w, x);
        let b = g.batch_norm(ps, &self.bn, &t, train);
        g.relu(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_params(
        in_c: usize,
        out_c: usize,
        variant: BlockVariant,
    ) -> (ParamSet, ExtendedInception) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block =
            ExtendedInception::new(&mut ps, &mut rng, "blk", in_c, out_c, variant, (2, 4))
                .unwrap();
        (ps, block)
    }

    #[test]
    fn preserves_spatial_size() {
        let (mut ps, block) = block_params(128, 64, BlockVariant::Standard);
        let mut g = Graph::inference();
        let x = g.input(Array4::zeros((1, 128, 12, 12)));
        let y = block.forward(&mut g, &mut ps, &x, false);
        assert_eq!(y.dim(), (1, 64, 12, 12));
    }

    #[test]
    fn single_channel_input_widens_to_32() {
        let (mut ps, block) = block_params(1, 32, BlockVariant::Standard);
        let mut g = Graph::inference();
        let x = g.input(Array4::from_elem((1, 1, 256, 256), 0.5));
        let y = block.forward(&mut g, &mut ps, &x, false);
        assert_eq!(y.dim(), (1, 32, 256, 256));
    }

    #[test]
    fn asymmetric_variant_has_strictly_fewer_parameters() {
        let (ps_std, _) = block_params(4, 4, BlockVariant::Standard);
        let (ps_asym, _) = block_params(4, 4, BlockVariant::Asymmetric);
        assert!(
            ps_asym.trainable_scalars() < ps_std.trainable_scalars(),
            "asym {} !< std {}",
            ps_asym.trainable_scalars(),
            ps_std.trainable_scalars()
        );
    }

    #[test]
    fn rejects_zero_channels() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ExtendedInception::new(
            &mut ps,
            &mut rng,
            "blk",
            0,
            4,
            BlockVariant::Standard,
            (2, 4)
        )
        .is_err());
    }

    #[test]
    fn upsample_doubles_and_halves() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up = UpsampleUnit::new(&mut ps, &mut rng, "up", 8, 4);
        let mut g = Graph::inference();
        let x = g.input(Array4::zeros((2, 8, 6, 6)));
        let y = up.forward(&mut g, &mut ps, &x, false);
        assert_eq!(y.dim(), (2, 4, 12, 12));
    }
}
