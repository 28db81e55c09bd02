//! The network forward pass, written once against [`Graph`] so it runs both
//! eagerly and on a gradient tape.

use super::config::{BnActivation, ModelConfig};
use super::layers::pos_geometry;
use super::store::ParamSet;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::ops::{ConvGeom, Pad4, PoolMode};
use crate::tensor::{Real, Tensor};

/// Smallest LR extent the network accepts.
pub const MIN_INPUT: usize = 8;

/// Optional capture of named intermediate maps.
#[derive(Clone, Debug)]
pub struct ForwardTrace<V> {
    pub sfe: Option<V>,
    pub rcb: Vec<V>,
    pub rm: Option<V>,
    pub tfam_mask: Option<V>,
    pub fm: Option<V>,
    pub up: Option<V>,
}

impl<V> Default for ForwardTrace<V> {
    fn default() -> Self {
        ForwardTrace {
            sfe: None,
            rcb: Vec::new(),
            rm: None,
            tfam_mask: None,
            fm: None,
            up: None,
        }
    }
}

/// Binds a graph, its parameters and the config for one forward pass.
pub struct Net<'a, T: Real, G: Graph<T>> {
    pub g: &'a G,
    pub params: &'a ParamSet<G::V>,
    pub cfg: &'a ModelConfig,
    _t: std::marker::PhantomData<T>,
}

impl<'a, T: Real, G: Graph<T>> Net<'a, T, G> {
    pub fn new(g: &'a G, params: &'a ParamSet<G::V>, cfg: &'a ModelConfig) -> Self {
        Net {
            g,
            params,
            cfg,
            _t: std::marker::PhantomData,
        }
    }

    fn param(&self, path: &str) -> Result<&G::V> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))
    }

    fn conv(&self, layer: &str, x: &G::V, geom: ConvGeom) -> Result<G::V> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        self.g.conv2d(x, w, Some(b), geom)
    }

    fn conv3(&self, layer: &str, x: &G::V) -> Result<G::V> {
        self.conv(layer, x, ConvGeom::same(3, 1))
    }

    fn pw(&self, layer: &str, x: &G::V) -> Result<G::V> {
        self.conv(layer, x, ConvGeom::same(1, 1))
    }

    fn dw(&self, layer: &str, x: &G::V) -> Result<G::V> {
        let c = self.g.shape(x).c;
        self.conv(layer, x, ConvGeom::same(3, c))
    }

    /// Two-fold attention: a channel unit on pooled statistics and a
    /// positional unit on large-window avg/max pooling, merged into a sigmoid
    /// mask. Returns `(x * mask + x, mask)`.
    pub fn tfam(&self, prefix: &str, x: &G::V) -> Result<(G::V, G::V)> {
        let g = self.g;
        let s = g.shape(x);
        let (k, st) = (self.cfg.pos_kernel, self.cfg.pos_stride);

        let ca = self.conv(&format!("{prefix}.ca"), &g.global_avg_pool(x)?, ConvGeom::new(1, 0, 2))?;

        let gy = pos_geometry(s.h, k, st);
        let gx = pos_geometry(s.w, k, st);
        let padded = g.pad_replicate(
            x,
            Pad4 {
                top: gy.pad_before,
                bottom: gy.pad_after,
                left: gx.pad_before,
                right: gx.pad_after,
            },
        )?;
        let avg = g.pool2d(&padded, PoolMode::Avg, k, st)?;
        let max = g.pool2d(&padded, PoolMode::Max, k, st)?;
        let desc = g.concat_channels(&[&avg, &max])?;
        let pos = self.conv3(&format!("{prefix}.pos"), &desc)?;
        let pos = g.upsample_nearest(&pos, st)?;
        let pos = g.crop(&pos, gy.crop_offset, gx.crop_offset, s.h, s.w)?;

        let joint = g.add(&pos, &ca)?;
        let mask = g.sigmoid(&self.pw(&format!("{prefix}.merge"), &joint)?);
        let out = g.add(&g.mul(x, &mask)?, x)?;
        Ok((out, mask))
    }

    /// Adaptive residual block: `Dw(BN(x) + x) + Adp(x)` with disabled
    /// pathways removed.
    pub fn arb(&self, prefix: &str, x: &G::V) -> Result<G::V> {
        let g = self.g;
        let paths = self.cfg.paths;
        let bn = if paths.bottleneck {
            let mut a = self.dw(&format!("{prefix}.bn.dw1"), x)?;
            a = self.pw(&format!("{prefix}.bn.pw1"), &a)?;
            if self.cfg.bn_activation == BnActivation::AfterFirstPair {
                a = g.relu(&a);
            }
            a = self.dw(&format!("{prefix}.bn.dw2"), &a)?;
            if self.cfg.bn_activation == BnActivation::AfterSecondDw {
                a = g.relu(&a);
            }
            let (a, _) = self.tfam(&format!("{prefix}.bn.tfam"), &a)?;
            Some(self.pw(&format!("{prefix}.bn.pw2"), &a)?)
        } else {
            None
        };

        let mut out = if paths.residual {
            let merged = match &bn {
                Some(b) => g.add(b, x)?,
                None => x.clone(),
            };
            Some(self.dw(&format!("{prefix}.dw"), &merged)?)
        } else {
            bn
        };

        if paths.adaptive {
            let adp = self.pw(&format!("{prefix}.adp.pw"), &g.global_avg_pool(x)?)?;
            out = Some(match out {
                Some(o) => g.add(&o, &adp)?,
                None => {
                    let zeros = g.input(Tensor::zeros(g.shape(x)));
                    g.add(&zeros, &adp)?
                }
            });
        }
        out.ok_or_else(|| Error::Config("ARB with no enabled pathway".into()))
    }

    /// Residual concatenation block: ARBs in sequence, the input and every
    /// ARB output concatenated and fused back to C by a 1x1 conv, plus the
    /// local residual when enabled.
    pub fn rcb(&self, i: usize, x: &G::V) -> Result<G::V> {
        let g = self.g;
        let mut feats = vec![x.clone()];
        for j in 0..self.cfg.n_arb {
            let h = self.arb(&format!("rcb.{i}.arb.{j}"), feats.last().unwrap())?;
            feats.push(h);
        }
        let refs: Vec<&G::V> = feats.iter().collect();
        let fused = self.pw(&format!("rcb.{i}.fuse"), &g.concat_channels(&refs)?)?;
        if self.cfg.connections.lrc {
            g.add(&fused, x)
        } else {
            Ok(fused)
        }
    }

    /// Chain of RCBs; with the global residual connection the shallow
    /// features and every RCB output are concatenated and fused.
    pub fn residual_module(&self, sfe: &G::V, mut trace: Option<&mut ForwardTrace<G::V>>) -> Result<G::V> {
        let g = self.g;
        let mut hs = vec![sfe.clone()];
        for i in 0..self.cfg.n_rcb {
            let h = self.rcb(i, hs.last().unwrap())?;
            if let Some(t) = trace.as_deref_mut() {
                t.rcb.push(h.clone());
            }
            hs.push(h);
        }
        if self.cfg.connections.grc {
            let refs: Vec<&G::V> = hs.iter().collect();
            self.pw("rm.fuse", &g.concat_channels(&refs)?)
        } else {
            Ok(hs.pop().unwrap())
        }
    }

    /// Full network: `(N, 3, H, W) -> (N, 3, sH, sW)`, unclamped.
    pub fn forward(&self, img: &G::V, mut trace: Option<&mut ForwardTrace<G::V>>) -> Result<G::V> {
        let g = self.g;
        let s = g.shape(img);
        if s.c != 3 || s.h < MIN_INPUT || s.w < MIN_INPUT {
            return Err(Error::Shape(format!(
                "network input must be (N, 3, H, W) with H, W >= {MIN_INPUT}, got {s}"
            )));
        }
        let sfe = self.conv3("sfe", img)?;
        let rm = self.residual_module(&sfe, trace.as_deref_mut())?;
        let (att, mask) = self.tfam("fm.tfam", &rm)?;
        let mut fm = self.conv3("fm.gfe", &att)?;
        if self.cfg.connections.lrsc {
            fm = g.add(&fm, &sfe)?;
        }
        let up = match self.cfg.scale {
            4 => {
                let u = g.pixel_shuffle(&self.conv3("up.0", &fm)?, 2)?;
                g.pixel_shuffle(&self.conv3("up.1", &u)?, 2)?
            }
            r => g.pixel_shuffle(&self.conv3("up.0", &fm)?, r)?,
        };
        let out = self.conv3("rec", &up)?;
        if let Some(t) = trace {
            t.sfe = Some(sfe);
            t.rm = Some(rm);
            t.tfam_mask = Some(mask);
            t.fm = Some(fm);
            t.up = Some(up);
        }
        Ok(out)
    }
}

/// Run the network once.
pub fn mprnet_forward<T: Real, G: Graph<T>>(
    g: &G,
    params: &ParamSet<G::V>,
    cfg: &ModelConfig,
    img: &G::V,
    trace: Option<&mut ForwardTrace<G::V>>,
) -> Result<G::V> {
    Net::new(g, params, cfg).forward(img, trace)
}

/// Largest distance, along an axis of length `len`, between an input pixel
/// and any output pixel of the positional attention unit it can influence.
/// Walks the exact dependency structure: edge replication, pooling windows,
/// the 3x3 conv on the pooled grid, nearest upsampling and the crop.
pub fn pos_unit_reach(len: usize, kernel: usize, stride: usize) -> usize {
    let g = pos_geometry(len, kernel, stride);
    let mut reach = 0;
    for c in 0..len {
        let mut cells = vec![false; g.pooled];
        for (p, cell) in cells.iter_mut().enumerate() {
            *cell = (p * stride..p * stride + kernel).any(|q| q.saturating_sub(g.pad_before).min(len - 1) == c);
        }
        for x in 0..len {
            let p = (x + g.crop_offset) / stride;
            let lo = p.saturating_sub(1);
            let hi = (p + 1).min(g.pooled - 1);
            if cells[lo..=hi].iter().any(|&b| b) {
                reach = reach.max(x.abs_diff(c));
            }
        }
    }
    reach
}

/// Upper bound on how far, in HR pixels beyond its own `scale x scale`
/// footprint, a single LR pixel change can travel through the spatially local
/// operators of the network for an `h x w` input. Global-pooling branches
/// (channel attention, adaptive path) are excluded; they couple every pixel.
pub fn local_receptive_reach(cfg: &ModelConfig, h: usize, w: usize) -> usize {
    let (k, s) = (cfg.pos_kernel, cfg.pos_stride);
    let pos = pos_unit_reach(h, k, s).max(pos_unit_reach(w, k, s));
    let mut arb = 0;
    if cfg.paths.bottleneck {
        arb += 2 + pos;
    }
    if cfg.paths.residual {
        arb += 1;
    }
    // sfe, every ARB, the feature-module TFAM, gfe and the first up conv run
    // at LR; the second x2 stage (x4 only) and the reconstruction conv at
    // higher resolution.
    let lr = 1 + cfg.n_rcb * cfg.n_arb * arb + pos + 1 + 1;
    let after = if cfg.scale == 4 { 2 + 1 } else { 1 };
    cfg.scale * lr + after
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Eager;
    use crate::blocks::{build_model, count_params, ArbPaths, WeightStore};
    use crate::tensor::Shape;

    fn seeded(shape: Shape, seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Tensor::from_fn(shape, |_, _, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32
        })
    }

    fn eager_net<'a>(params: &'a ParamSet<Tensor>, cfg: &'a ModelConfig) -> Net<'a, f32, Eager> {
        Net::new(&Eager, params, cfg)
    }

    #[test]
    fn build_is_deterministic_and_counts_match() {
        let cfg = ModelConfig::tiny(8, 2, 2, 3);
        let a = build_model(&cfg, 7).unwrap();
        assert_eq!(a, build_model(&cfg, 7).unwrap());
        assert_ne!(a, build_model(&cfg, 8).unwrap());
        assert_eq!(a.numel() as u64, count_params(&cfg));
    }

    #[test]
    fn tfam_preserves_shape_and_zero_merge_gives_one_and_a_half() {
        let cfg = ModelConfig::tiny(64, 1, 1, 2);
        let mut store = build_model(&cfg, 1).unwrap();
        let x = seeded(Shape::new(1, 64, 32, 48), 2);
        let p = store.bind(&Eager);
        let (y, m) = eager_net(&p, &cfg).tfam("fm.tfam", &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));

        store.zero_prefix("fm.tfam.merge");
        let p = store.bind(&Eager);
        let (y, _) = eager_net(&p, &cfg).tfam("fm.tfam", &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 1.5 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_arb_is_zero_and_dirac_residual_is_identity() {
        let cfg = ModelConfig::tiny(8, 1, 1, 2);
        let mut store = build_model(&cfg, 1).unwrap();
        store.zero_prefix("rcb.0.arb.0");
        let x = seeded(Shape::new(2, 8, 9, 11), 3);
        let p = store.bind(&Eager);
        let y = eager_net(&p, &cfg).arb("rcb.0.arb.0", &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let res_only = ModelConfig {
            paths: ArbPaths {
                bottleneck: false,
                adaptive: false,
                residual: true,
            },
            ..cfg.clone()
        };
        let mut store = build_model(&res_only, 1).unwrap();
        let dirac = Tensor::from_fn(Shape::new(8, 1, 3, 3), |_, _, h, w| (h == 1 && w == 1) as u8 as f32);
        store.insert("rcb.0.arb.0.dw.weight", dirac);
        store.zero_prefix("rcb.0.arb.0.dw.bias");
        let p = store.bind(&Eager);
        let y = eager_net(&p, &res_only).arb("rcb.0.arb.0", &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rcb_selecting_input_slice_is_identity() {
        let cfg = ModelConfig {
            connections: crate::blocks::Connections {
                lrc: false,
                ..Default::default()
            },
            ..ModelConfig::tiny(8, 1, 1, 2)
        };
        let mut store = build_model(&cfg, 1).unwrap();
        store.zero_prefix("rcb.0.arb");
        let sel = Tensor::from_fn(Shape::new(8, 16, 1, 1), |o, i, _, _| (o == i) as u8 as f32);
        store.insert("rcb.0.fuse.weight", sel);
        store.zero_prefix("rcb.0.fuse.bias");
        let x = seeded(Shape::new(1, 8, 10, 10), 4);
        let p = store.bind(&Eager);
        assert_eq!(eager_net(&p, &cfg).rcb(0, &x).unwrap(), x);
    }

    #[test]
    fn lrc_adds_exactly_the_input() {
        let on = ModelConfig::tiny(8, 1, 2, 2);
        let off = ModelConfig {
            connections: crate::blocks::Connections {
                lrc: false,
                ..on.connections
            },
            ..on.clone()
        };
        let store = build_model(&on, 5).unwrap();
        let x = seeded(Shape::new(1, 8, 12, 9), 6);
        let p = store.bind(&Eager);
        let a = eager_net(&p, &on).rcb(0, &x).unwrap();
        let b = eager_net(&p, &off).rcb(0, &x).unwrap();
        for ((a, b), x) in a.data().iter().zip(b.data()).zip(x.data()) {
            assert!((a - b - x).abs() < 1e-5);
        }
    }

    #[test]
    fn grc_changes_the_output() {
        let on = ModelConfig::tiny(8, 2, 1, 2);
        let off = ModelConfig {
            connections: crate::blocks::Connections {
                grc: false,
                ..on.connections
            },
            ..on.clone()
        };
        let x = seeded(Shape::new(1, 3, 10, 10), 1);
        let run = |cfg: &ModelConfig| {
            let store = build_model(cfg, 5).unwrap();
            mprnet_forward(&Eager, &store.bind(&Eager), cfg, &x, None).unwrap()
        };
        assert_ne!(run(&on), run(&off));
    }

    #[test]
    fn output_shapes_and_trace() {
        for (n, h, w, s) in [(1, 16, 20, 3), (1, 17, 23, 4), (2, 8, 8, 2)] {
            let cfg = ModelConfig::tiny(8, 2, 1, s);
            let store = build_model(&cfg, 0).unwrap();
            let x = seeded(Shape::new(n, 3, h, w), 9);
            let mut trace = ForwardTrace::default();
            let y = mprnet_forward(&Eager, &store.bind(&Eager), &cfg, &x, Some(&mut trace)).unwrap();
            assert_eq!(y.shape(), Shape::new(n, 3, s * h, s * w));
            assert_eq!(trace.rcb.len(), 2);
            assert_eq!(trace.sfe.unwrap().shape(), Shape::new(n, 8, h, w));
            assert_eq!(trace.tfam_mask.unwrap().shape(), Shape::new(n, 8, h, w));
            assert_eq!(trace.up.unwrap().shape(), Shape::new(n, 8, s * h, s * w));
        }
    }

    #[test]
    fn undersized_or_wrong_channel_input_is_rejected() {
        let cfg = ModelConfig::tiny(8, 1, 1, 2);
        let p = build_model(&cfg, 0).unwrap().bind(&Eager);
        for shape in [Shape::new(1, 3, 7, 9), Shape::new(1, 1, 9, 9)] {
            let err = mprnet_forward(&Eager, &p, &cfg, &Tensor::zeros(shape), None).unwrap_err();
            assert!(matches!(err, Error::Shape(_)));
        }
    }

    #[test]
    fn expected_layout_matches_built_store() {
        let cfg = ModelConfig::default();
        let store = build_model(&cfg, 0).unwrap();
        let layout = WeightStore::<f32>::expected_layout(&cfg);
        assert_eq!(layout.len(), store.len());
        for (k, t) in store.iter() {
            assert_eq!(layout[k], t.shape().dims());
        }
    }

    #[test]
    fn pos_reach_is_small_and_positive() {
        for len in 8..40 {
            let r = pos_unit_reach(len, 7, 3);
            assert!((6..=14).contains(&r), "len {len}: {r}");
        }
    }
}
