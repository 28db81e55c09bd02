//! The convolution inventory of a configured network, and parameter /
//! multiply-accumulate accounting derived from it.

use super::config::ModelConfig;

/// Resolution at which a layer's output lives, relative to the LR input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// Same extent as the LR input.
    Lr,
    /// The positional-attention pooling grid.
    Pooled,
    /// 1x1 (after global pooling).
    Global,
    /// Twice the LR extent (between the two x2 stages of the x4 up-net).
    Lr2x,
    /// Final output extent.
    Hr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub res: Resolution,
}

impl LayerSpec {
    fn new(path: String, c_in: usize, c_out: usize, k: usize, groups: usize, res: Resolution) -> Self {
        LayerSpec {
            path,
            c_in,
            c_out,
            k,
            groups,
            res,
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn bias_dims(&self) -> [usize; 4] {
        [1, self.c_out, 1, 1]
    }

    /// Multiply-accumulates per output position.
    pub fn macs_per_position(&self) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.k * self.k) as u64
    }

    pub fn params(&self) -> u64 {
        self.macs_per_position() + self.c_out as u64
    }

    pub fn kind(&self) -> &'static str {
        match (self.k, self.groups) {
            (_, g) if g == self.c_in && g == self.c_out && g > 1 => "depthwise",
            (1, 1) => "pointwise",
            (1, _) => "grouped 1x1",
            _ => "conv",
        }
    }
}

/// Replicate padding and crop offsets for the positional attention unit.
///
/// The pooled grid has `ceil(len / stride)` cells so that upsampling by the
/// stride covers the input; the input is edge-padded so the last window fits,
/// and the upsampled map is center-cropped back to `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosGeometry {
    pub pooled: usize,
    pub pad_before: usize,
    pub pad_after: usize,
    pub crop_offset: usize,
}

pub fn pos_geometry(len: usize, kernel: usize, stride: usize) -> PosGeometry {
    let pooled = len.div_ceil(stride).max(1);
    let padded = (pooled - 1) * stride + kernel;
    let pad_total = padded.saturating_sub(len);
    PosGeometry {
        pooled,
        pad_before: pad_total / 2,
        pad_after: pad_total - pad_total / 2,
        crop_offset: (pooled * stride - len) / 2,
    }
}

fn tfam_layers(prefix: &str, cfg: &ModelConfig, out: &mut Vec<LayerSpec>) {
    let (c, m) = (cfg.width, cfg.tfam_mid());
    out.push(LayerSpec::new(format!("{prefix}.ca"), c, m, 1, 2, Resolution::Global));
    out.push(LayerSpec::new(
        format!("{prefix}.pos"),
        2 * c,
        m,
        3,
        1,
        Resolution::Pooled,
    ));
    out.push(LayerSpec::new(format!("{prefix}.merge"), m, c, 1, 1, Resolution::Lr));
}

fn arb_layers(prefix: &str, cfg: &ModelConfig, out: &mut Vec<LayerSpec>) {
    let c = cfg.width;
    if cfg.paths.bottleneck {
        out.push(LayerSpec::new(format!("{prefix}.bn.dw1"), c, c, 3, c, Resolution::Lr));
        out.push(LayerSpec::new(format!("{prefix}.bn.pw1"), c, c, 1, 1, Resolution::Lr));
        out.push(LayerSpec::new(format!("{prefix}.bn.dw2"), c, c, 3, c, Resolution::Lr));
        tfam_layers(&format!("{prefix}.bn.tfam"), cfg, out);
        out.push(LayerSpec::new(format!("{prefix}.bn.pw2"), c, c, 1, 1, Resolution::Lr));
    }
    if cfg.paths.adaptive {
        out.push(LayerSpec::new(
            format!("{prefix}.adp.pw"),
            c,
            c,
            1,
            1,
            Resolution::Global,
        ));
    }
    // The merge Dw aggregates the bottleneck and residual streams, so it
    // exists only when the residual path does.
    if cfg.paths.residual {
        out.push(LayerSpec::new(format!("{prefix}.dw"), c, c, 3, c, Resolution::Lr));
    }
}

/// All convolutions of the network in forward order.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let c = cfg.width;
    let mut out = Vec::new();
    out.push(LayerSpec::new("sfe".into(), 3, c, 3, 1, Resolution::Lr));
    for i in 0..cfg.n_rcb {
        for j in 0..cfg.n_arb {
            arb_layers(&format!("rcb.{i}.arb.{j}"), cfg, &mut out);
        }
        out.push(LayerSpec::new(
            format!("rcb.{i}.fuse"),
            (cfg.n_arb + 1) * c,
            c,
            1,
            1,
            Resolution::Lr,
        ));
    }
    if cfg.connections.grc {
        out.push(LayerSpec::new(
            "rm.fuse".into(),
            (cfg.n_rcb + 1) * c,
            c,
            1,
            1,
            Resolution::Lr,
        ));
    }
    tfam_layers("fm.tfam", cfg, &mut out);
    out.push(LayerSpec::new("fm.gfe".into(), c, c, 3, 1, Resolution::Lr));
    match cfg.scale {
        4 => {
            out.push(LayerSpec::new("up.0".into(), c, 4 * c, 3, 1, Resolution::Lr));
            out.push(LayerSpec::new("up.1".into(), c, 4 * c, 3, 1, Resolution::Lr2x));
        }
        s => out.push(LayerSpec::new("up.0".into(), c, c * s * s, 3, 1, Resolution::Lr)),
    }
    out.push(LayerSpec::new("rec".into(), c, 3, 3, 1, Resolution::Hr));
    out
}

/// Closed-form learnable-scalar count, written independently of
/// [`layer_specs`] so the two can check each other.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let c = cfg.width as u64;
    let m = cfg.tfam_mid() as u64;
    let s = cfg.scale as u64;
    let (n_rcb, n_arb) = (cfg.n_rcb as u64, cfg.n_arb as u64);

    // Channel unit (two half-width 1x1 groups), 3x3 positional conv over the
    // avg/max concat, 1x1 merge back to C.
    let tfam = (m * (c / 2) + m) + (9 * 2 * c * m + m) + (m * c + c);
    let dw = 9 * c + c;
    let pw = c * c + c;
    let mut arb = 0;
    if cfg.paths.residual {
        arb += dw;
    }
    if cfg.paths.bottleneck {
        arb += 2 * dw + 2 * pw + tfam;
    }
    if cfg.paths.adaptive {
        arb += pw;
    }
    let rcb = n_arb * arb + (n_arb + 1) * c * c + c;
    let mut rm = n_rcb * rcb;
    if cfg.connections.grc {
        rm += (n_rcb + 1) * c * c + c;
    }
    let sfe = 27 * c + c;
    let fm = tfam + 9 * c * c + c;
    let up = if s == 4 {
        2 * (9 * c * 4 * c + 4 * c)
    } else {
        9 * c * c * s * s + c * s * s
    };
    let rec = 27 * c + 3;
    sfe + rm + fm + up + rec
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub path: String,
    pub kind: &'static str,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub macs: u64,
}

/// Parameter and multiply-accumulate totals with a per-layer breakdown.
/// Only convolutions are counted toward MACs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub params: u64,
    pub macs: u64,
    pub out_h: usize,
    pub out_w: usize,
    pub rows: Vec<LayerRow>,
}

/// Output size used for MAC accounting (a 720p frame).
pub const MAC_OUTPUT: (usize, usize) = (720, 1280);

impl ComplexityReport {
    /// Account `layers` for an LR input of `lr_h x lr_w` upscaled by `scale`.
    pub fn from_layers(layers: &[LayerSpec], lr_h: usize, lr_w: usize, scale: usize, pos: (usize, usize)) -> Self {
        let (pk, ps) = pos;
        let rows: Vec<LayerRow> = layers
            .iter()
            .map(|l| {
                let (out_h, out_w) = match l.res {
                    Resolution::Lr => (lr_h, lr_w),
                    Resolution::Pooled => (pos_geometry(lr_h, pk, ps).pooled, pos_geometry(lr_w, pk, ps).pooled),
                    Resolution::Global => (1, 1),
                    Resolution::Lr2x => (2 * lr_h, 2 * lr_w),
                    Resolution::Hr => (scale * lr_h, scale * lr_w),
                };
                LayerRow {
                    path: l.path.clone(),
                    kind: l.kind(),
                    c_in: l.c_in,
                    c_out: l.c_out,
                    k: l.k,
                    groups: l.groups,
                    out_h,
                    out_w,
                    params: l.params(),
                    macs: l.macs_per_position() * (out_h * out_w) as u64,
                }
            })
            .collect();
        ComplexityReport {
            params: rows.iter().map(|r| r.params).sum(),
            macs: rows.iter().map(|r| r.macs).sum(),
            out_h: scale * lr_h,
            out_w: scale * lr_w,
            rows,
        }
    }

    /// The network producing a 1280x720 output; the LR input is
    /// `(720 / s) x (1280 / s)`, rounded down for x3.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let (h, w) = MAC_OUTPUT;
        Self::from_layers(
            &layer_specs(cfg),
            h / cfg.scale,
            w / cfg.scale,
            cfg.scale,
            (cfg.pos_kernel, cfg.pos_stride),
        )
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<12} {:>6} {:>6} {:>2} {:>4} {:>11} {:>10} {:>16}\n",
            "layer", "kind", "c_in", "c_out", "k", "grp", "output", "params", "MACs"
        );
        for r in &self.rows {
            s += &format!(
                "{:<28} {:<12} {:>6} {:>6} {:>2} {:>4} {:>11} {:>10} {:>16}\n",
                r.path,
                r.kind,
                r.c_in,
                r.c_out,
                r.k,
                r.groups,
                format!("{}x{}", r.out_w, r.out_h),
                r.params,
                r.macs
            );
        }
        s += &format!(
            "{:<28} {:<12} {:>6} {:>6} {:>2} {:>4} {:>11} {:>10} {:>16}\n",
            "TOTAL",
            "",
            "",
            "",
            "",
            "",
            format!("{}x{}", self.out_w, self.out_h),
            self.params,
            self.macs
        );
        s
    }
}

pub fn count_macs(cfg: &ModelConfig) -> u64 {
    ComplexityReport::for_config(cfg).macs
}

/// Reference complexity of the published x4 model.
pub const REFERENCE_PARAMS: u64 = 538_000;
pub const REFERENCE_MACS: u64 = 31_300_000_000;
pub const PARAMS_BAND: f64 = 0.15;
pub const MACS_BAND: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub width: usize,
    pub n_rcb: usize,
    pub n_arb: usize,
    pub params: u64,
    pub macs: u64,
    pub in_band: bool,
    /// Sum of relative deviations from the reference params and MACs.
    pub score: f64,
}

/// Grid search over width {48, 56, 64} x n_rcb {2, 3, 4} x n_arb {2, 3} at
/// x4, ranked by in-band first, then closeness to the reference complexity.
pub fn calibrate() -> Vec<Candidate> {
    let mut out = Vec::new();
    for width in [48, 56, 64] {
        for n_rcb in [2, 3, 4] {
            for n_arb in [2, 3] {
                let cfg = ModelConfig::tiny(width, n_rcb, n_arb, 4);
                let params = count_params(&cfg);
                let macs = count_macs(&cfg);
                let dp = (params as f64 / REFERENCE_PARAMS as f64 - 1.0).abs();
                let dm = (macs as f64 / REFERENCE_MACS as f64 - 1.0).abs();
                out.push(Candidate {
                    width,
                    n_rcb,
                    n_arb,
                    params,
                    macs,
                    in_band: dp <= PARAMS_BAND && dm <= MACS_BAND,
                    score: dp + dm,
                });
            }
        }
    }
    out.sort_by(|a, b| b.in_band.cmp(&a.in_band).then(a.score.total_cmp(&b.score)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::config::{ablation, ArbPaths, Connections};

    #[test]
    fn layer_list_matches_closed_form() {
        for scale in [2, 3, 4] {
            for (_, paths) in ablation::arb_rows() {
                for (_, connections) in ablation::connection_rows() {
                    let cfg = ModelConfig {
                        paths,
                        connections,
                        ..ModelConfig::tiny(8, 2, 2, scale)
                    };
                    let listed: u64 = layer_specs(&cfg).iter().map(|l| l.params()).sum();
                    assert_eq!(listed, count_params(&cfg), "{cfg:?}");
                }
            }
        }
    }

    #[test]
    fn single_conv_accounting() {
        let l = LayerSpec::new("c".into(), 3, 64, 3, 1, Resolution::Hr);
        assert_eq!(l.params(), 1_792);
        let r = ComplexityReport::from_layers(&[l], 720, 1280, 1, (7, 3));
        assert_eq!(r.macs, 1_592_524_800);
    }

    #[test]
    fn pos_geometry_covers_input() {
        for len in 1..60 {
            for (k, s) in [(7, 3), (3, 2), (5, 5), (3, 1)] {
                let g = pos_geometry(len, k, s);
                assert!(g.pooled * s >= len);
                assert_eq!(len + g.pad_before + g.pad_after, (g.pooled - 1) * s + k);
                assert!(g.crop_offset + len <= g.pooled * s);
            }
        }
    }

    #[test]
    fn enabling_paths_and_grc_adds_params() {
        let base = ModelConfig::tiny(16, 2, 2, 2);
        let with = |paths: ArbPaths, connections: Connections| {
            count_params(&ModelConfig {
                paths,
                connections,
                ..base.clone()
            })
        };
        let c = Connections::default();
        let rows = ablation::arb_rows();
        let b = with(rows[0].1, c);
        assert!(b < with(rows[1].1, c));
        assert!(b < with(rows[2].1, c));
        assert!(with(rows[1].1, c) < with(rows[3].1, c));
        let no_grc = Connections { grc: false, ..c };
        assert!(with(ArbPaths::default(), no_grc) < with(ArbPaths::default(), c));
    }

    #[test]
    fn calibration_selects_default() {
        let best = &calibrate()[0];
        assert!(best.in_band, "{best:?}");
        let d = ModelConfig::default();
        assert_eq!((best.width, best.n_rcb, best.n_arb), (d.width, d.n_rcb, d.n_arb));
    }
}
