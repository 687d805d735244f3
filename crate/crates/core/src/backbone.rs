//! Part-feature extraction: global feature map, channel grouping, attention
//! maps, attention-pooled part features and the part-localization losses.
//!
//! Layouts: images are `[N, 1, S, S]`; the global feature map `E` is
//! `[N, C, W, H]`; attention maps are `[N, M, W·H]` with spatial index
//! `w·H + h`; part features are `[N, M, C]`. All losses returned here are summed
//! over the batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamSet};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const GROUPING_WEIGHT: &str = "grouping.weight";
pub const GROUPING_BIAS: &str = "grouping.bias";

pub fn conv_weight_name(stage: usize) -> alloc::string::String {
    format!("backbone.conv{stage}.weight")
}

pub fn conv_bias_name(stage: usize) -> alloc::string::String {
    format!("backbone.conv{stage}.bias")
}

/// Inserts backbone (He-normal convolutions, zero bias) and grouping
/// (`N(0, 1/C)` weights, zero bias) parameters.
pub fn init_params(params: &mut ParamSet, cfg: &BackboneConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Purpose::Init, 1, 0);
    let mut in_ch = cfg.in_channels;
    for (i, s) in cfg.stages.iter().enumerate() {
        let fan_in = in_ch * s.kernel * s.kernel;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let n = s.channels * fan_in;
        let w: Vec<f64> = (0..n).map(|_| rng::normal(&mut rng, std)).collect();
        params.insert(&conv_weight_name(i), Group::Backbone, Tensor::new(&[s.channels, in_ch, s.kernel, s.kernel], w)?)?;
        params.insert(&conv_bias_name(i), Group::Backbone, Tensor::zeros(&[s.channels]))?;
        in_ch = s.channels;
    }
    let (_, _, c) = cfg.feature_dims()?;
    let std = 1.0 / libm::sqrt(c as f64);
    let w: Vec<f64> = (0..cfg.parts * c * c).map(|_| rng::normal(&mut rng, std)).collect();
    params.insert(GROUPING_WEIGHT, Group::Grouping, Tensor::new(&[cfg.parts * c, c], w)?)?;
    params.insert(GROUPING_BIAS, Group::Grouping, Tensor::zeros(&[cfg.parts * c]))?;
    Ok(())
}

/// `E(x)`: the stacked `conv → ReLU → max-pool` stages, `[N,1,S,S] → [N,C,W,H]`.
pub fn extract_global_features(g: &mut Graph, params: &ParamSet, cfg: &BackboneConfig, images: Var) -> Result<Var> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_side || s[3] != cfg.input_side {
        return Err(Error::shape(
            "extract_global_features",
            format!(
                "expected [N, {}, {}, {}], got {s:?}",
                cfg.in_channels, cfg.input_side, cfg.input_side
            ),
        ));
    }
    let mut x = images;
    for (i, st) in cfg.stages.iter().enumerate() {
        let w = g.param(params, &conv_weight_name(i))?;
        let b = g.param(params, &conv_bias_name(i))?;
        x = g.conv2d(x, w, Some(b), st.stride, st.kernel / 2)?;
        x = g.relu(x)?;
        if st.pool > 1 {
            x = g.max_pool2d(x, st.pool, st.pool)?;
        }
    }
    Ok(x)
}

/// `G(E) = sigmoid(affine(GAP(E)))` reshaped to `[N, M, C]`.
pub fn channel_grouping(g: &mut Graph, params: &ParamSet, parts: usize, e: Var) -> Result<Var> {
    let s = g.shape(e).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("channel_grouping", format!("expected [N,C,W,H], got {s:?}")));
    }
    let (n, c, area) = (s[0], s[1], s[2] * s[3]);
    let flat = g.reshape(e, &[n, c, area])?;
    let summed = g.sum_last(flat)?;
    let pooled = g.scale(summed, 1.0 / area as f64)?;
    let pooled = g.reshape(pooled, &[n, c])?;
    let w = g.param(params, GROUPING_WEIGHT)?;
    let b = g.param(params, GROUPING_BIAS)?;
    let logits = g.affine(pooled, w, Some(b))?;
    let weights = g.sigmoid(logits)?;
    g.reshape(weights, &[n, parts, c])
}

/// Attention maps of a batch, plus each map's peak.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// `[N, M, W·H]` node.
    pub maps: Var,
    pub batch: usize,
    pub parts: usize,
    pub width: usize,
    pub height: usize,
    /// Peak `(w*, h*)` of map `m` of sample `n` at index `n·M + m`.
    pub peaks: Vec<(usize, usize)>,
}

impl AttentionMaps {
    pub fn peak(&self, sample: usize, part: usize) -> (usize, usize) {
        self.peaks[sample * self.parts + part]
    }
}

/// Row-major-first argmax of a `W×H` map stored as `w·H + h`.
pub fn peak_of(map: &[f64], height: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, v) in map.iter().enumerate() {
        if *v > map[best] {
            best = i;
        }
    }
    (best / height, best % height)
}

/// `A_m(w,h) = sigmoid(Σ_c G_{m,c} E_c(w,h))`.
pub fn attention_map(g: &mut Graph, grouping: Var, e: Var) -> Result<AttentionMaps> {
    let (gs, es) = (g.shape(grouping).to_vec(), g.shape(e).to_vec());
    if gs.len() != 3 || es.len() != 4 || gs[0] != es[0] || gs[2] != es[1] {
        return Err(Error::shape("attention_map", format!("G {gs:?}, E {es:?}")));
    }
    let (n, m, c, w, h) = (gs[0], gs[1], gs[2], es[2], es[3]);
    let flat = g.reshape(e, &[n, c, w * h])?;
    let logits = g.matmul(grouping, flat, false)?;
    let maps = g.sigmoid(logits)?;
    let peaks = g.value(maps).data().chunks(w * h).map(|map| peak_of(map, h)).collect();
    Ok(AttentionMaps { maps, batch: n, parts: m, width: w, height: h, peaks })
}

/// `z_{m,c} = Σ_{w,h} A_m(w,h)·E_c(w,h)`, shape `[N, M, C]`.
pub fn part_features(g: &mut Graph, attn: &AttentionMaps, e: Var) -> Result<Var> {
    let es = g.shape(e).to_vec();
    if es.len() != 4 || es[0] != attn.batch || es[2] != attn.width || es[3] != attn.height {
        return Err(Error::shape("part_features", format!("E {es:?} vs attention {}x{}", attn.width, attn.height)));
    }
    let flat = g.reshape(e, &[es[0], es[1], es[2] * es[3]])?;
    g.matmul(attn.maps, flat, true)
}

/// Squared distance of every cell to its map's peak; constant w.r.t. the maps.
fn peak_distances(attn: &AttentionMaps) -> Result<Tensor> {
    let area = attn.width * attn.height;
    let mut d = vec![0.0; attn.peaks.len() * area];
    for (i, &(pw, ph)) in attn.peaks.iter().enumerate() {
        for w in 0..attn.width {
            for h in 0..attn.height {
                let dw = w as f64 - pw as f64;
                let dh = h as f64 - ph as f64;
                d[i * area + w * attn.height + h] = dw * dw + dh * dh;
            }
        }
    }
    Tensor::new(&[attn.batch, attn.parts, area], d)
}

/// `L_dis(A_m) = Σ_{w,h} A_m(w,h)·[(w−w*)² + (h−h*)²]` per map, shape `[N, M]`.
/// Coordinates are raw cell indices and the peak is a constant.
pub fn loss_dis(g: &mut Graph, attn: &AttentionMaps) -> Result<Var> {
    let dist = g.constant(peak_distances(attn)?)?;
    let weighted = g.mul(attn.maps, dist)?;
    g.sum_last(weighted)
}

/// `L_div(A_m) = Σ_{w,h} A_m(w,h)·[max_{n≠m} A_n(w,h) − ζ]` per map, shape `[N, M]`.
/// Unclamped; with a single part the competitor maximum is 0.
pub fn loss_div(g: &mut Graph, attn: &AttentionMaps, zeta: f64) -> Result<Var> {
    let others = g.max_others(attn.maps)?;
    let margin = g.add_scalar(others, -zeta)?;
    let weighted = g.mul(attn.maps, margin)?;
    g.sum_last(weighted)
}

/// `ℓ_part = Σ_m L_dis(A_m) + λ·L_div(A_m)`, summed over the batch.
pub fn loss_part(g: &mut Graph, attn: &AttentionMaps, zeta: f64, lambda_div: f64) -> Result<Var> {
    let dis = loss_dis(g, attn)?;
    let div = loss_div(g, attn, zeta)?;
    let div = g.scale(div, lambda_div)?;
    let total = g.add(dis, div)?;
    g.sum_all(total)
}

/// Builds [`AttentionMaps`] from explicit map values `[N, M, W, H]` (no gradient).
pub fn maps_from_values(g: &mut Graph, maps: &Tensor) -> Result<AttentionMaps> {
    let s = maps.shape();
    if s.len() != 4 {
        return Err(Error::shape("maps_from_values", format!("expected [N,M,W,H], got {s:?}")));
    }
    let (n, m, w, h) = (s[0], s[1], s[2], s[3]);
    let peaks = maps.data().chunks(w * h).map(|map| peak_of(map, h)).collect();
    let v = g.constant(maps.clone().reshaped(&[n, m, w * h])?)?;
    Ok(AttentionMaps { maps: v, batch: n, parts: m, width: w, height: h, peaks })
}

/// Mean over part pairs `m≠n` of `Σ A_m A_n / (½Σ(A_m + A_n))`, averaged over the batch.
/// Lower means the parts attend to more distinct regions.
pub fn mean_pairwise_overlap(maps: &Tensor) -> f64 {
    let s = maps.shape();
    let (n, m, area) = (s[0], s[1], s[2..].iter().product::<usize>());
    if m < 2 {
        return 0.0;
    }
    let d = maps.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for i in 0..m {
            for j in (i + 1)..m {
                let ai = &d[(b * m + i) * area..(b * m + i + 1) * area];
                let aj = &d[(b * m + j) * area..(b * m + j + 1) * area];
                let dot: f64 = ai.iter().zip(aj).map(|(x, y)| x * y).sum();
                let mass: f64 = ai.iter().zip(aj).map(|(x, y)| 0.5 * (x + y)).sum();
                total += dot / mass;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_stages, StageConfig};

    fn maps(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn dis_of(map: &[f64], w: usize, h: usize) -> f64 {
        let mut g = Graph::new();
        let a = maps_from_values(&mut g, &maps(&[1, 1, w, h], map)).unwrap();
        let d = loss_dis(&mut g, &a).unwrap();
        g.scalar(d)
    }

    fn div_of(all: &Tensor, m: usize, zeta: f64) -> f64 {
        let mut g = Graph::new();
        let a = maps_from_values(&mut g, all).unwrap();
        let d = loss_div(&mut g, &a, zeta).unwrap();
        g.value(d).data()[m]
    }

    #[test]
    fn dis_zero_at_own_peak() {
        assert_eq!(dis_of(&[0.0, 0.0, 0.0, 1.0], 2, 2), 0.0);
    }

    #[test]
    fn dis_hand_sums() {
        assert_eq!(dis_of(&[0.5, 0.5, 0.0, 0.0], 2, 2), 0.5);
        assert_eq!(dis_of(&[0.25; 4], 2, 2), 1.0);
    }

    #[test]
    fn div_hand_sums() {
        let disjoint = maps(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let same = maps(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(div_of(&disjoint, 0, 0.0), 0.0);
        assert!((div_of(&same, 0, 0.02) - 0.98).abs() < 1e-12);
        assert!((div_of(&disjoint, 0, 0.02) + 0.02).abs() < 1e-12);
    }

    #[test]
    fn div_single_part_uses_zero_competitor() {
        let one = maps(&[1, 1, 2, 2], &[0.5, 0.25, 0.0, 0.25]);
        assert!((div_of(&one, 0, 0.1) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn part_loss_compositions() {
        let disjoint = maps(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let a = maps_from_values(&mut g, &disjoint).unwrap();
        let l = loss_part(&mut g, &a, 0.02, 2.0).unwrap();
        assert!((g.scalar(l) + 0.08).abs() < 1e-12);
        let l0 = loss_part(&mut g, &a, 0.02, 0.0).unwrap();
        let dis = loss_dis(&mut g, &a).unwrap();
        let dis_sum = g.sum_all(dis).unwrap();
        assert_eq!(g.scalar(l0), g.scalar(dis_sum));
    }

    #[test]
    fn zero_grouping_gives_half_maps_and_origin_peak() {
        let mut g = Graph::new();
        let gm = g.constant(Tensor::zeros(&[1, 2, 3])).unwrap();
        let e = g.constant(maps(&[1, 3, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 1.0, 5.0, 5.0, 5.0, 5.0])).unwrap();
        let a = attention_map(&mut g, gm, e).unwrap();
        assert!(g.value(a.maps).data().iter().all(|&v| v == 0.5));
        assert_eq!(a.peak(0, 0), (0, 0));
        assert_eq!(a.peak(0, 1), (0, 0));
    }

    #[test]
    fn single_channel_unit_grouping_is_sigmoid() {
        let e_vals = [-1.0, 0.0, 2.0, 0.5];
        let mut g = Graph::new();
        let gm = g.constant(Tensor::filled(&[1, 1, 1], 1.0)).unwrap();
        let e = g.constant(maps(&[1, 1, 2, 2], &e_vals)).unwrap();
        let a = attention_map(&mut g, gm, e).unwrap();
        for (v, x) in g.value(a.maps).data().iter().zip(e_vals) {
            assert_eq!(*v, crate::graph::sigmoid(x));
        }
        assert_eq!(a.peak(0, 0), (1, 0));
    }

    #[test]
    fn peak_at_unique_max() {
        // W=3, H=4; unique maximum at (1, 2).
        let mut e = vec![0.0; 12];
        e[4 + 2] = 3.0;
        e[0] = 1.0;
        let mut g = Graph::new();
        let gm = g.constant(Tensor::filled(&[1, 1, 1], 0.7)).unwrap();
        let ev = g.constant(maps(&[1, 1, 3, 4], &e)).unwrap();
        let a = attention_map(&mut g, gm, ev).unwrap();
        assert_eq!(a.peak(0, 0), (1, 2));
    }

    #[test]
    fn part_features_masks() {
        let e_vals: Vec<f64> = (0..8).map(|v| v as f64 * 0.5 - 1.0).collect();
        let mut g = Graph::new();
        let e = g.constant(maps(&[1, 2, 2, 2], &e_vals)).unwrap();
        let ones = maps_from_values(&mut g, &Tensor::filled(&[1, 1, 2, 2], 1.0)).unwrap();
        let z = part_features(&mut g, &ones, e).unwrap();
        assert_eq!(g.value(z).data(), &[e_vals[..4].iter().sum::<f64>(), e_vals[4..].iter().sum::<f64>()]);
        let delta = maps_from_values(&mut g, &maps(&[1, 1, 2, 2], &[0.0, 0.0, 1.0, 0.0])).unwrap();
        let z = part_features(&mut g, &delta, e).unwrap();
        assert_eq!(g.value(z).data(), &[e_vals[2], e_vals[6]]);
    }

    #[test]
    fn grouping_of_zero_weights_is_half() {
        let cfg = BackboneConfig {
            input_side: 8,
            in_channels: 1,
            stages: vec![StageConfig::new(3, 3, 1, 2)],
            parts: 2,
            zeta: 0.02,
            lambda_div: 2.0,
        };
        let mut ps = ParamSet::new();
        init_params(&mut ps, &cfg, 1).unwrap();
        ps.tensor_mut(GROUPING_WEIGHT).unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        let e = extract_global_features(&mut g, &ps, &cfg, x).unwrap();
        let gm = channel_grouping(&mut g, &ps, 2, e).unwrap();
        assert_eq!(g.shape(gm), &[1, 2, 3]);
        assert!(g.value(gm).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn default_backbone_output_shape_and_zero_weights() {
        let cfg = BackboneConfig {
            input_side: 28,
            in_channels: 1,
            stages: default_stages(),
            parts: 4,
            zeta: 0.02,
            lambda_div: 2.0,
        };
        let mut ps = ParamSet::new();
        init_params(&mut ps, &cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 1, 28, 28], 0.3)).unwrap();
        let e = extract_global_features(&mut g, &ps, &cfg, x).unwrap();
        assert_eq!(g.shape(e), &[2, 32, 7, 7]);
        for p in ps.iter_mut().filter(|p| p.group == Group::Backbone) {
            p.tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 28, 28])).unwrap();
        let e = extract_global_features(&mut g, &ps, &cfg, x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = BackboneConfig {
            input_side: 28,
            in_channels: 1,
            stages: default_stages(),
            parts: 4,
            zeta: 0.02,
            lambda_div: 2.0,
        };
        let mut ps = ParamSet::new();
        init_params(&mut ps, &cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 27, 27])).unwrap();
        assert!(matches!(
            extract_global_features(&mut g, &ps, &cfg, x),
            Err(Error::Shape { op: "extract_global_features", .. })
        ));
    }
}
