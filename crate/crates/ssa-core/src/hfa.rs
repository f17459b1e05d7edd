//! Hierarchical prediction aggregation: a fixed-step grid of local windows
//! decoded patch-by-patch, count-normalized reconstruction of the local
//! prediction field, bilinear alignment of a downsampled global prediction,
//! and per-site gated fusion of the two.
//!
//! Dense inputs are gridded spatially and fused with a learned per-site gate
//! (an affine map over the concatenated local/global channel vectors through
//! a logistic). Vector inputs have no spatial axes; their windows mask
//! coordinate ranges instead, and fusion averages with a constant weight.

use crate::error::{Error, Result};
use crate::field::{Field, Rect};
use crate::netcore::{FieldCache, ModelParams, ParamGrads};
use crate::numerics::{entropy_slice, softmax_backward_slice};

/// Fixed-step grid over a spatial input. Regions are ordered row-major and
/// jointly cover every site; the trailing row/column is clamped to the
/// boundary rather than padding the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub regions: Vec<Rect>,
    input_shape: (usize, usize),
}

impl GridSpec {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }
}

/// Per-site tally of how many regions cover each site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    h: usize,
    w: usize,
    counts: Vec<u32>,
}

impl CountMatrix {
    pub fn from_grid(spec: &GridSpec) -> Self {
        let (h, w) = spec.input_shape;
        let mut counts = vec![0u32; h * w];
        for r in &spec.regions {
            for y in r.y1..r.y2 {
                for x in r.x1..r.x2 {
                    counts[y * w + x] += 1;
                }
            }
        }
        Self { h, w, counts }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.counts[y * self.w + x]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn min(&self) -> u32 {
        self.counts.iter().copied().min().unwrap_or(0)
    }
}

fn axis_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut pos = 0;
    loop {
        if pos + window >= len {
            offsets.push(len - window);
            break;
        }
        offsets.push(pos);
        pos += stride;
    }
    offsets
}

/// Tile `input_shape` with `window`-sized regions every `stride` sites,
/// clamping the final row/column to the boundary so coverage is total.
pub fn make_grid(
    input_shape: (usize, usize),
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<GridSpec> {
    let (h, w) = input_shape;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid("grid shapes must be positive".into()));
    }
    if wh > h || ww > w {
        return Err(Error::Invalid(format!(
            "window {wh}x{ww} exceeds input {h}x{w}"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Invalid("stride must be >= 1".into()));
    }
    // a fixed-step grid cannot cover every site once strides outrun windows
    if stride.0 > wh || stride.1 > ww {
        return Err(Error::Invalid(format!(
            "stride {}x{} exceeds window {wh}x{ww}; coverage would have gaps",
            stride.0, stride.1
        )));
    }
    let mut regions = Vec::new();
    for &y in &axis_offsets(h, wh, stride.0) {
        for &x in &axis_offsets(w, ww, stride.1) {
            regions.push(Rect { y1: y, y2: y + wh, x1: x, x2: x + ww });
        }
    }
    Ok(GridSpec { window, stride, regions, input_shape })
}

/// Zero-pad each patch prediction into the full canvas, sum, and divide by
/// the per-site coverage count. Sites covered once reproduce their patch's
/// prediction exactly.
pub fn aggregate_local(
    patch_preds: &[Field],
    spec: &GridSpec,
    full_shape: (usize, usize),
) -> Result<(Field, CountMatrix)> {
    if spec.input_shape != full_shape {
        return Err(Error::Shape(format!(
            "grid built for {:?}, aggregation asked for {:?}",
            spec.input_shape, full_shape
        )));
    }
    if patch_preds.len() != spec.regions.len() {
        return Err(Error::Shape(format!(
            "{} patches for {} regions",
            patch_preds.len(),
            spec.regions.len()
        )));
    }
    let channels = patch_preds
        .first()
        .map(|p| p.channels())
        .ok_or_else(|| Error::Empty("no patches to aggregate".into()))?;
    let mut acc = Field::zeros(channels, full_shape.0, full_shape.1);
    for (patch, region) in patch_preds.iter().zip(&spec.regions) {
        if patch.shape() != (channels, region.height(), region.width()) {
            return Err(Error::Shape(format!(
                "patch shape {:?} does not match its region {}x{}",
                patch.shape(),
                region.height(),
                region.width()
            )));
        }
        for y in region.y1..region.y2 {
            for x in region.x1..region.x2 {
                let src = patch.site(y - region.y1, x - region.x1);
                let dst = acc.site_mut(y, x);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    let counts = CountMatrix::from_grid(spec);
    for y in 0..full_shape.0 {
        for x in 0..full_shape.1 {
            let c = counts.get(y, x) as f64;
            for v in acc.site_mut(y, x) {
                *v /= c;
            }
        }
    }
    Ok((acc, counts))
}

/// Per-output-index source pair and interpolation weights for one axis,
/// using half-pixel centers clamped at the borders.
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let t = s - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

/// Bilinear-upsample a reduced-resolution prediction to `full_shape` and
/// renormalize each site to sum one. Identical shapes short-circuit to an
/// exact copy.
pub fn align_global(reduced: &Field, full_shape: (usize, usize)) -> Field {
    let (h, w) = full_shape;
    if (reduced.height(), reduced.width()) == full_shape {
        return reduced.clone();
    }
    let raw = bilinear_upsample(reduced, full_shape);
    let mut out = raw;
    for y in 0..h {
        for x in 0..w {
            let site = out.site_mut(y, x);
            let sum: f64 = site.iter().sum();
            if sum > 0.0 {
                for v in site {
                    *v /= sum;
                }
            }
        }
    }
    out
}

fn bilinear_upsample(reduced: &Field, full_shape: (usize, usize)) -> Field {
    let (h, w) = full_shape;
    let ys = bilinear_axis(reduced.height(), h);
    let xs = bilinear_axis(reduced.width(), w);
    let mut out = Field::zeros(reduced.channels(), h, w);
    for (y, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
            let s00 = reduced.site(y0, x0);
            let s01 = reduced.site(y0, x1);
            let s10 = reduced.site(y1, x0);
            let s11 = reduced.site(y1, x1);
            let dst = out.site_mut(y, x);
            for c in 0..dst.len() {
                dst[c] = wy0 * (wx0 * s00[c] + wx1 * s01[c]) + wy1 * (wx0 * s10[c] + wx1 * s11[c]);
            }
        }
    }
    out
}

/// Area-average downsample by an integer factor; trailing cells shrink at
/// the boundary. Factor 1 copies the input.
pub fn downsample_area(x: &Field, factor: usize) -> Field {
    assert!(factor >= 1);
    if factor == 1 {
        return x.clone();
    }
    let oh = x.height().div_ceil(factor);
    let ow = x.width().div_ceil(factor);
    let mut out = Field::zeros(x.channels(), oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let y2 = ((oy + 1) * factor).min(x.height());
            let x2 = ((ox + 1) * factor).min(x.width());
            let area = ((y2 - oy * factor) * (x2 - ox * factor)) as f64;
            let dst = out.site_mut(oy, ox);
            for y in oy * factor..y2 {
                for xx in ox * factor..x2 {
                    for (d, s) in dst.iter_mut().zip(x.site(y, xx)) {
                        *d += s;
                    }
                }
            }
            for d in dst {
                *d /= area;
            }
        }
    }
    out
}

/// How the fusion weight `A` is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionGate {
    /// Constant `A = local_weight` everywhere.
    Average { local_weight: f64 },
    /// Per-site `A = sigmoid(w . [local; global] + b)` using the model's
    /// gate parameters, trained jointly with the stage losses.
    Learned,
}

impl FusionGate {
    pub fn validate(&self) -> Result<()> {
        if let FusionGate::Average { local_weight } = self {
            if !(0.0..=1.0).contains(local_weight) {
                return Err(Error::Invalid(format!(
                    "average gate weight {local_weight} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-site gate values `A` for the given mode. Learned mode requires the
/// model to carry gate parameters.
pub fn gate_values(gate: &FusionGate, model: &ModelParams, local: &Field, global: &Field) -> Result<Field> {
    if !local.same_shape(global) {
        return Err(Error::Shape("gate inputs differ in shape".into()));
    }
    let mut a = Field::zeros(1, local.height(), local.width());
    match gate {
        FusionGate::Average { local_weight } => {
            for v in a.data_mut() {
                *v = *local_weight;
            }
        }
        FusionGate::Learned => {
            let gp = model
                .gate
                .as_ref()
                .ok_or_else(|| Error::Invalid("learned gate requires gate parameters".into()))?;
            if gp.in_dim != 2 * local.channels() {
                return Err(Error::Shape(format!(
                    "gate expects {} inputs, fields have {} channels",
                    gp.in_dim,
                    local.channels()
                )));
            }
            for i in 0..local.num_sites() {
                let l = local.site_by_index(i);
                let g = global.site_by_index(i);
                let mut u = gp.bias[0];
                for (c, &lv) in l.iter().enumerate() {
                    u += gp.weight[c] * lv;
                }
                for (c, &gv) in g.iter().enumerate() {
                    u += gp.weight[l.len() + c] * gv;
                }
                a.data_mut()[i] = sigmoid(u);
            }
        }
    }
    Ok(a)
}

/// Per-site convex combination `A*local + (1-A)*global`, computed as
/// `global + A*(local - global)` and clamped to the per-channel endpoint
/// interval so the convexity contract holds exactly. `A == 0` and `A == 1`
/// reproduce their endpoint bit-for-bit.
pub fn fuse(local: &Field, global: &Field, gate_a: &Field) -> Result<Field> {
    if !local.same_shape(global) {
        return Err(Error::Shape(format!(
            "fuse inputs differ: {:?} vs {:?}",
            local.shape(),
            global.shape()
        )));
    }
    if gate_a.channels() != 1 || gate_a.height() != local.height() || gate_a.width() != local.width() {
        return Err(Error::Shape("gate field must be 1-channel at the fused shape".into()));
    }
    let mut out = Field::zeros(local.channels(), local.height(), local.width());
    for i in 0..local.num_sites() {
        let a = gate_a.data()[i];
        let l = local.site_by_index(i);
        let g = global.site_by_index(i);
        let dst = out.site_by_index_mut(i);
        for c in 0..dst.len() {
            let v = if a == 1.0 {
                l[c]
            } else if a == 0.0 {
                g[c]
            } else {
                g[c] + a * (l[c] - g[c])
            };
            dst[c] = v.clamp(l[c].min(g[c]), l[c].max(g[c]));
        }
    }
    Ok(out)
}

/// Grid, gate, and global-branch settings for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HfaConfig {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub gate: FusionGate,
    /// Area-average factor applied to the input before the global pass.
    /// 1 disables downsampling.
    pub global_downsample: usize,
}

impl HfaConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if self.global_downsample == 0 {
            return Err(Error::Invalid("global_downsample must be >= 1".into()));
        }
        Ok(())
    }
}

enum BranchLayout {
    /// Spatial grid: patch `i` predicts the sites of region `i`.
    Dense { spec: GridSpec, counts: CountMatrix },
    /// Coordinate windows over a vector: every patch predicts the single
    /// site, averaged uniformly.
    Vector { num_patches: usize },
}

/// Everything produced by one hierarchical forward pass, including the
/// caches the backward pass consumes.
pub struct HfaForward {
    /// Per-site fused prediction; each site sums to one.
    pub fused: Field,
    pub local: Field,
    pub global_aligned: Field,
    /// Per-site fusion weight, 1 channel.
    pub gate_a: Field,
    gate_mode: FusionGate,
    layout: BranchLayout,
    patch_probs: Vec<Field>,
    patch_caches: Vec<FieldCache>,
    global_probs_reduced: Field,
    global_cache: FieldCache,
    /// Raw bilinear output before renormalization; empty when the alignment
    /// short-circuited to identity.
    global_upsampled_raw: Option<Field>,
}

impl HfaForward {
    /// Mean per-site entropy of the fused prediction, in nats.
    pub fn mean_entropy(&self) -> f64 {
        let n = self.fused.num_sites();
        (0..n).map(|i| entropy_slice(self.fused.site_by_index(i))).sum::<f64>() / n as f64
    }

    pub fn num_units(&self) -> usize {
        self.fused.num_sites()
    }
}

/// Hierarchical forward over a dense input: per-patch decoding on the grid,
/// count-normalized aggregation, downsampled global pass aligned back up,
/// and gated fusion. The classifier participates in every branch.
pub fn hfa_forward_dense(model: &ModelParams, x: &Field, cfg: &HfaConfig) -> Result<HfaForward> {
    cfg.validate()?;
    let full_shape = (x.height(), x.width());
    let spec = make_grid(full_shape, cfg.window, cfg.stride)?;

    let mut patch_probs = Vec::with_capacity(spec.regions.len());
    let mut patch_caches = Vec::with_capacity(spec.regions.len());
    for region in &spec.regions {
        let patch = x.crop(*region);
        let (_, probs, cache) = model.forward_field(&patch)?;
        patch_probs.push(probs);
        patch_caches.push(cache);
    }
    let (local, counts) = aggregate_local(&patch_probs, &spec, full_shape)?;

    let reduced_input = downsample_area(x, cfg.global_downsample);
    let (_, global_probs_reduced, global_cache) = model.forward_field(&reduced_input)?;
    let identity = (global_probs_reduced.height(), global_probs_reduced.width()) == full_shape;
    let global_upsampled_raw =
        (!identity).then(|| bilinear_upsample(&global_probs_reduced, full_shape));
    let global_aligned = align_global(&global_probs_reduced, full_shape);

    let gate_a = gate_values(&cfg.gate, model, &local, &global_aligned)?;
    let fused = fuse(&local, &global_aligned, &gate_a)?;

    Ok(HfaForward {
        fused,
        local,
        global_aligned,
        gate_a,
        gate_mode: cfg.gate.clone(),
        layout: BranchLayout::Dense { spec, counts },
        patch_probs,
        patch_caches,
        global_probs_reduced,
        global_cache,
        global_upsampled_raw,
    })
}

/// Hierarchical forward over a vector input. Windows mask coordinate ranges
/// (zeroing everything outside), standing in for spatial crops; the global
/// branch is the plain forward. Only the average gate is meaningful here.
pub fn hfa_forward_vec(model: &ModelParams, x: &[f64], cfg: &HfaConfig) -> Result<HfaForward> {
    cfg.validate()?;
    if matches!(cfg.gate, FusionGate::Learned) {
        return Err(Error::Invalid("vector mode uses the average gate".into()));
    }
    let d = x.len();
    let spec = make_grid((1, d), (1, cfg.window.1.min(d).max(1)), (1, cfg.stride.1.max(1)))?;

    let mut patch_probs = Vec::with_capacity(spec.regions.len());
    let mut patch_caches = Vec::with_capacity(spec.regions.len());
    for region in &spec.regions {
        let mut masked = vec![0.0; d];
        masked[region.x1..region.x2].copy_from_slice(&x[region.x1..region.x2]);
        let field = Field::from_vector(&masked);
        let (_, probs, cache) = model.forward_field(&field)?;
        patch_probs.push(probs);
        patch_caches.push(cache);
    }
    let k = patch_probs.len();
    let classes = patch_probs[0].channels();
    let mut local = Field::zeros(classes, 1, 1);
    for patch in &patch_probs {
        for (acc, v) in local.data_mut().iter_mut().zip(patch.data()) {
            *acc += v;
        }
    }
    for v in local.data_mut() {
        *v /= k as f64;
    }

    let (_, global_probs, global_cache) = model.forward_field(&Field::from_vector(x))?;
    let gate_a = gate_values(&cfg.gate, model, &local, &global_probs)?;
    let fused = fuse(&local, &global_probs, &gate_a)?;

    Ok(HfaForward {
        fused,
        local,
        global_aligned: global_probs.clone(),
        gate_a,
        gate_mode: cfg.gate.clone(),
        layout: BranchLayout::Vector { num_patches: k },
        patch_probs,
        patch_caches,
        global_probs_reduced: global_probs,
        global_cache,
        global_upsampled_raw: None,
    })
}

/// Reverse pass from a gradient on the fused prediction, accumulating into
/// every branch's parameter gradients (and the gate's, in learned mode).
pub fn hfa_backward(
    model: &ModelParams,
    fwd: &HfaForward,
    dfused: &Field,
    grads: &mut ParamGrads,
) -> Result<()> {
    if !dfused.same_shape(&fwd.fused) {
        return Err(Error::Shape("fused gradient shape mismatch".into()));
    }
    let sites = fwd.fused.num_sites();
    let channels = fwd.fused.channels();
    let mut dlocal = Field::zeros(channels, fwd.fused.height(), fwd.fused.width());
    let mut dglobal = Field::zeros(channels, fwd.fused.height(), fwd.fused.width());

    // fuse backward: out = g + a (l - g); optionally through the gate
    let learned_gate = matches!(fwd.gate_mode, FusionGate::Learned);
    for i in 0..sites {
        let a = fwd.gate_a.data()[i];
        let df = dfused.site_by_index(i);
        let l = fwd.local.site_by_index(i);
        let g = fwd.global_aligned.site_by_index(i);
        for c in 0..channels {
            dlocal.site_by_index_mut(i)[c] = a * df[c];
            dglobal.site_by_index_mut(i)[c] = (1.0 - a) * df[c];
        }
        if learned_gate {
            let gp = model.gate.as_ref().expect("learned gate has parameters");
            let da: f64 = (0..channels).map(|c| df[c] * (l[c] - g[c])).sum();
            let du = da * a * (1.0 - a);
            if !model.frozen_gate {
                for c in 0..channels {
                    grads.gate_w[c] += du * l[c];
                    grads.gate_w[channels + c] += du * g[c];
                }
                grads.gate_b[0] += du;
            }
            for c in 0..channels {
                dlocal.site_by_index_mut(i)[c] += du * gp.weight[c];
                dglobal.site_by_index_mut(i)[c] += du * gp.weight[channels + c];
            }
        }
    }

    // local branch
    match &fwd.layout {
        BranchLayout::Dense { spec, counts } => {
            for ((region, patch_probs), cache) in
                spec.regions.iter().zip(&fwd.patch_probs).zip(&fwd.patch_caches)
            {
                let mut dpatch_logits =
                    Field::zeros(channels, region.height(), region.width());
                for y in region.y1..region.y2 {
                    for x in region.x1..region.x2 {
                        let count = counts.get(y, x) as f64;
                        let dl = dlocal.site(y, x);
                        let p = patch_probs.site(y - region.y1, x - region.x1);
                        let dp: Vec<f64> = dl.iter().map(|&v| v / count).collect();
                        let dz = softmax_backward_slice(p, &dp);
                        dpatch_logits
                            .site_mut(y - region.y1, x - region.x1)
                            .copy_from_slice(&dz);
                    }
                }
                model.backward_logits(cache, &dpatch_logits, grads)?;
            }
        }
        BranchLayout::Vector { num_patches } => {
            let share = 1.0 / *num_patches as f64;
            for (patch_probs, cache) in fwd.patch_probs.iter().zip(&fwd.patch_caches) {
                let dp: Vec<f64> = dlocal.data().iter().map(|&v| v * share).collect();
                let dz = softmax_backward_slice(patch_probs.data(), &dp);
                let dfield = Field::from_vec(channels, 1, 1, dz)?;
                model.backward_logits(cache, &dfield, grads)?;
            }
        }
    }

    // global branch: undo renormalization and bilinear interpolation, then
    // softmax and the network
    let dreduced_probs = match &fwd.global_upsampled_raw {
        None => dglobal,
        Some(raw) => {
            let mut draw = Field::zeros(channels, raw.height(), raw.width());
            for i in 0..raw.num_sites() {
                let sum: f64 = raw.site_by_index(i).iter().sum();
                let out = fwd.global_aligned.site_by_index(i);
                let dg = dglobal.site_by_index(i);
                let dot: f64 = dg.iter().zip(out).map(|(&a, &b)| a * b).sum();
                let dst = draw.site_by_index_mut(i);
                if sum > 0.0 {
                    for c in 0..channels {
                        dst[c] = (dg[c] - dot) / sum;
                    }
                }
            }
            bilinear_downscatter(
                &draw,
                (fwd.global_probs_reduced.height(), fwd.global_probs_reduced.width()),
            )
        }
    };
    let mut dreduced_logits = Field::zeros(
        channels,
        fwd.global_probs_reduced.height(),
        fwd.global_probs_reduced.width(),
    );
    for i in 0..fwd.global_probs_reduced.num_sites() {
        let p = fwd.global_probs_reduced.site_by_index(i);
        let dz = softmax_backward_slice(p, dreduced_probs.site_by_index(i));
        dreduced_logits.site_by_index_mut(i).copy_from_slice(&dz);
    }
    model.backward_logits(&fwd.global_cache, &dreduced_logits, grads)?;
    Ok(())
}

/// Transpose of [`bilinear_upsample`]: scatter output-site gradients back to
/// the reduced grid with the same interpolation weights.
fn bilinear_downscatter(dout: &Field, reduced_shape: (usize, usize)) -> Field {
    let ys = bilinear_axis(reduced_shape.0, dout.height());
    let xs = bilinear_axis(reduced_shape.1, dout.width());
    let mut dst = Field::zeros(dout.channels(), reduced_shape.0, reduced_shape.1);
    for (y, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
            let src = dout.site(y, x);
            for c in 0..src.len() {
                let v = src[c];
                dst.site_mut(y0, x0)[c] += wy0 * wx0 * v;
                dst.site_mut(y0, x1)[c] += wy0 * wx1 * v;
                dst.site_mut(y1, x0)[c] += wy1 * wx0 * v;
                dst.site_mut(y1, x1)[c] += wy1 * wx1 * v;
            }
        }
    }
    dst
}
