//! Desk-scale differentiable models: a two-layer tanh extractor feeding an
//! affine classifier, applied sitewise over channel vectors in dense mode.
//! Backward passes are hand-derived for this fixed topology; there is no
//! general autodiff graph.
//!
//! Parameter groups (extractor, classifier, fusion gate) carry independent
//! frozen flags and learning-rate multipliers. Freezing zeroes the group's
//! gradient block and skips its update, while gradients still flow through
//! the frozen weights to upstream groups.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dump;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::numerics::{softmax, softmax_backward, ProbDist};

/// Layer widths of the fixed architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    /// Channels of the input vector at each site.
    pub in_dim: usize,
    /// Hidden width of the first extractor layer.
    pub hidden: usize,
    /// Feature width (output of the extractor).
    pub feat: usize,
    /// Number of classes.
    pub classes: usize,
}

/// One affine layer, `out_dim x in_dim` weights stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    fn init_uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *out_v = acc;
        }
    }

    /// `grad_in = W^T grad_out`, and accumulate weight/bias gradients.
    fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        grad_in: &mut [f64],
        accumulate_params: bool,
    ) {
        for v in grad_in.iter_mut() {
            *v = 0.0;
        }
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            if accumulate_params {
                grad_b[o] += g;
                let grow = &mut grad_w[o * self.in_dim..(o + 1) * self.in_dim];
                for (gw, xi) in grow.iter_mut().zip(x) {
                    *gw += g * xi;
                }
            }
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi += g * w;
            }
        }
    }
}

/// Extractor (two tanh layers) + classifier head + optional fusion gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    pub l1: Affine,
    pub l2: Affine,
    pub head: Affine,
    /// Per-site fusion gate over concatenated local/global channel vectors;
    /// present only for dense-mode models using the learned gate.
    pub gate: Option<Affine>,
    pub frozen_extractor: bool,
    pub frozen_classifier: bool,
    pub frozen_gate: bool,
    pub lr_mult_extractor: f64,
    pub lr_mult_classifier: f64,
    pub lr_mult_gate: f64,
    pub init_seed: u64,
    version: u64,
}

impl ModelParams {
    /// Fan-in scaled uniform init with zero biases, from a fixed seed.
    pub fn init(shape: ModelShape, seed: u64, with_gate: bool) -> Self {
        assert!(shape.in_dim >= 1 && shape.hidden >= 1 && shape.feat >= 1 && shape.classes >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = Affine::init_uniform(shape.in_dim, shape.hidden, &mut rng);
        let l2 = Affine::init_uniform(shape.hidden, shape.feat, &mut rng);
        let head = Affine::init_uniform(shape.feat, shape.classes, &mut rng);
        // the gate starts neutral: A = sigmoid(0) = 0.5 everywhere
        let gate = with_gate.then(|| Affine::zeros(2 * shape.classes, 1));
        Self {
            shape,
            l1,
            l2,
            head,
            gate,
            frozen_extractor: false,
            frozen_classifier: false,
            frozen_gate: false,
            lr_mult_extractor: 1.0,
            lr_mult_classifier: 1.0,
            lr_mult_gate: 1.0,
            init_seed: seed,
            version: 0,
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn bump_version(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    /// Forward one channel vector. Returns the feature vector and the
    /// per-class probabilities; the cache feeds the backward passes.
    pub fn forward_unit(&self, x: &[f64]) -> Result<(UnitCache, ProbDist)> {
        if x.len() != self.shape.in_dim {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                x.len(),
                self.shape.in_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        let mut h = vec![0.0; self.shape.hidden];
        self.l1.apply(x, &mut h);
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let mut f = vec![0.0; self.shape.feat];
        self.l2.apply(&h, &mut f);
        for v in f.iter_mut() {
            *v = v.tanh();
        }
        let mut logits = vec![0.0; self.shape.classes];
        self.head.apply(&f, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let probs = softmax(&logits)?;
        Ok((UnitCache { x: x.to_vec(), h, f }, probs))
    }

    /// Forward every site of a field. Returns extractor features, per-site
    /// probabilities, and the backward cache.
    pub fn forward_field(&self, x: &Field) -> Result<(Field, Field, FieldCache)> {
        if x.channels() != self.shape.in_dim {
            return Err(Error::Shape(format!(
                "field has {} channels, model expects {}",
                x.channels(),
                self.shape.in_dim
            )));
        }
        let mut features = Field::zeros(self.shape.feat, x.height(), x.width());
        let mut probs = Field::zeros(self.shape.classes, x.height(), x.width());
        let mut units = Vec::with_capacity(x.num_sites());
        for i in 0..x.num_sites() {
            let (cache, p) = self.forward_unit(x.site_by_index(i))?;
            features.site_by_index_mut(i).copy_from_slice(&cache.f);
            probs.site_by_index_mut(i).copy_from_slice(p.probs());
            units.push(cache);
        }
        let cache = FieldCache { units, h: x.height(), w: x.width(), version: self.version };
        Ok((features, probs, cache))
    }

    /// Convenience wrapper for classification vectors.
    pub fn forward_vec(&self, x: &[f64]) -> Result<(Vec<f64>, ProbDist, FieldCache)> {
        let field = Field::from_vector(x);
        let (features, probs, cache) = self.forward_field(&field)?;
        let p = ProbDist::new(probs.site(0, 0).to_vec())?;
        Ok((features.data().to_vec(), p, cache))
    }

    fn check_cache(&self, cache: &FieldCache) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache built at version {}, params now at {}",
                cache.version, self.version
            )));
        }
        Ok(())
    }

    /// Reverse pass from per-site logit gradients.
    pub fn backward_logits(&self, cache: &FieldCache, dlogits: &Field, grads: &mut ParamGrads) -> Result<()> {
        self.check_cache(cache)?;
        if dlogits.num_sites() != cache.units.len() || dlogits.channels() != self.shape.classes {
            return Err(Error::Shape("logit gradient field does not match cache".into()));
        }
        let mut dfeat = vec![0.0; self.shape.feat];
        for (i, unit) in cache.units.iter().enumerate() {
            self.head.backward(
                &unit.f,
                dlogits.site_by_index(i),
                &mut grads.head_w,
                &mut grads.head_b,
                &mut dfeat,
                !self.frozen_classifier,
            );
            self.backward_unit_features(unit, &dfeat, grads);
        }
        Ok(())
    }

    /// Reverse pass from per-site probability gradients (through softmax).
    pub fn backward_probs(&self, cache: &FieldCache, dprobs: &Field, grads: &mut ParamGrads) -> Result<()> {
        self.check_cache(cache)?;
        if dprobs.num_sites() != cache.units.len() || dprobs.channels() != self.shape.classes {
            return Err(Error::Shape("probability gradient field does not match cache".into()));
        }
        let mut dlogits = Field::zeros(self.shape.classes, dprobs.height(), dprobs.width());
        for i in 0..dprobs.num_sites() {
            // recover this site's probabilities from the cached forward
            let mut logits = vec![0.0; self.shape.classes];
            self.head.apply(&cache.units[i].f, &mut logits);
            let p = softmax(&logits)?;
            let dz = softmax_backward(&p, dprobs.site_by_index(i));
            dlogits.site_by_index_mut(i).copy_from_slice(&dz);
        }
        self.backward_logits(cache, &dlogits, grads)
    }

    /// Reverse pass from per-site feature gradients, extractor only.
    pub fn backward_features(&self, cache: &FieldCache, dfeat: &Field, grads: &mut ParamGrads) -> Result<()> {
        self.check_cache(cache)?;
        if dfeat.num_sites() != cache.units.len() || dfeat.channels() != self.shape.feat {
            return Err(Error::Shape("feature gradient field does not match cache".into()));
        }
        for (i, unit) in cache.units.iter().enumerate() {
            self.backward_unit_features(unit, dfeat.site_by_index(i), grads);
        }
        Ok(())
    }

    fn backward_unit_features(&self, unit: &UnitCache, dfeat: &[f64], grads: &mut ParamGrads) {
        // tanh' = 1 - tanh^2, using the cached post-activation values
        let df_pre: Vec<f64> = dfeat.iter().zip(&unit.f).map(|(&g, &f)| g * (1.0 - f * f)).collect();
        let mut dh = vec![0.0; self.shape.hidden];
        self.l2.backward(&unit.h, &df_pre, &mut grads.l2_w, &mut grads.l2_b, &mut dh, !self.frozen_extractor);
        let dh_pre: Vec<f64> = dh.iter().zip(&unit.h).map(|(&g, &h)| g * (1.0 - h * h)).collect();
        let mut dx = vec![0.0; self.shape.in_dim];
        self.l1.backward(&unit.x, &dh_pre, &mut grads.l1_w, &mut grads.l1_b, &mut dx, !self.frozen_extractor);
    }

    /// Number of scalar parameters across all groups.
    pub fn coord_count(&self) -> usize {
        let gate = self.gate.as_ref().map_or(0, |g| g.weight.len() + g.bias.len());
        self.l1.weight.len()
            + self.l1.bias.len()
            + self.l2.weight.len()
            + self.l2.bias.len()
            + self.head.weight.len()
            + self.head.bias.len()
            + gate
    }

    fn coord_slices(&self) -> Vec<(&[f64], ParamGroup)> {
        let mut v = vec![
            (self.l1.weight.as_slice(), ParamGroup::Extractor),
            (self.l1.bias.as_slice(), ParamGroup::Extractor),
            (self.l2.weight.as_slice(), ParamGroup::Extractor),
            (self.l2.bias.as_slice(), ParamGroup::Extractor),
            (self.head.weight.as_slice(), ParamGroup::Classifier),
            (self.head.bias.as_slice(), ParamGroup::Classifier),
        ];
        if let Some(g) = &self.gate {
            v.push((g.weight.as_slice(), ParamGroup::Gate));
            v.push((g.bias.as_slice(), ParamGroup::Gate));
        }
        v
    }

    pub fn coord(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for (slice, _) in self.coord_slices() {
            if idx < slice.len() {
                return slice[idx];
            }
            idx -= slice.len();
        }
        panic!("coordinate index out of range");
    }

    pub fn coord_group(&self, idx: usize) -> ParamGroup {
        let mut idx = idx;
        for (slice, group) in self.coord_slices() {
            if idx < slice.len() {
                return group;
            }
            idx -= slice.len();
        }
        panic!("coordinate index out of range");
    }

    pub fn set_coord(&mut self, idx: usize, value: f64) {
        let mut idx = idx;
        let mut done = false;
        {
            let slices: [&mut Vec<f64>; 6] = [
                &mut self.l1.weight,
                &mut self.l1.bias,
                &mut self.l2.weight,
                &mut self.l2.bias,
                &mut self.head.weight,
                &mut self.head.bias,
            ];
            for slice in slices {
                if idx < slice.len() {
                    slice[idx] = value;
                    done = true;
                    break;
                }
                idx -= slice.len();
            }
        }
        if !done {
            let g = self.gate.as_mut().expect("coordinate index out of range");
            if idx < g.weight.len() {
                g.weight[idx] = value;
            } else {
                idx -= g.weight.len();
                assert!(idx < g.bias.len(), "coordinate index out of range");
                g.bias[idx] = value;
            }
        }
        self.bump_version();
    }

    /// Serialize to the tensor dump format under `<prefix>.bin/.meta`.
    pub fn save(&self, prefix: &Path, iter: u64) -> Result<()> {
        let mut tensors: Vec<(&str, Vec<usize>, &[f64])> = vec![
            ("extractor.l1.weight", vec![self.l1.out_dim, self.l1.in_dim], &self.l1.weight),
            ("extractor.l1.bias", vec![self.l1.out_dim], &self.l1.bias),
            ("extractor.l2.weight", vec![self.l2.out_dim, self.l2.in_dim], &self.l2.weight),
            ("extractor.l2.bias", vec![self.l2.out_dim], &self.l2.bias),
            ("classifier.weight", vec![self.head.out_dim, self.head.in_dim], &self.head.weight),
            ("classifier.bias", vec![self.head.out_dim], &self.head.bias),
        ];
        if let Some(g) = &self.gate {
            tensors.push(("gate.weight", vec![g.out_dim, g.in_dim], &g.weight));
            tensors.push(("gate.bias", vec![g.out_dim], &g.bias));
        }
        dump::write_dump(prefix, self.init_seed, iter, &tensors)
    }

    /// Load a model saved with [`ModelParams::save`]. Frozen flags and
    /// learning-rate multipliers reset to defaults.
    pub fn load(prefix: &Path) -> Result<(Self, u64)> {
        let (header, values) = dump::read_dump(prefix)?;
        let find = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            header
                .tensors
                .iter()
                .position(|t| t.name == name)
                .map(|i| (header.tensors[i].shape.clone(), values[i].clone()))
                .ok_or_else(|| Error::Invalid(format!("dump is missing tensor {name}")))
        };
        let (s1, l1w) = find("extractor.l1.weight")?;
        let (_, l1b) = find("extractor.l1.bias")?;
        let (s2, l2w) = find("extractor.l2.weight")?;
        let (_, l2b) = find("extractor.l2.bias")?;
        let (sh, hw) = find("classifier.weight")?;
        let (_, hb) = find("classifier.bias")?;
        if s1.len() != 2 || s2.len() != 2 || sh.len() != 2 {
            return Err(Error::Invalid("weight tensors must be rank 2".into()));
        }
        let shape = ModelShape { in_dim: s1[1], hidden: s1[0], feat: s2[0], classes: sh[0] };
        let mut model = ModelParams::init(shape, header.seed, false);
        model.l1.weight = l1w;
        model.l1.bias = l1b;
        model.l2.weight = l2w;
        model.l2.bias = l2b;
        model.head.weight = hw;
        model.head.bias = hb;
        if header.tensors.iter().any(|t| t.name == "gate.weight") {
            let (sg, gw) = find("gate.weight")?;
            let (_, gb) = find("gate.bias")?;
            let mut gate = Affine::zeros(sg[1], sg[0]);
            gate.weight = gw;
            gate.bias = gb;
            model.gate = Some(gate);
        }
        model.bump_version();
        Ok((model, header.iter))
    }
}

/// Which parameter group a coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
    Gate,
}

/// Cached activations for one site.
#[derive(Debug, Clone)]
pub struct UnitCache {
    x: Vec<f64>,
    h: Vec<f64>,
    pub f: Vec<f64>,
}

/// Forward cache for a whole field; invalidated by any parameter mutation.
#[derive(Debug, Clone)]
pub struct FieldCache {
    units: Vec<UnitCache>,
    pub h: usize,
    pub w: usize,
    version: u64,
}

impl FieldCache {
    pub fn num_units(&self) -> usize {
        self.units.len()
    }
}

/// Gradient accumulator matching [`ModelParams`]' layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub l1_w: Vec<f64>,
    pub l1_b: Vec<f64>,
    pub l2_w: Vec<f64>,
    pub l2_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub gate_w: Vec<f64>,
    pub gate_b: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let (gw, gb) = params
            .gate
            .as_ref()
            .map_or((0, 0), |g| (g.weight.len(), g.bias.len()));
        Self {
            l1_w: vec![0.0; params.l1.weight.len()],
            l1_b: vec![0.0; params.l1.bias.len()],
            l2_w: vec![0.0; params.l2.weight.len()],
            l2_b: vec![0.0; params.l2.bias.len()],
            head_w: vec![0.0; params.head.weight.len()],
            head_b: vec![0.0; params.head.bias.len()],
            gate_w: vec![0.0; gw],
            gate_b: vec![0.0; gb],
        }
    }

    fn blocks(&self) -> [&Vec<f64>; 8] {
        [&self.l1_w, &self.l1_b, &self.l2_w, &self.l2_b, &self.head_w, &self.head_b, &self.gate_w, &self.gate_b]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.l1_w,
            &mut self.l1_b,
            &mut self.l2_w,
            &mut self.l2_b,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.gate_w,
            &mut self.gate_b,
        ]
    }

    pub fn scale(&mut self, s: f64) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0))
    }

    /// Flat coordinate access matching [`ModelParams::coord`] ordering.
    pub fn coord(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for block in self.blocks() {
            if idx < block.len() {
                return block[idx];
            }
            idx -= block.len();
        }
        panic!("coordinate index out of range");
    }
}

/// SGD with momentum, weight decay, and a polynomial learning-rate decay.
/// Extractor and classifier carry separate base learning rates.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr_extractor: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub iter: u64,
    pub max_iter: u64,
    velocity: Option<ParamGrads>,
}

impl OptimState {
    pub fn new(max_iter: u64) -> Self {
        Self {
            lr_extractor: 2.5e-4,
            lr_classifier: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            iter: 0,
            max_iter: max_iter.max(1),
            velocity: None,
        }
    }

    /// `(1 - iter/max_iter)^power`, clamped to zero past the horizon.
    pub fn poly_factor(&self) -> f64 {
        let base = 1.0 - self.iter as f64 / self.max_iter as f64;
        if base <= 0.0 {
            0.0
        } else {
            base.powf(self.poly_power)
        }
    }

    pub fn effective_lr_extractor(&self) -> f64 {
        self.lr_extractor * self.poly_factor()
    }

    pub fn effective_lr_classifier(&self) -> f64 {
        self.lr_classifier * self.poly_factor()
    }
}

/// One momentum-SGD step: `v = m v + g + wd p; p -= lr v` per group, with
/// the group's effective learning rate. Frozen groups are untouched.
/// Increments the iteration counter.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, opt: &mut OptimState) {
    if opt.velocity.is_none() {
        opt.velocity = Some(ParamGrads::zeros_like(params));
    }
    let factor = opt.poly_factor();
    let lr_ext = opt.lr_extractor * params.lr_mult_extractor * factor;
    let lr_cls = opt.lr_classifier * params.lr_mult_classifier * factor;
    let lr_gate = opt.lr_extractor * params.lr_mult_gate * factor;
    let momentum = opt.momentum;
    let wd = opt.weight_decay;
    let velocity = opt.velocity.as_mut().unwrap();

    let update = |theta: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64| {
        for ((p, &g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
            let d = g + wd * *p;
            *v = momentum * *v + d;
            *p -= lr * *v;
        }
    };

    if !params.frozen_extractor {
        update(&mut params.l1.weight, &grads.l1_w, &mut velocity.l1_w, lr_ext);
        update(&mut params.l1.bias, &grads.l1_b, &mut velocity.l1_b, lr_ext);
        update(&mut params.l2.weight, &grads.l2_w, &mut velocity.l2_w, lr_ext);
        update(&mut params.l2.bias, &grads.l2_b, &mut velocity.l2_b, lr_ext);
    }
    if !params.frozen_classifier {
        update(&mut params.head.weight, &grads.head_w, &mut velocity.head_w, lr_cls);
        update(&mut params.head.bias, &grads.head_b, &mut velocity.head_b, lr_cls);
    }
    if let Some(gate) = &mut params.gate {
        if !params.frozen_gate {
            update(&mut gate.weight, &grads.gate_w, &mut velocity.gate_w, lr_gate);
            update(&mut gate.bias, &grads.gate_b, &mut velocity.gate_b, lr_gate);
        }
    }
    opt.iter += 1;
    params.bump_version();
}

/// Compare an analytic gradient against central finite differences over the
/// model's trainable coordinates; returns the worst relative error.
///
/// `loss_and_grad` must be a pure function of the parameters. Frozen groups
/// are skipped (their analytic block is zero by contract). When the model
/// has more than `MAX_CHECK_COORDS` coordinates an evenly strided subset is
/// checked.
pub fn grad_check(
    params: &ModelParams,
    loss_and_grad: &mut dyn FnMut(&ModelParams) -> (f64, ParamGrads),
    eps: f64,
) -> f64 {
    const MAX_CHECK_COORDS: usize = 512;
    let (_, analytic) = loss_and_grad(params);
    let n = params.coord_count();
    let stride = n.div_ceil(MAX_CHECK_COORDS).max(1);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for idx in (0..n).step_by(stride) {
        let group = params.coord_group(idx);
        let frozen = match group {
            ParamGroup::Extractor => params.frozen_extractor,
            ParamGroup::Classifier => params.frozen_classifier,
            ParamGroup::Gate => params.frozen_gate,
        };
        if frozen {
            continue;
        }
        let orig = params.coord(idx);
        probe.set_coord(idx, orig + eps);
        let (fp, _) = loss_and_grad(&probe);
        probe.set_coord(idx, orig - eps);
        let (fm, _) = loss_and_grad(&probe);
        probe.set_coord(idx, orig);
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.coord(idx);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::entropy;
    use tempfile::tempdir;

    fn small_shape() -> ModelShape {
        ModelShape { in_dim: 2, hidden: 4, feat: 3, classes: 3 }
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut m = ModelParams::init(small_shape(), 0, false);
        m.l1 = Affine::zeros(2, 4);
        m.l2 = Affine::zeros(4, 3);
        m.head = Affine::zeros(3, 3);
        let (_, p, _) = m.forward_vec(&[0.7, -0.3]).unwrap();
        for &v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_hand_checked_composition() {
        // single-channel chain with identity-like weights: the logit gap
        // reproduces tanh(tanh(x)) scaled by the head weight
        let shape = ModelShape { in_dim: 1, hidden: 1, feat: 1, classes: 2 };
        let mut m = ModelParams::init(shape, 0, false);
        m.l1.weight = vec![1.0];
        m.l1.bias = vec![0.0];
        m.l2.weight = vec![1.0];
        m.l2.bias = vec![0.0];
        m.head.weight = vec![2.0, 0.0];
        m.head.bias = vec![0.0, 0.0];
        let x = 0.4f64;
        let (_, p, _) = m.forward_vec(&[x]).unwrap();
        let z0 = 2.0 * x.tanh().tanh();
        let want = z0.exp() / (z0.exp() + 1.0);
        assert!((p.probs()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn probs_are_valid_distributions() {
        let m = ModelParams::init(small_shape(), 3, false);
        let (_, p, _) = m.forward_vec(&[1.2, -0.8]).unwrap();
        let sum: f64 = p.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(entropy(&p) >= 0.0);
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let m = ModelParams::init(small_shape(), 3, false);
        assert!(m.forward_vec(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let m = ModelParams::init(small_shape(), 3, false);
        let (_, _, cache) = m.forward_vec(&[0.5, 0.5]).unwrap();
        let mut grads = ParamGrads::zeros_like(&m);
        let dlogits = Field::zeros(3, 1, 1);
        m.backward_logits(&cache, &dlogits, &mut grads).unwrap();
        assert!(grads.is_all_zero());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = ModelParams::init(small_shape(), 17, false);
        let x = vec![0.8, -1.1];
        // loss: sum of squared logits, dL/dz = 2z
        let mut lag = |params: &ModelParams| {
            let (_, _, cache) = params.forward_vec(&x).unwrap();
            let mut logits = vec![0.0; 3];
            params.head.apply(&cache.units[0].f, &mut logits);
            let loss: f64 = logits.iter().map(|z| z * z).sum();
            let dl: Vec<f64> = logits.iter().map(|z| 2.0 * z).collect();
            let mut grads = ParamGrads::zeros_like(params);
            let df = Field::from_vec(3, 1, 1, dl).unwrap();
            params.backward_logits(&cache, &df, &mut grads).unwrap();
            (loss, grads)
        };
        let err = grad_check(&m, &mut lag, 1e-5);
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn frozen_classifier_grad_block_is_zero() {
        let mut m = ModelParams::init(small_shape(), 17, false);
        m.frozen_classifier = true;
        let (_, _, cache) = m.forward_vec(&[0.3, 0.9]).unwrap();
        let mut grads = ParamGrads::zeros_like(&m);
        let dlogits = Field::from_vec(3, 1, 1, vec![1.0, -1.0, 0.5]).unwrap();
        m.backward_logits(&cache, &dlogits, &mut grads).unwrap();
        assert!(grads.head_w.iter().all(|&g| g == 0.0));
        assert!(grads.head_b.iter().all(|&g| g == 0.0));
        // gradient still flows through the frozen head into the extractor
        assert!(!grads.is_all_zero());
    }

    #[test]
    fn sgd_zero_grad_zero_decay_leaves_params() {
        let mut m = ModelParams::init(small_shape(), 5, false);
        let before = m.clone();
        let grads = ParamGrads::zeros_like(&m);
        let mut opt = OptimState::new(100);
        opt.weight_decay = 0.0;
        sgd_step(&mut m, &grads, &mut opt);
        assert_eq!(m.l1.weight, before.l1.weight);
        assert_eq!(m.head.weight, before.head.weight);
        assert_eq!(opt.iter, 1);
    }

    #[test]
    fn sgd_at_horizon_has_zero_lr() {
        let mut m = ModelParams::init(small_shape(), 5, false);
        let before = m.clone();
        let mut grads = ParamGrads::zeros_like(&m);
        grads.l1_w[0] = 3.0;
        let mut opt = OptimState::new(10);
        opt.iter = 10;
        sgd_step(&mut m, &grads, &mut opt);
        assert_eq!(m.l1.weight, before.l1.weight);
    }

    #[test]
    fn sgd_single_step_hand_computed() {
        // one parameter, loss = p^2/2 so grad = p; check the momentum update
        let shape = ModelShape { in_dim: 1, hidden: 1, feat: 1, classes: 2 };
        let mut m = ModelParams::init(shape, 0, false);
        m.l1.weight = vec![1.0];
        let mut grads = ParamGrads::zeros_like(&m);
        grads.l1_w[0] = 1.0;
        let mut opt = OptimState::new(100);
        opt.weight_decay = 5e-4;
        let factor0 = 1.0f64.powf(0.9); // iter 0
        sgd_step(&mut m, &grads, &mut opt);
        // v1 = 0.9*0 + (1 + 5e-4*1) = 1.0005; p1 = 1 - lr*factor0*v1
        let want = 1.0 - 2.5e-4 * factor0 * 1.0005;
        assert!((m.l1.weight[0] - want).abs() < 1e-15);
        // second step: d = p1 + wd*p1, v2 = 0.9*v1 + d
        let p1 = want;
        let factor1 = (1.0 - 1.0 / 100.0f64).powf(0.9);
        grads.l1_w[0] = p1;
        sgd_step(&mut m, &grads, &mut opt);
        let v2 = 0.9 * 1.0005 + p1 + 5e-4 * p1;
        let want2 = p1 - 2.5e-4 * factor1 * v2;
        assert!((m.l1.weight[0] - want2).abs() < 1e-15);
    }

    #[test]
    fn poly_schedule_pointwise() {
        let mut opt = OptimState::new(200);
        for iter in [0u64, 1, 50, 199, 200] {
            opt.iter = iter;
            let want = (1.0 - iter as f64 / 200.0).max(0.0).powf(0.9);
            assert!((opt.poly_factor() - want).abs() < 1e-15);
        }
        // non-increasing
        let mut prev = f64::INFINITY;
        for iter in 0..=200 {
            opt.iter = iter;
            assert!(opt.poly_factor() <= prev);
            prev = opt.poly_factor();
        }
    }

    #[test]
    fn frozen_groups_never_move() {
        let mut m = ModelParams::init(small_shape(), 9, false);
        m.frozen_extractor = true;
        let before = m.clone();
        let mut grads = ParamGrads::zeros_like(&m);
        for g in grads.l1_w.iter_mut() {
            *g = 1.0;
        }
        for g in grads.head_w.iter_mut() {
            *g = 1.0;
        }
        let mut opt = OptimState::new(100);
        for _ in 0..5 {
            sgd_step(&mut m, &grads, &mut opt);
        }
        assert_eq!(m.l1.weight, before.l1.weight);
        assert_eq!(m.l2.weight, before.l2.weight);
        assert_ne!(m.head.weight, before.head.weight);
    }

    #[test]
    fn clone_independence() {
        let mut a = ModelParams::init(small_shape(), 11, false);
        let b = a.clone();
        let snapshot = b.clone();
        let mut grads = ParamGrads::zeros_like(&a);
        for g in grads.l1_w.iter_mut() {
            *g = 0.5;
        }
        let mut opt = OptimState::new(50);
        for _ in 0..10 {
            sgd_step(&mut a, &grads, &mut opt);
        }
        assert_eq!(b, snapshot, "training the clone's source must not touch it");
        assert_ne!(a.l1.weight, b.l1.weight);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = ModelParams::init(small_shape(), 11, false);
        let (_, _, cache) = m.forward_vec(&[0.1, 0.2]).unwrap();
        let grads_in = ParamGrads::zeros_like(&m);
        let mut opt = OptimState::new(10);
        sgd_step(&mut m, &grads_in, &mut opt);
        let mut grads = ParamGrads::zeros_like(&m);
        let dlogits = Field::zeros(3, 1, 1);
        let err = m.backward_logits(&cache, &dlogits, &mut grads);
        assert!(matches!(err, Err(Error::StaleCache(_))));
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("model");
        let mut m = ModelParams::init(small_shape(), 21, true);
        m.gate.as_mut().unwrap().weight[0] = 0.25;
        m.save(&prefix, 77).unwrap();
        let (loaded, iter) = ModelParams::load(&prefix).unwrap();
        assert_eq!(iter, 77);
        assert_eq!(loaded.l1.weight, m.l1.weight);
        assert_eq!(loaded.head.bias, m.head.bias);
        assert_eq!(loaded.gate.as_ref().unwrap().weight, m.gate.as_ref().unwrap().weight);
        assert_eq!(loaded.init_seed, 21);
    }
}
