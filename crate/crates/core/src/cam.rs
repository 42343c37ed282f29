//! Class activation maps: the per-class projection of a feature map onto the
//! classifier weights, max-normalization, global average pooling and
//! label masking.
//!
//! A raw CAM for class `c` is `A_c[y][x] = Σ_d θ[c][d] · f[d][y][x]`. Because
//! the classifier is linear and has no bias, pooling the raw CAMs gives the
//! same logits as applying the classifier to pooled features, which is how the
//! classification branch is computed.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::Real;

/// Denominator guard used by [`normalize_cams`].
pub const NORMALIZE_EPS: f64 = 1e-5;

/// Backbone output for one image: `D × h × w` plus the pixel size `(W, H)` of
/// the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<R: Real = f32> {
    data: Array3<R>,
    source_size: (usize, usize),
}

impl<R: Real> FeatureMap<R> {
    pub fn new(data: Array3<R>, source_size: (usize, usize)) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!(
                "feature map must be non-empty, got {d}x{h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { data, source_size })
    }

    pub fn data(&self) -> &Array3<R> {
        &self.data
    }

    pub fn into_data(self) -> Array3<R> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// `(W, H)` of the input image.
    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    /// Per-channel spatial mean.
    pub fn pooled(&self) -> Array1<R> {
        let (_, h, w) = self.data.dim();
        let n = R::from_usize(h * w).unwrap();
        self.data.sum_axis(Axis(2)).sum_axis(Axis(1)).mapv(|v| v / n)
    }
}

/// Classifier weights `θ`, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights<R: Real = f32> {
    theta: Array2<R>,
}

impl<R: Real> ClassifierWeights<R> {
    pub fn new(theta: Array2<R>) -> Result<Self> {
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(Error::Contract(
                "classifier needs at least one class and one channel".into(),
            ));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> &Array2<R> {
        &self.theta
    }

    pub fn num_classes(&self) -> usize {
        self.theta.nrows()
    }

    pub fn channels(&self) -> usize {
        self.theta.ncols()
    }
}

/// Per-class activation maps for one image, `C × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack<R: Real = f32> {
    maps: Array3<R>,
    normalized: bool,
}

impl<R: Real> CamStack<R> {
    /// Wraps unnormalized maps.
    pub fn raw(maps: Array3<R>) -> Self {
        Self {
            maps,
            normalized: false,
        }
    }

    /// Wraps maps that are already normalized; every entry must lie in `[0, 1]`.
    pub fn normalized(maps: Array3<R>) -> Result<Self> {
        if let Some(bad) = maps.iter().find(|v| !(**v >= R::zero() && **v <= R::one())) {
            return Err(Error::Contract(format!(
                "normalized CAM entries must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Self { maps, normalized: true })
    }

    pub fn maps(&self) -> &Array3<R> {
        &self.maps
    }

    pub fn into_maps(self) -> Array3<R> {
        self.maps
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_classes(&self) -> usize {
        self.maps.dim().0
    }

    /// `(h, w)`.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    /// Keeps the listed classes, in the given order.
    pub fn select(&self, classes: &[usize]) -> Result<Self> {
        let c = self.num_classes();
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::Contract(format!("class {bad} out of range for {c} classes")));
        }
        Ok(Self {
            maps: self.maps.select(Axis(0), classes),
            normalized: self.normalized,
        })
    }
}

/// Whether a [`LabelVector`] holds annotations or classifier outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    GroundTruthMultiHot,
    PredictionProbability,
}

/// Image-level labels `Y` or predictions `Ŷ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    values: Vec<f64>,
    kind: LabelKind,
}

impl LabelVector {
    /// Multi-hot annotation; every entry must be 0 or 1.
    pub fn ground_truth(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!(
                "ground-truth labels must be 0 or 1, found {v}"
            )));
        }
        Ok(Self {
            values,
            kind: LabelKind::GroundTruthMultiHot,
        })
    }

    /// Multi-hot annotation from the indices of present classes.
    pub fn from_present(num_classes: usize, present: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; num_classes];
        for &c in present {
            *values
                .get_mut(c)
                .ok_or_else(|| Error::Contract(format!("class {c} out of range for {num_classes} classes")))? = 1.0;
        }
        Self::ground_truth(values)
    }

    /// Probabilities; every entry must lie in `[0, 1]`.
    pub fn prediction(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::Contract(format!("probabilities must lie in [0, 1], found {v}")));
        }
        Ok(Self {
            values,
            kind: LabelKind::PredictionProbability,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.values.get(class).is_some_and(|&v| v >= 0.5)
    }

    /// Indices of classes with a positive label.
    pub fn present(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&c| self.is_present(c)).collect()
    }
}

/// `A_c = θ_c^T f` for every class.
pub fn compute_cams<R: Real>(f: &FeatureMap<R>, theta: &ClassifierWeights<R>) -> Result<CamStack<R>> {
    let (d, h, w) = f.data.dim();
    if theta.channels() != d {
        return Err(Error::shape(
            "classifier channels vs feature channels",
            format!("D = {}", theta.channels()),
            format!("D = {d}"),
        ));
    }
    let flat = f
        .data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((d, h * w))
        .expect("contiguous feature map");
    let cams = theta.theta.dot(&flat);
    let maps = cams
        .into_shape_with_order((theta.num_classes(), h, w))
        .expect("C x h x w");
    Ok(CamStack::raw(maps))
}

/// Clamps negatives to zero and divides each class map by its maximum
/// (plus [`NORMALIZE_EPS`]). Classes without positive activation become zero.
pub fn normalize_cams<R: Real>(raw: &CamStack<R>) -> Result<CamStack<R>> {
    if raw.normalized {
        return Err(Error::Contract("normalize_cams expects a raw stack".into()));
    }
    let eps = R::lit(NORMALIZE_EPS);
    let mut maps = raw.maps.mapv(|v| v.max(R::zero()));
    for mut class in maps.outer_iter_mut() {
        let peak = class.iter().fold(R::zero(), |m, &v| m.max(v));
        let denom = peak + eps;
        class.mapv_inplace(|v| v / denom);
    }
    Ok(CamStack { maps, normalized: true })
}

/// Backpropagates a gradient on the normalized maps to the raw maps.
///
/// With `m = max_j relu(a_j)` and `n_i = relu(a_i) / (m + ε)`, the gradient
/// flows through each clamped entry and through the (first) arg-max pixel.
pub fn normalize_cams_backward<R: Real>(raw: &Array3<R>, grad_normalized: &Array3<R>) -> Array3<R> {
    assert_eq!(raw.dim(), grad_normalized.dim(), "normalize backward shape");
    let eps = R::lit(NORMALIZE_EPS);
    let mut grad = Array3::<R>::zeros(raw.dim());
    for ((a, g), mut out) in raw
        .outer_iter()
        .zip(grad_normalized.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let mut peak = R::zero();
        let mut arg: Option<(usize, usize)> = None;
        for ((y, x), &v) in a.indexed_iter() {
            if v > peak {
                peak = v;
                arg = Some((y, x));
            }
        }
        let denom = peak + eps;
        let mut through_peak = R::zero();
        for ((&v, &gv), o) in a.iter().zip(g.iter()).zip(out.iter_mut()) {
            if v > R::zero() {
                *o = gv / denom;
                through_peak = through_peak - gv * v / (denom * denom);
            }
        }
        if let Some(p) = arg {
            out[p] = out[p] + through_peak;
        }
    }
    grad
}

/// Global average pooling: one mean per class map.
pub fn gap<R: Real>(maps: &CamStack<R>) -> Array1<R> {
    let (_, h, w) = maps.maps.dim();
    assert!(h * w > 0, "gap of an empty map");
    let n = R::from_usize(h * w).unwrap();
    maps.maps.sum_axis(Axis(2)).sum_axis(Axis(1)).mapv(|v| v / n)
}

/// Spreads a gradient on pooled logits uniformly over each class map of
/// spatial size `(h, w)`.
pub fn gap_backward<R: Real>(grad_logits: ArrayView1<'_, R>, h: usize, w: usize) -> Array3<R> {
    let n = R::from_usize(h * w).unwrap();
    let c = grad_logits.len();
    Array3::from_shape_fn((c, h, w), |(k, _, _)| grad_logits[k] / n)
}

/// Zeros the maps of classes absent from `y`.
pub fn mask_by_labels<R: Real>(maps: &CamStack<R>, y: &LabelVector) -> Result<CamStack<R>> {
    let mut out = maps.clone();
    mask_in_place(&mut out.maps, y)?;
    Ok(out)
}

pub(crate) fn mask_in_place<R: Real>(maps: &mut Array3<R>, y: &LabelVector) -> Result<()> {
    let c = maps.dim().0;
    if y.len() != c {
        return Err(Error::shape(
            "label vector length",
            format!("C = {c}"),
            format!("{}", y.len()),
        ));
    }
    for (k, mut class) in maps.outer_iter_mut().enumerate() {
        if !y.is_present(k) {
            class.fill(R::zero());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    fn random2(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
        Array::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    /// Nested-loop reference for `compute_cams`.
    fn cams_oracle(f: &Array3<f64>, theta: &Array2<f64>) -> Array3<f64> {
        let (d, h, w) = f.dim();
        let c = theta.nrows();
        let mut out = Array3::zeros((c, h, w));
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += theta[[k, j]] * f[[j, y, x]];
                    }
                    out[[k, y, x]] = s;
                }
            }
        }
        out
    }

    #[test]
    fn zero_features_give_zero_cams() {
        let f = FeatureMap::new(Array3::<f32>::zeros((2, 3, 3)), (3, 3)).unwrap();
        let theta = ClassifierWeights::new(Array2::from_elem((4, 2), 0.7f32)).unwrap();
        let cams = compute_cams(&f, &theta).unwrap();
        assert_eq!(cams.maps().dim(), (4, 3, 3));
        assert!(cams.maps().iter().all(|&v| v == 0.0));
        assert!(!cams.is_normalized());
    }

    #[test]
    fn single_channel_cam_by_hand() {
        let f = FeatureMap::new(array![[[1.0f64, 2.0], [3.0, 4.0]]], (2, 2)).unwrap();
        let theta = ClassifierWeights::new(array![[2.0f64]]).unwrap();
        let cams = compute_cams(&f, &theta).unwrap();
        assert_eq!(cams.maps(), &array![[[2.0, 4.0], [6.0, 8.0]]]);
    }

    #[test]
    fn random_cams_match_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random3(&mut rng, (3, 5, 5));
        let theta = random2(&mut rng, (6, 3));
        let got = compute_cams(
            &FeatureMap::new(f.clone(), (5, 5)).unwrap(),
            &ClassifierWeights::new(theta.clone()).unwrap(),
        )
        .unwrap();
        let want = cams_oracle(&f, &theta);
        for (a, b) in got.maps().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_names_both_sizes() {
        let f = FeatureMap::new(Array3::<f32>::zeros((3, 2, 2)), (2, 2)).unwrap();
        let theta = ClassifierWeights::new(Array2::<f32>::zeros((2, 5))).unwrap();
        let msg = compute_cams(&f, &theta).unwrap_err().to_string();
        assert!(msg.contains("D = 5") && msg.contains("D = 3"), "{msg}");
    }

    #[test]
    fn normalize_by_hand() {
        let raw = CamStack::raw(array![[[-1.0f64, 0.0], [2.0, 4.0]]]);
        let n = normalize_cams(&raw).unwrap();
        let want = array![[[0.0, 0.0], [0.5, 1.0]]];
        assert!(n.is_normalized());
        for (a, b) in n.maps().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn normalize_zero_map_is_zero() {
        let n = normalize_cams(&CamStack::raw(Array3::<f32>::zeros((2, 3, 4)))).unwrap();
        assert!(n.maps().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_normalized_input() {
        let n = CamStack::normalized(Array3::<f32>::zeros((1, 2, 2))).unwrap();
        assert!(matches!(normalize_cams(&n), Err(Error::Contract(_))));
    }

    #[test]
    fn normalized_peak_is_one_up_to_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = random3(&mut rng, (4, 6, 6)).mapv(|v| v * 50.0);
        let n = normalize_cams(&CamStack::raw(raw.clone())).unwrap();
        for (r, m) in raw.outer_iter().zip(n.maps().outer_iter()) {
            let peak = r.iter().cloned().fold(0.0, f64::max);
            let got = m.iter().cloned().fold(0.0, f64::max);
            assert!((0.0..=1.0).contains(&got));
            // max equals peak / (peak + eps) exactly.
            assert!((got - peak / (peak + NORMALIZE_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_by_hand_and_constant() {
        let cams = CamStack::raw(array![[[0.0f64, 1.0], [2.0, 3.0]], [[5.0, 5.0], [5.0, 5.0]]]);
        assert_eq!(gap(&cams), array![1.5, 5.0]);
    }

    #[test]
    fn gap_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random3(&mut rng, (3, 4, 7));
        let g = gap(&CamStack::raw(m.clone()));
        for c in 0..3 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..7 {
                    s += m[[c, y, x]];
                }
            }
            assert!((g[c] - s / 28.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_cases() {
        let maps = CamStack::raw(Array3::from_elem((3, 2, 2), 1.0f32));
        let all = LabelVector::ground_truth(vec![1.0; 3]).unwrap();
        assert_eq!(mask_by_labels(&maps, &all).unwrap(), maps);
        let none = LabelVector::ground_truth(vec![0.0; 3]).unwrap();
        assert!(mask_by_labels(&maps, &none).unwrap().maps().iter().all(|&v| v == 0.0));
        let some = LabelVector::ground_truth(vec![1.0, 0.0, 1.0]).unwrap();
        let out = mask_by_labels(&maps, &some).unwrap();
        assert!(out.maps().index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
        assert!(out.maps().index_axis(Axis(0), 0).iter().all(|&v| v == 1.0));
        assert!(out.maps().index_axis(Axis(0), 2).iter().all(|&v| v == 1.0));
        let short = LabelVector::ground_truth(vec![1.0; 2]).unwrap();
        assert!(mask_by_labels(&maps, &short).is_err());
    }

    #[test]
    fn label_vector_validation() {
        assert!(LabelVector::ground_truth(vec![0.0, 0.5]).is_err());
        assert!(LabelVector::prediction(vec![0.0, 1.5]).is_err());
        assert_eq!(LabelVector::from_present(4, &[3, 1]).unwrap().present(), vec![1, 3]);
        assert!(LabelVector::from_present(2, &[2]).is_err());
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let raw = random3(&mut rng, (2, 3, 4));
            let weights = random3(&mut rng, (2, 3, 4));
            let objective = |a: &Array3<f64>| {
                let n = normalize_cams(&CamStack::raw(a.clone())).unwrap();
                (n.maps() * &weights).sum()
            };
            let analytic = normalize_cams_backward(&raw, &weights);
            let h = 1e-6;
            for idx in ndarray::indices(raw.dim()) {
                let (c, y, x) = idx;
                let mut plus = raw.clone();
                plus[[c, y, x]] += h;
                let mut minus = raw.clone();
                minus[[c, y, x]] -= h;
                // Skip points sitting on a kink of relu.
                if raw[[c, y, x]].abs() < 1e-4 {
                    continue;
                }
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic[[c, y, x]];
                assert!((fd - a).abs() <= 1e-5 * (1.0 + fd.abs()), "fd {fd} vs {a}");
            }
        }
    }

    fn small_stack() -> impl Strategy<Value = Array3<f64>> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-5.0f64..5.0, c * h * w)
                .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
        })
    }

    fn peaks_clear_of_eps(m: &Array3<f64>, min_peak: f64) -> bool {
        m.outer_iter().all(|c| {
            let peak = c.iter().cloned().fold(f64::MIN, f64::max);
            peak <= 0.0 || peak >= min_peak
        })
    }

    proptest! {
        #[test]
        fn cams_are_linear_in_theta(
            seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::new(random3(&mut rng, (3, 4, 4)), (4, 4)).unwrap();
            let t1 = random2(&mut rng, (5, 3));
            let t2 = random2(&mut rng, (5, 3));
            let mix = ClassifierWeights::new(&t1 * a + &t2 * b).unwrap();
            let lhs = compute_cams(&f, &mix).unwrap();
            let r1 = compute_cams(&f, &ClassifierWeights::new(t1).unwrap()).unwrap();
            let r2 = compute_cams(&f, &ClassifierWeights::new(t2).unwrap()).unwrap();
            let rhs = r1.maps() * a + r2.maps() * b;
            for (x, y) in lhs.maps().iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        // Both properties hold up to ε / peak, so class peaks near ε are excluded.
        #[test]
        fn normalize_is_scale_invariant(m in small_stack(), k in 1.0f64..100.0) {
            prop_assume!(peaks_clear_of_eps(&m, 1.0));
            let a = normalize_cams(&CamStack::raw(m.clone())).unwrap();
            let b = normalize_cams(&CamStack::raw(m.mapv(|v| v * k))).unwrap();
            for (x, y) in a.maps().iter().zip(b.maps().iter()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn renormalizing_changes_little(m in small_stack()) {
            prop_assume!(peaks_clear_of_eps(&m, 0.1));
            let a = normalize_cams(&CamStack::raw(m)).unwrap();
            let b = normalize_cams(&CamStack::raw(a.maps().clone())).unwrap();
            for (x, y) in a.maps().iter().zip(b.maps().iter()) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }

        #[test]
        fn normalized_entries_in_unit_interval(m in small_stack()) {
            let n = normalize_cams(&CamStack::raw(m)).unwrap();
            prop_assert!(n.maps().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn pooling_commutes_with_classifier(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::new(random3(&mut rng, (4, 3, 5)), (5, 3)).unwrap();
            let theta = ClassifierWeights::new(random2(&mut rng, (3, 4))).unwrap();
            let pooled = gap(&compute_cams(&f, &theta).unwrap());
            let direct = theta.theta().dot(&f.pooled());
            for (x, y) in pooled.iter().zip(direct.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn masking_idempotent_and_commutes_with_normalize(
            m in small_stack(), bits in proptest::collection::vec(any::<bool>(), 3)
        ) {
            let c = m.dim().0;
            let y = LabelVector::ground_truth(
                bits.iter().take(c).map(|&b| if b { 1.0 } else { 0.0 }).chain(std::iter::repeat(0.0)).take(c).collect()
            ).unwrap();
            let raw = CamStack::raw(m);
            let once = mask_by_labels(&raw, &y).unwrap();
            prop_assert_eq!(&mask_by_labels(&once, &y).unwrap(), &once);
            let a = normalize_cams(&once).unwrap();
            let b = mask_by_labels(&normalize_cams(&raw).unwrap(), &y).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
