//! Two-segment linear interpolation of checkpoint weights.
//!
//! Every tensor of the retrieval archive (θ₁) and the domain archive (θ₂) is
//! assigned to a [`SegmentAssignment`]. Lower-segment tensors become
//! `α_lower·θ₁ + (1 − α_lower)·θ₂`, upper-segment tensors use `α_upper`, and
//! copy-through tensors (the token embedding by default) are taken from θ₁
//! unchanged.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{Tensor, TensorArchive};

/// Metadata key the merge reads to identify each input archive.
pub const SOURCE_KEY: &str = "source";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    total_layers: usize,
    boundary: usize,
}

impl LayerPartition {
    /// Layers `0..boundary` form the lower segment, `boundary..total_layers`
    /// the upper one.
    pub fn new(total_layers: usize, boundary: usize) -> Result<Self> {
        if boundary == 0 || boundary >= total_layers {
            return Err(Error::InvalidConfig(format!(
                "layer boundary {boundary} must satisfy 0 < boundary < {total_layers}"
            )));
        }
        Ok(Self {
            total_layers,
            boundary,
        })
    }

    /// Split at the midpoint, as in a 32-layer model split 16/16.
    pub fn halves(total_layers: usize) -> Result<Self> {
        Self::new(total_layers, total_layers / 2)
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }
}

/// Segment for tensors that are neither layer tensors nor copy-through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlayerPolicy {
    Lower,
    #[default]
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentAssignment {
    Lower,
    Upper,
    CopyFromRetrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub partition: LayerPartition,
    pub nonlayer_policy: NonlayerPolicy,
    /// Name prefixes copied verbatim from the retrieval archive.
    pub copy_names: Vec<String>,
    /// Copy tensors that exist only in the retrieval archive instead of failing.
    pub allow_missing_in_domain: bool,
}

impl MergeSpec {
    pub fn new(alpha_lower: f64, alpha_upper: f64, partition: LayerPartition) -> Result<Self> {
        let spec = Self {
            alpha_lower,
            alpha_upper,
            partition,
            nonlayer_policy: NonlayerPolicy::default(),
            copy_names: vec!["embed_tokens.".to_owned()],
            allow_missing_in_domain: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (label, a) in [("alpha_lower", self.alpha_lower), ("alpha_upper", self.alpha_upper)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!("{label} = {a} outside [0, 1]")));
            }
        }
        LayerPartition::new(self.partition.total_layers, self.partition.boundary)?;
        Ok(())
    }

    fn alpha_for(&self, segment: SegmentAssignment) -> Option<f64> {
        match segment {
            SegmentAssignment::Lower => Some(self.alpha_lower),
            SegmentAssignment::Upper => Some(self.alpha_upper),
            SegmentAssignment::CopyFromRetrieval => None,
        }
    }
}

/// Extracts `i` from a name of the form `[...].layers.<i>.<rest>`.
///
/// Returns `Ok(None)` when the name has no `layers.` component.
pub fn layer_index(name: &str) -> Result<Option<usize>> {
    let start = if let Some(rest) = name.strip_prefix("layers.") {
        rest
    } else if let Some(pos) = name.find(".layers.") {
        &name[pos + ".layers.".len()..]
    } else {
        return Ok(None);
    };
    let digits = start.split('.').next().unwrap_or_default();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::BadLayerIndex(name.to_owned()));
    }
    digits
        .parse()
        .map(Some)
        .map_err(|_| Error::BadLayerIndex(name.to_owned()))
}

pub fn classify_tensor(name: &str, spec: &MergeSpec) -> Result<SegmentAssignment> {
    if spec.copy_names.iter().any(|p| name.starts_with(p.as_str())) {
        return Ok(SegmentAssignment::CopyFromRetrieval);
    }
    let partition = &spec.partition;
    match layer_index(name)? {
        Some(i) if i >= partition.total_layers => Err(Error::LayerOutOfRange {
            name: name.to_owned(),
            index: i,
            total_layers: partition.total_layers,
        }),
        Some(i) if i < partition.boundary => Ok(SegmentAssignment::Lower),
        Some(_) => Ok(SegmentAssignment::Upper),
        None => Ok(match spec.nonlayer_policy {
            NonlayerPolicy::Lower => SegmentAssignment::Lower,
            NonlayerPolicy::Upper => SegmentAssignment::Upper,
        }),
    }
}

/// Elementwise `alpha·x1 + (1 − alpha)·x2` in `f32`, evaluated as
/// `(alpha·x1) + ((1 − alpha)·x2)`.
///
/// At `alpha == 1` and `alpha == 0` the corresponding input is returned as is,
/// and bitwise-equal inputs pass through; both cases are the exact value of
/// the blend and keep the sign of zero.
pub fn merge_tensor(t1: &Tensor, t2: &Tensor, alpha: f64) -> Result<Tensor> {
    if t1.name() != t2.name() {
        return Err(Error::NameMismatch {
            left: t1.name().to_owned(),
            right: t2.name().to_owned(),
        });
    }
    if t1.shape() != t2.shape() {
        return Err(Error::ShapeMismatch {
            name: t1.name().to_owned(),
            expected: t1.shape().to_vec(),
            found: t2.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(t1.clone());
    }
    if alpha == 0.0 {
        return Ok(t2.clone());
    }
    let a = alpha as f32;
    let b = 1.0f32 - a;
    let data = t1
        .data()
        .iter()
        .zip(t2.data())
        .map(|(&x1, &x2)| {
            if x1.to_bits() == x2.to_bits() {
                x1
            } else {
                (a * x1) + (b * x2)
            }
        })
        .collect();
    Tensor::new(t1.name(), t1.shape().to_vec(), data)
}

pub fn merge_archives(
    retrieval: &TensorArchive,
    domain: &TensorArchive,
    spec: &MergeSpec,
) -> Result<TensorArchive> {
    spec.validate()?;

    let r_names: BTreeSet<&str> = retrieval.names().collect();
    let d_names: BTreeSet<&str> = domain.names().collect();
    let missing_in_domain: Vec<String> = r_names.difference(&d_names).map(|s| s.to_string()).collect();
    let missing_in_retrieval: Vec<String> = d_names.difference(&r_names).map(|s| s.to_string()).collect();
    if !missing_in_retrieval.is_empty() || (!missing_in_domain.is_empty() && !spec.allow_missing_in_domain) {
        return Err(Error::TensorSetMismatch {
            missing_in_domain,
            missing_in_retrieval,
        });
    }

    let jobs: Vec<&Tensor> = retrieval.tensors().collect();
    let merged: Vec<Tensor> = jobs
        .par_iter()
        .map(|t1| {
            let segment = classify_tensor(t1.name(), spec)?;
            match (spec.alpha_for(segment), domain.get(t1.name())) {
                (Some(alpha), Some(t2)) => merge_tensor(t1, t2, alpha),
                (_, Some(t2)) if t1.shape() != t2.shape() => Err(Error::ShapeMismatch {
                    name: t1.name().to_owned(),
                    expected: t1.shape().to_vec(),
                    found: t2.shape().to_vec(),
                }),
                _ => Ok((*t1).clone()),
            }
        })
        .collect::<Result<_>>()?;

    let mut out = TensorArchive::new();
    for t in merged {
        out.insert(t)?;
    }
    let source = |a: &TensorArchive| a.metadata().get(SOURCE_KEY).cloned().unwrap_or_default();
    out.set_metadata("merge.alpha_lower", spec.alpha_lower.to_string());
    out.set_metadata("merge.alpha_upper", spec.alpha_upper.to_string());
    out.set_metadata("merge.boundary", spec.partition.boundary.to_string());
    out.set_metadata("merge.total_layers", spec.partition.total_layers.to_string());
    out.set_metadata(
        "merge.nonlayer_policy",
        match spec.nonlayer_policy {
            NonlayerPolicy::Lower => "lower",
            NonlayerPolicy::Upper => "upper",
        },
    );
    out.set_metadata("merge.copy_names", spec.copy_names.join(","));
    out.set_metadata("merge.retrieval_source", source(retrieval));
    out.set_metadata("merge.domain_source", source(domain));
    out.set_metadata(
        SOURCE_KEY,
        format!(
            "merge({}, {}; {}, {})",
            source(retrieval),
            source(domain),
            spec.alpha_lower,
            spec.alpha_upper
        ),
    );
    Ok(out)
}

/// Number of layers implied by the `layers.<i>.` names in an archive.
pub fn count_layers(archive: &TensorArchive) -> Result<usize> {
    let mut max = None;
    for name in archive.names() {
        if let Some(i) = layer_index(name)? {
            max = max.max(Some(i));
        }
    }
    Ok(max.map_or(0, |m| m + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    fn spec(al: f64, au: f64) -> MergeSpec {
        MergeSpec::new(al, au, LayerPartition::new(8, 4).unwrap()).unwrap()
    }

    fn scalar(name: &str, x: f32) -> Tensor {
        Tensor::new(name, vec![1], vec![x]).unwrap()
    }

    fn random_archive(seed: u64, source: &str) -> TensorArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = TensorArchive::new();
        let mut names = vec!["embed_tokens.weight".to_owned(), "final_norm.weight".to_owned()];
        for i in 0..8 {
            names.push(format!("layers.{i}.attn.wq"));
            names.push(format!("layers.{i}.mlp.w1"));
        }
        for name in names {
            let data = (0..12).map(|_| rng.random_range(-4.0f32..4.0)).collect();
            a.insert(Tensor::new(name, vec![3, 4], data).unwrap()).unwrap();
        }
        a.set_metadata(SOURCE_KEY, source);
        a
    }

    #[test]
    fn classification_examples() {
        let s = spec(0.5, 0.5);
        assert_eq!(classify_tensor("layers.3.attn.wq", &s).unwrap(), SegmentAssignment::Lower);
        assert_eq!(classify_tensor("layers.4.mlp.w1", &s).unwrap(), SegmentAssignment::Upper);
        assert_eq!(
            classify_tensor("embed_tokens.weight", &s).unwrap(),
            SegmentAssignment::CopyFromRetrieval
        );
        assert_eq!(classify_tensor("final_norm.weight", &s).unwrap(), SegmentAssignment::Upper);
        assert_eq!(
            classify_tensor("model.layers.0.attn.wk", &s).unwrap(),
            SegmentAssignment::Lower
        );
        let mut lower = s.clone();
        lower.nonlayer_policy = NonlayerPolicy::Lower;
        assert_eq!(classify_tensor("final_norm.weight", &lower).unwrap(), SegmentAssignment::Lower);
    }

    #[test]
    fn classification_errors() {
        let s = spec(0.5, 0.5);
        assert!(matches!(
            classify_tensor("layers.8.attn.wq", &s),
            Err(Error::LayerOutOfRange { index: 8, .. })
        ));
        assert!(matches!(classify_tensor("layers.x.attn", &s), Err(Error::BadLayerIndex(_))));
        assert!(matches!(classify_tensor("layers..attn", &s), Err(Error::BadLayerIndex(_))));
    }

    #[test]
    fn partition_bounds() {
        assert!(LayerPartition::new(8, 0).is_err());
        assert!(LayerPartition::new(8, 8).is_err());
        assert_eq!(LayerPartition::halves(32).unwrap().boundary(), 16);
        assert!(MergeSpec::new(1.5, 0.0, LayerPartition::halves(8).unwrap()).is_err());
    }

    #[test]
    fn scalar_blend() {
        let out = merge_tensor(&scalar("w", 2.0), &scalar("w", -2.0), 0.75).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn merge_tensor_errors() {
        let a = scalar("w", 1.0);
        assert!(matches!(merge_tensor(&a, &scalar("v", 1.0), 0.5), Err(Error::NameMismatch { .. })));
        let b = Tensor::new("w", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(merge_tensor(&a, &b, 0.5), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn endpoint_alpha_keeps_signed_zero() {
        let out = merge_tensor(&scalar("w", -0.0), &scalar("w", 3.0), 1.0).unwrap();
        assert_eq!(out.data()[0].to_bits(), (-0.0f32).to_bits());
    }

    /// Sweep: α·x + (1 − α)·x rounds back to x for every grid alpha whenever
    /// 0.25·x is still normal. Below that the scaled terms lose bits, which is why
    /// `merge_tensor` passes bitwise-equal inputs through; checked for all
    /// finite x.
    #[test]
    fn self_blend_sweep_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200_000 {
            let x = f32::from_bits(rng.random::<u32>());
            if !x.is_finite() {
                continue;
            }
            for alpha in GRID {
                let a = alpha as f32;
                let raw = (a * x) + ((1.0 - a) * x);
                if x.abs() >= 4.0 * f32::MIN_POSITIVE || x == 0.0 {
                    assert_eq!(raw.to_bits(), x.to_bits(), "alpha {alpha} x {x:e}");
                }
                let t = scalar("w", x);
                assert_eq!(merge_tensor(&t, &t, alpha).unwrap().data()[0].to_bits(), x.to_bits());
            }
        }
        let sub = f32::from_bits(1);
        assert!(sub.is_subnormal());
        assert_ne!((0.5f32 * sub) + (0.5f32 * sub), sub);
    }

    #[test]
    fn endpoints_reproduce_sources() {
        let r = random_archive(1, "retrieval");
        let d = random_archive(2, "domain");
        let one = merge_archives(&r, &d, &spec(1.0, 1.0)).unwrap();
        for t in r.tensors() {
            assert!(one.get(t.name()).unwrap().bit_eq(t));
        }
        let zero = merge_archives(&r, &d, &spec(0.0, 0.0)).unwrap();
        for t in zero.tensors() {
            let want = if t.name().starts_with("embed_tokens.") { &r } else { &d };
            assert!(t.bit_eq(want.get(t.name()).unwrap()), "{}", t.name());
        }
    }

    #[test]
    fn segments_use_their_alpha() {
        let r = random_archive(1, "r");
        let d = random_archive(2, "d");
        let m = merge_archives(&r, &d, &spec(1.0, 0.0)).unwrap();
        for t in m.tensors() {
            let want = match classify_tensor(t.name(), &spec(1.0, 0.0)).unwrap() {
                SegmentAssignment::Lower | SegmentAssignment::CopyFromRetrieval => &r,
                SegmentAssignment::Upper => &d,
            };
            assert!(t.bit_eq(want.get(t.name()).unwrap()), "{}", t.name());
        }
    }

    #[test]
    fn metadata_records_spec() {
        let m = merge_archives(&random_archive(1, "r"), &random_archive(2, "d"), &spec(0.75, 1.0)).unwrap();
        let meta = m.metadata();
        assert_eq!(meta["merge.alpha_lower"], "0.75");
        assert_eq!(meta["merge.alpha_upper"], "1");
        assert_eq!(meta["merge.boundary"], "4");
        assert_eq!(meta["merge.retrieval_source"], "r");
        assert_eq!(meta["merge.domain_source"], "d");
    }

    #[test]
    fn name_set_mismatch() {
        let r = random_archive(1, "r");
        let mut d = TensorArchive::new();
        for t in r.tensors().filter(|t| t.name() != "final_norm.weight") {
            d.insert(t.clone()).unwrap();
        }
        d.insert(scalar("extra", 0.0)).unwrap();
        match merge_archives(&r, &d, &spec(0.5, 0.5)) {
            Err(Error::TensorSetMismatch {
                missing_in_domain,
                missing_in_retrieval,
            }) => {
                assert_eq!(missing_in_domain, ["final_norm.weight"]);
                assert_eq!(missing_in_retrieval, ["extra"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn allow_missing_copies_from_retrieval() {
        let r = random_archive(1, "r");
        let mut d = TensorArchive::new();
        for t in random_archive(2, "d").tensors().filter(|t| t.name() != "final_norm.weight") {
            d.insert(t.clone()).unwrap();
        }
        let mut s = spec(0.5, 0.5);
        assert!(merge_archives(&r, &d, &s).is_err());
        s.allow_missing_in_domain = true;
        let m = merge_archives(&r, &d, &s).unwrap();
        assert!(m.get("final_norm.weight").unwrap().bit_eq(r.get("final_norm.weight").unwrap()));
    }

    #[test]
    fn shape_mismatch_in_archive() {
        let r = random_archive(1, "r");
        let mut d = TensorArchive::new();
        for t in random_archive(2, "d").tensors() {
            if t.name() == "layers.2.mlp.w1" {
                d.insert(Tensor::new(t.name(), vec![12], t.data().to_vec()).unwrap()).unwrap();
            } else {
                d.insert(t.clone()).unwrap();
            }
        }
        assert!(matches!(merge_archives(&r, &d, &spec(0.5, 0.5)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn count_layers_from_names() {
        assert_eq!(count_layers(&random_archive(0, "x")).unwrap(), 8);
    }

    fn grid_alpha() -> impl Strategy<Value = f64> {
        prop::sample::select(GRID.to_vec())
    }

    proptest! {
        #[test]
        fn self_merge_fixpoint(seed in any::<u64>(), al in grid_alpha(), au in grid_alpha()) {
            let a = random_archive(seed, "a");
            let m = merge_archives(&a, &a, &spec(al, au)).unwrap();
            for t in a.tensors() {
                prop_assert!(m.get(t.name()).unwrap().bit_eq(t));
            }
        }

        #[test]
        fn swap_symmetry(s1 in any::<u64>(), s2 in any::<u64>(), al in grid_alpha(), au in grid_alpha()) {
            let a = random_archive(s1, "a");
            let b = random_archive(s2, "b");
            let ab = merge_archives(&a, &b, &spec(al, au)).unwrap();
            let ba = merge_archives(&b, &a, &spec(1.0 - al, 1.0 - au)).unwrap();
            for t in ab.tensors().filter(|t| !t.name().starts_with("embed_tokens.")) {
                prop_assert!(t.bit_eq(ba.get(t.name()).unwrap()), "{}", t.name());
            }
        }

        #[test]
        fn monotone_in_alpha(x2 in -100.0f32..100.0, gap in 0.01f32..100.0) {
            let x1 = x2 + gap;
            let outs: Vec<f32> = GRID
                .iter()
                .map(|&a| merge_tensor(&scalar("w", x1), &scalar("w", x2), a).unwrap().data()[0])
                .collect();
            prop_assert!(outs.windows(2).all(|w| w[0] < w[1]), "{:?}", outs);
        }

        #[test]
        fn every_name_gets_one_segment(i in 0usize..8, sub in "[a-z]{1,6}(\\.[a-z0-9]{1,4})?") {
            let s = spec(0.5, 0.5);
            let name = format!("layers.{i}.{sub}");
            let seg = classify_tensor(&name, &s).unwrap();
            prop_assert_eq!(seg, if i < 4 { SegmentAssignment::Lower } else { SegmentAssignment::Upper });
        }
    }
}
