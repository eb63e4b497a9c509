//! Cutting a layer into feature vectors.
//!
//! An `R x C` weight matrix is read either as `C` vectors of length `R`
//! (forward: vector `j` gathers column `j`) or as `R` vectors of length `C`
//! (backward: vector `i` is row `i`). A `O x I x Kh x Kw` convolution yields
//! one flattened vector per output filter. The resulting sets are multisets:
//! nothing downstream may depend on vector order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weightstore::WeightTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpretation {
    Forward,
    Backward,
}

impl std::fmt::Display for Interpretation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interpretation::Forward => "forward",
            Interpretation::Backward => "backward",
        })
    }
}

impl std::str::FromStr for Interpretation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Interpretation::Forward),
            "backward" => Ok(Interpretation::Backward),
            other => Err(Error::InvalidConfig(format!(
                "interpretation must be `forward` or `backward`, got `{other}`"
            ))),
        }
    }
}

/// Where a run of vectors inside a [`FeatureVectorSet`] came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorSource {
    pub network_id: String,
    pub layer: String,
    pub interpretation: Interpretation,
    pub count: usize,
}

/// Equal-length vectors stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVectorSet {
    dim: usize,
    data: Vec<f64>,
    sources: Vec<VectorSource>,
}

impl FeatureVectorSet {
    /// Builds a set from explicit vectors. Every vector must have length `dim`.
    pub fn from_vectors(
        dim: usize,
        vectors: impl IntoIterator<Item = Vec<f64>>,
        source: VectorSource,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dim", "vector length must be positive"));
        }
        let mut data = Vec::new();
        let mut count = 0;
        for v in vectors {
            if v.len() != dim {
                return Err(Error::dim_mismatch(
                    format!("vector {count} from `{}`", source.network_id),
                    dim,
                    v.len(),
                ));
            }
            data.extend_from_slice(&v);
            count += 1;
        }
        Ok(FeatureVectorSet {
            dim,
            data,
            sources: vec![VectorSource { count, ..source }],
        })
    }

    /// Builds an anonymous set from a flat row-major buffer.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::dim_mismatch("flat buffer", dim, data.len()));
        }
        let count = data.len() / dim;
        Ok(FeatureVectorSet {
            dim,
            data,
            sources: vec![VectorSource {
                network_id: String::new(),
                layer: String::new(),
                interpretation: Interpretation::Forward,
                count,
            }],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn sources(&self) -> &[VectorSource] {
        &self.sources
    }

    pub fn interpretation(&self) -> Interpretation {
        self.sources[0].interpretation
    }

    /// Returns a copy with the vectors reordered by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> FeatureVectorSet {
        assert_eq!(order.len(), self.len(), "order must be a permutation");
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.vector(i));
        }
        FeatureVectorSet {
            dim: self.dim,
            data,
            sources: self.sources.clone(),
        }
    }
}

fn source_of(t: &WeightTensor, network_id: &str, interp: Interpretation) -> VectorSource {
    VectorSource {
        network_id: network_id.to_string(),
        layer: t.name.clone(),
        interpretation: interp,
        count: 0,
    }
}

/// Reads a 2-D `R x C` tensor as feature vectors.
///
/// Forward gives `C` vectors of length `R`, backward gives `R` vectors of length `C`.
pub fn vectorize_matrix(
    t: &WeightTensor,
    interp: Interpretation,
    network_id: &str,
) -> Result<FeatureVectorSet> {
    if t.shape.len() != 2 {
        return Err(Error::Dimensionality {
            name: t.name.clone(),
            expected: "2",
            found: t.shape.len(),
        });
    }
    let (rows, cols) = (t.shape[0], t.shape[1]);
    let source = source_of(t, network_id, interp);
    match interp {
        Interpretation::Backward => FeatureVectorSet::from_vectors(
            cols,
            t.data.chunks_exact(cols).map(<[f64]>::to_vec),
            source,
        ),
        Interpretation::Forward => FeatureVectorSet::from_vectors(
            rows,
            (0..cols).map(|j| (0..rows).map(|i| t.data[i * cols + j]).collect()),
            source,
        ),
    }
}

/// Flattens each output filter of an `O x I x Kh x Kw` tensor into one vector.
pub fn vectorize_conv(t: &WeightTensor, network_id: &str) -> Result<FeatureVectorSet> {
    if t.shape.len() != 4 {
        return Err(Error::Dimensionality {
            name: t.name.clone(),
            expected: "4",
            found: t.shape.len(),
        });
    }
    let per_filter = t.shape[1] * t.shape[2] * t.shape[3];
    FeatureVectorSet::from_vectors(
        per_filter,
        t.data.chunks_exact(per_filter).map(<[f64]>::to_vec),
        source_of(t, network_id, Interpretation::Forward),
    )
}

/// Dispatches on rank: 2-D tensors honor `interp`, 4-D tensors are flattened
/// per filter (tagged with `interp` so they stack with like-configured sets).
pub fn vectorize_layer(
    t: &WeightTensor,
    interp: Interpretation,
    network_id: &str,
) -> Result<FeatureVectorSet> {
    match t.shape.len() {
        2 => vectorize_matrix(t, interp, network_id),
        4 => {
            let mut set = vectorize_conv(t, network_id)?;
            set.sources[0].interpretation = interp;
            Ok(set)
        }
        n => Err(Error::Dimensionality {
            name: t.name.clone(),
            expected: "2 or 4",
            found: n,
        }),
    }
}

/// Vector count and length a layer of `shape` yields under `interp`.
pub fn vector_layout(shape: &[usize], interp: Interpretation) -> Option<(usize, usize)> {
    match (shape, interp) {
        ([r, c], Interpretation::Forward) => Some((*c, *r)),
        ([r, c], Interpretation::Backward) => Some((*r, *c)),
        ([o, i, kh, kw], _) => Some((*o, i * kh * kw)),
        _ => None,
    }
}

/// Concatenates per-network sets into one corpus-wide set.
pub fn stack_corpus(sets: &[FeatureVectorSet]) -> Result<FeatureVectorSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InsufficientData("no feature vector sets to stack".into()))?;
    let mut data = Vec::with_capacity(sets.iter().map(|s| s.data.len()).sum());
    let mut sources = Vec::new();
    for s in sets {
        let id = || s.sources[0].network_id.clone();
        if s.dim != first.dim {
            return Err(Error::dim_mismatch(format!("network `{}`", id()), first.dim, s.dim));
        }
        if s.interpretation() != first.interpretation() {
            return Err(Error::CorpusInconsistency {
                network_id: id(),
                message: format!(
                    "uses the {} interpretation, expected {}",
                    s.interpretation(),
                    first.interpretation()
                ),
            });
        }
        data.extend_from_slice(&s.data);
        sources.extend(s.sources.iter().cloned());
    }
    Ok(FeatureVectorSet {
        dim: first.dim,
        data,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m23() -> WeightTensor {
        WeightTensor::new("fc", vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap()
    }

    fn vecs(s: &FeatureVectorSet) -> Vec<Vec<f64>> {
        s.iter().map(<[f64]>::to_vec).collect()
    }

    fn sorted(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn forward_takes_columns() {
        let s = vectorize_matrix(&m23(), Interpretation::Forward, "n").unwrap();
        assert_eq!(vecs(&s), vec![vec![1., 4.], vec![2., 5.], vec![3., 6.]]);
    }

    #[test]
    fn backward_takes_rows() {
        let s = vectorize_matrix(&m23(), Interpretation::Backward, "n").unwrap();
        assert_eq!(vecs(&s), vec![vec![1., 2., 3.], vec![4., 5., 6.]]);
    }

    #[test]
    fn large_forward_layout() {
        let t = WeightTensor::new("last_linear", vec![512, 1792], vec![0.0; 512 * 1792]).unwrap();
        let s = vectorize_matrix(&t, Interpretation::Forward, "n").unwrap();
        assert_eq!((s.len(), s.dim()), (1792, 512));
        assert_eq!(vector_layout(&t.shape, Interpretation::Forward), Some((1792, 512)));
    }

    #[test]
    fn rank_errors() {
        let t = WeightTensor::new("b", vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            vectorize_matrix(&t, Interpretation::Forward, "n"),
            Err(Error::Dimensionality { .. })
        ));
        assert!(vectorize_conv(&m23(), "n").is_err());
        assert!(vectorize_layer(&t, Interpretation::Backward, "n").is_err());
    }

    #[test]
    fn conv_flattens_per_filter() {
        let t = WeightTensor::new("conv", vec![2, 1, 2, 2], (1..=8).map(f64::from).collect())
            .unwrap();
        let s = vectorize_conv(&t, "n").unwrap();
        assert_eq!(vecs(&s), vec![vec![1., 2., 3., 4.], vec![5., 6., 7., 8.]]);
        let t = WeightTensor::new("conv", vec![3, 2, 3, 3], vec![0.0; 54]).unwrap();
        let s = vectorize_conv(&t, "n").unwrap();
        assert_eq!((s.len(), s.dim()), (3, 18));
    }

    #[test]
    fn stacking() {
        let a = vectorize_matrix(&m23(), Interpretation::Forward, "a").unwrap();
        let mut t = m23();
        t.data.iter_mut().for_each(|v| *v *= 10.0);
        let b = vectorize_matrix(&t, Interpretation::Forward, "b").unwrap();
        let ab = stack_corpus(&[a.clone(), b.clone()]).unwrap();
        let ba = stack_corpus(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab.len(), 6);
        assert_eq!(sorted(vecs(&ab)), sorted(vecs(&ba)));
        assert_eq!(stack_corpus(&[a.clone()]).unwrap(), a);

        let c = vectorize_matrix(&m23(), Interpretation::Backward, "odd-one").unwrap();
        let err = stack_corpus(&[a, c]).unwrap_err();
        assert!(err.to_string().contains("odd-one"), "{err}");
    }

    fn arb_matrix() -> impl Strategy<Value = WeightTensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| WeightTensor::new("m", vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn forward_is_backward_of_transpose(t in arb_matrix()) {
            let (r, c) = (t.shape[0], t.shape[1]);
            let transposed: Vec<f64> =
                (0..c).flat_map(|j| (0..r).map(move |i| (i, j))).map(|(i, j)| t.data[i * c + j]).collect();
            let tt = WeightTensor::new("m", vec![c, r], transposed).unwrap();
            let fwd = vectorize_matrix(&t, Interpretation::Forward, "n").unwrap();
            let bwd = vectorize_matrix(&tt, Interpretation::Backward, "n").unwrap();
            prop_assert_eq!(vecs(&fwd), vecs(&bwd));
            let back = vectorize_matrix(&t, Interpretation::Backward, "n").unwrap();
            prop_assert_eq!(fwd.len() * fwd.dim(), t.numel());
            prop_assert_eq!(back.len() * back.dim(), t.numel());
        }

        #[test]
        fn conv_flatten_round_trips(
            shape in (1usize..4, 1usize..3, 1usize..4, 1usize..4),
            seed in any::<u64>(),
        ) {
            let (o, i, kh, kw) = shape;
            let n = o * i * kh * kw;
            let data: Vec<f64> = (0..n).map(|k| ((k as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
            let t = WeightTensor::new("c", vec![o, i, kh, kw], data.clone()).unwrap();
            let s = vectorize_conv(&t, "n").unwrap();
            prop_assert_eq!(s.len(), o);
            let rebuilt: Vec<f64> = s.iter().flatten().copied().collect();
            prop_assert_eq!(rebuilt, data);
        }
    }
}
