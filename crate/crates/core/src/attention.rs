//! QKV projection, multi-head self-attention, masked cross-image attention
//! sharing and its subset-restricted variant.
//!
//! Masks apply identically to every head. Blocked keys are never touched by
//! the kernel, so their weight is exactly zero and their K/V rows cannot
//! influence any output.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{masked_row_softmax, matmul, matmul_transposed, AdditiveMask, Matrix};
use crate::masking::{PropagationMask, SubjectMask};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// `W_Q`, `W_K`, `W_V` (each `d × d_k`) and the head count.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub heads: usize,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn new(query: Matrix<T>, key: Matrix<T>, value: Matrix<T>, heads: usize) -> Result<Self> {
        let shape = query.shape();
        if key.shape() != shape || value.shape() != shape {
            return Err(Error::shape("W_Q, W_K and W_V must share one shape"));
        }
        if heads == 0 || !shape.1.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "projection width {} not divisible into {heads} heads",
                shape.1
            )));
        }
        if !(query.is_finite() && key.is_finite() && value.is_finite()) {
            return Err(Error::NonFinite("projection weights"));
        }
        Ok(Self { query, key, value, heads })
    }

    pub fn input_dim(&self) -> usize {
        self.query.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.query.cols()
    }
}

/// Queries, keys and values of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

pub fn project_qkv<T: Scalar>(x: &Matrix<T>, w: &ProjectionWeights<T>) -> Result<Qkv<T>> {
    if x.cols() != w.input_dim() {
        return Err(Error::shape(format!(
            "embeddings of width {} against projections expecting {}",
            x.cols(),
            w.input_dim()
        )));
    }
    Ok(Qkv {
        q: matmul(x, &w.query)?,
        k: matmul(x, &w.key)?,
        v: matmul(x, &w.value)?,
    })
}

/// Per-image Q/K/V plus the keys and values stacked in image order.
#[derive(Clone, Debug)]
pub struct BatchQkv<T> {
    images: Vec<Qkv<T>>,
    k_all: Matrix<T>,
    v_all: Matrix<T>,
    heads: usize,
}

impl<T: Scalar> BatchQkv<T> {
    pub fn new(images: Vec<Qkv<T>>, heads: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::config("empty batch"))?;
        let shape = first.q.shape();
        if images
            .iter()
            .any(|x| x.q.shape() != shape || x.k.shape() != shape || x.v.shape() != shape)
        {
            return Err(Error::shape("batch images differ in Q/K/V shape"));
        }
        if heads == 0 || !shape.1.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "projection width {} not divisible into {heads} heads",
                shape.1
            )));
        }
        let k_all = Matrix::vstack(&images.iter().map(|x| &x.k).collect::<Vec<_>>())?;
        let v_all = Matrix::vstack(&images.iter().map(|x| &x.v).collect::<Vec<_>>())?;
        Ok(Self { images, k_all, v_all, heads })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn patches_per_image(&self) -> usize {
        self.images[0].q.rows()
    }

    pub fn image(&self, i: usize) -> &Qkv<T> {
        &self.images[i]
    }

    pub fn images(&self) -> &[Qkv<T>] {
        &self.images
    }

    pub fn k_all(&self) -> &Matrix<T> {
        &self.k_all
    }

    pub fn v_all(&self) -> &Matrix<T> {
        &self.v_all
    }

    pub fn q_all(&self) -> Matrix<T> {
        Matrix::vstack(&self.images.iter().map(|x| &x.q).collect::<Vec<_>>())
            .expect("shapes validated at construction")
    }

    /// Sub-batch of the given images, in the given order.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let images = ids
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("image {i} outside batch of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, self.heads)
    }
}

/// Attention-sharing dropout: rate plus one stream per query image.
pub struct SharingDropout<'a> {
    pub rate: f64,
    pub streams: &'a mut [SplitMix64],
}

/// Clears visible cross-image entries of `gamma` with probability `rate`,
/// once per (query image, key patch). The own-image segment is never touched.
pub fn drop_cross_entries(gamma: &PropagationMask, rate: f64, rng: &mut SplitMix64) -> Result<PropagationMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(gamma.clone());
    }
    let p = gamma.patches_per_image;
    let own = gamma.image * p..(gamma.image + 1) * p;
    let visible = gamma
        .visible
        .visible()
        .iter()
        .enumerate()
        .map(|(idx, &v)| v && (own.contains(&idx) || !rng.bernoulli(rate)))
        .collect();
    Ok(PropagationMask {
        image: gamma.image,
        patches_per_image: p,
        visible: AdditiveMask::new(visible),
    })
}

/// Multi-head attention of every query row over the listed key rows.
///
/// Per head, the visible keys and values are gathered into dense panels; the
/// logits and the weighted values are then two matrix products.
fn attend<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize, keys: &[usize]) -> Result<Matrix<T>> {
    if q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows() {
        return Err(Error::shape("incompatible Q/K/V shapes"));
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::config(format!("width {} not divisible into {heads} heads", q.cols())));
    }
    if keys.is_empty() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let (rows, width) = q.shape();
    let hd = width / heads;
    let nk = keys.len();
    let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
    let mut out = Matrix::zeros(rows, width);
    if rows == 0 {
        return Ok(out);
    }
    let mut kh = vec![T::zero(); nk * hd];
    let mut vh = vec![T::zero(); nk * hd];
    let mut logits = vec![T::zero(); rows * nk];
    let out_data = out.data_mut();
    for h in 0..heads {
        let c0 = h * hd;
        for (j, &key) in keys.iter().enumerate() {
            kh[j * hd..(j + 1) * hd].copy_from_slice(&k.row(key)[c0..c0 + hd]);
            vh[j * hd..(j + 1) * hd].copy_from_slice(&v.row(key)[c0..c0 + hd]);
        }
        // SAFETY: `q` is read as the `rows × hd` column block at `c0`, `kh`
        // transposed as `hd × nk`; `logits` is a dense `rows × nk` buffer.
        unsafe {
            T::gemm(
                rows,
                hd,
                nk,
                q.data().as_ptr().add(c0),
                (width as isize, 1),
                kh.as_ptr(),
                (1, hd as isize),
                T::zero(),
                logits.as_mut_ptr(),
                (nk as isize, 1),
            );
        }
        for row in logits.chunks_exact_mut(nk) {
            let mut max = T::neg_infinity();
            for w in row.iter_mut() {
                *w *= scale;
                if *w > max {
                    max = *w;
                }
            }
            for w in row.iter_mut() {
                *w -= max;
            }
            T::exp_nonpositive(row);
            let mut sum = T::zero();
            for &w in row.iter() {
                sum += w;
            }
            let inv = T::one() / sum;
            for w in row.iter_mut() {
                *w *= inv;
            }
        }
        // SAFETY: `logits` is `rows × nk`, `vh` is `nk × hd`, and the output
        // is the `rows × hd` column block of `out` at `c0`.
        unsafe {
            T::gemm(
                rows,
                nk,
                hd,
                logits.as_ptr(),
                (nk as isize, 1),
                vh.as_ptr(),
                (hd as isize, 1),
                T::zero(),
                out_data.as_mut_ptr().add(c0),
                (width as isize, 1),
            );
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("attention output"));
    }
    Ok(out)
}

/// `softmax(Q Kᵀ / √d_head) V` per head, heads concatenated.
pub fn self_attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize) -> Result<Matrix<T>> {
    let keys: Vec<usize> = (0..k.rows()).collect();
    attend(q, k, v, heads, &keys)
}

fn check_gammas<T: Scalar>(batch: &BatchQkv<T>, gammas: &[PropagationMask]) -> Result<()> {
    let total = batch.len() * batch.patches_per_image();
    if gammas.len() != batch.len() {
        return Err(Error::shape(format!(
            "{} propagation masks for {} images",
            gammas.len(),
            batch.len()
        )));
    }
    for (i, g) in gammas.iter().enumerate() {
        if g.image != i || g.visible.len() != total || g.patches_per_image != batch.patches_per_image() {
            return Err(Error::shape(format!("propagation mask {i} does not match the batch layout")));
        }
    }
    Ok(())
}

fn apply_dropout(gammas: &[PropagationMask], dropout: Option<SharingDropout<'_>>) -> Result<Vec<PropagationMask>> {
    match dropout {
        None => Ok(gammas.to_vec()),
        Some(d) => {
            if d.streams.len() != gammas.len() {
                return Err(Error::shape("one dropout stream per query image required"));
            }
            gammas
                .iter()
                .zip(d.streams.iter_mut())
                .map(|(g, rng)| drop_cross_entries(g, d.rate, rng))
                .collect()
        }
    }
}

/// Masked cross-image attention: queries of image `i` attend to the stacked
/// keys of the whole batch under `Γ_i`. Outputs are in image order.
pub fn cross_image_attention<T: Scalar>(
    batch: &BatchQkv<T>,
    gammas: &[PropagationMask],
    dropout: Option<SharingDropout<'_>>,
) -> Result<Vec<Matrix<T>>> {
    check_gammas(batch, gammas)?;
    let gammas = apply_dropout(gammas, dropout)?;
    gammas
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let keys = g.visible.visible_indices();
            attend(&batch.image(i).q, batch.k_all(), batch.v_all(), batch.heads(), &keys)
        })
        .collect()
}

/// Dense per-head attention weights (`P × N·P` per head) of every image, via
/// the full masked softmax. Meant for inspection; the kernel never builds these.
pub fn cross_image_attention_weights<T: Scalar>(
    batch: &BatchQkv<T>,
    gammas: &[PropagationMask],
) -> Result<Vec<Vec<Matrix<T>>>> {
    check_gammas(batch, gammas)?;
    let width = batch.image(0).q.cols();
    let hd = width / batch.heads();
    let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
    let mut all = Vec::with_capacity(batch.len());
    for (i, g) in gammas.iter().enumerate() {
        let mut per_head = Vec::with_capacity(batch.heads());
        for h in 0..batch.heads() {
            let qh = batch.image(i).q.col_block(h * hd, hd);
            let kh = batch.k_all().col_block(h * hd, hd);
            let logits = matmul_transposed(&qh, &kh)?.scale(scale);
            per_head.push(masked_row_softmax(&logits, std::slice::from_ref(&g.visible))?);
        }
        all.push(per_head);
    }
    Ok(all)
}

/// Reference keys and values of the subset images, stacked in subset order.
///
/// Can be persisted and reused to generate further images against the same
/// references.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetKv<T> {
    pub images: Vec<usize>,
    pub patches_per_image: usize,
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
}

impl<T: Scalar> SubsetKv<T> {
    pub fn from_batch(batch: &BatchQkv<T>, subset: &[usize]) -> Result<Self> {
        let sub = batch.select(subset)?;
        Ok(Self {
            images: subset.to_vec(),
            patches_per_image: batch.patches_per_image(),
            keys: sub.k_all,
            values: sub.v_all,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn validate_subset(n: usize, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::config("subset must contain at least one image"));
    }
    let mut seen = vec![false; n];
    for &s in subset {
        if s >= n {
            return Err(Error::config(format!("subset image {s} outside batch of {n}")));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::config(format!("subset lists image {s} twice")));
        }
    }
    Ok(())
}

/// Attention of one non-reference image over `[own keys ∪ reference keys]`.
/// Own keys are fully visible; reference patches of image `reference.images[s]`
/// are gated by `reference_masks[s]` (after optional dropout).
pub fn reference_attention<T: Scalar>(
    own: &Qkv<T>,
    heads: usize,
    reference: &SubsetKv<T>,
    reference_masks: &[SubjectMask],
    dropout: Option<(f64, &mut SplitMix64)>,
) -> Result<Matrix<T>> {
    let p = own.k.rows();
    if reference.patches_per_image != p || reference_masks.len() != reference.len() {
        return Err(Error::shape("reference cache does not match the query image"));
    }
    if reference_masks.iter().any(|m| m.len() != p) {
        return Err(Error::shape("reference masks differ in length"));
    }
    let keys = Matrix::vstack(&[&own.k, &reference.keys])?;
    let values = Matrix::vstack(&[&own.v, &reference.values])?;
    let mut visible: Vec<usize> = (0..p).collect();
    let (rate, mut rng) = match dropout {
        Some((rate, rng)) => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
            }
            (rate, Some(rng))
        }
        None => (0.0, None),
    };
    for (s, m) in reference_masks.iter().enumerate() {
        for (patch, &bit) in m.bits.iter().enumerate() {
            let dropped = match rng.as_deref_mut() {
                Some(r) if bit && rate > 0.0 => r.bernoulli(rate),
                _ => false,
            };
            if bit && !dropped {
                visible.push(p + s * p + patch);
            }
        }
    }
    attend(&own.q, &keys, &values, heads, &visible)
}

/// Subset-restricted sharing. Subset images attend among themselves exactly as
/// in [`cross_image_attention`] over the sub-batch; every other image attends
/// to its own keys plus the subset keys gated by the subset masks.
pub fn subset_attention<T: Scalar>(
    batch: &BatchQkv<T>,
    subset: &[usize],
    masks: &[SubjectMask],
    dropout: Option<SharingDropout<'_>>,
) -> Result<Vec<Matrix<T>>> {
    let n = batch.len();
    validate_subset(n, subset)?;
    if masks.len() != n {
        return Err(Error::shape(format!("{} masks for {n} images", masks.len())));
    }
    let (rate, mut streams) = match dropout {
        Some(d) => {
            if d.streams.len() != n {
                return Err(Error::shape("one dropout stream per query image required"));
            }
            (Some(d.rate), Some(d.streams))
        }
        None => (None, None),
    };

    let sub_batch = batch.select(subset)?;
    let sub_masks: Vec<SubjectMask> = subset
        .iter()
        .enumerate()
        .map(|(k, &i)| SubjectMask::new(k, masks[i].bits.clone()))
        .collect();
    let sub_gammas = (0..subset.len())
        .map(|k| crate::masking::build_propagation_mask(k, &sub_masks))
        .collect::<Result<Vec<_>>>()?;
    let sub_out = match (rate, streams.as_deref_mut()) {
        (Some(rate), Some(all)) => {
            let mut picked: Vec<SplitMix64> = subset.iter().map(|&i| all[i].clone()).collect();
            let out = cross_image_attention(
                &sub_batch,
                &sub_gammas,
                Some(SharingDropout { rate, streams: &mut picked }),
            )?;
            for (&i, s) in subset.iter().zip(picked) {
                all[i] = s;
            }
            out
        }
        _ => cross_image_attention(&sub_batch, &sub_gammas, None)?,
    };

    let reference = SubsetKv {
        images: subset.to_vec(),
        patches_per_image: batch.patches_per_image(),
        keys: sub_batch.k_all,
        values: sub_batch.v_all,
    };
    let ref_masks: Vec<SubjectMask> = subset.iter().map(|&i| masks[i].clone()).collect();

    let mut outputs: Vec<Option<Matrix<T>>> = vec![None; n];
    for (&i, h) in subset.iter().zip(sub_out) {
        outputs[i] = Some(h);
    }
    let others: Vec<usize> = (0..n).filter(|i| !subset.contains(i)).collect();
    let mut other_streams: Vec<Option<SplitMix64>> = others
        .iter()
        .map(|&i| streams.as_ref().map(|s| s[i].clone()))
        .collect();
    let computed = others
        .par_iter()
        .zip(other_streams.par_iter_mut())
        .map(|(&i, rng)| {
            let drop = match (rate, rng.as_mut()) {
                (Some(r), Some(s)) => Some((r, s)),
                _ => None,
            };
            reference_attention(batch.image(i), batch.heads(), &reference, &ref_masks, drop)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(all) = streams {
        for (&i, s) in others.iter().zip(other_streams) {
            all[i] = s.expect("stream present when dropout is on");
        }
    }
    for (&i, h) in others.iter().zip(computed) {
        outputs[i] = Some(h);
    }
    Ok(outputs.into_iter().map(|h| h.expect("every image computed")).collect())
}
