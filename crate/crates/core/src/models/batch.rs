//! Padded batches of encoded routes.

use evroute_nn::{Scalar, Tensor};

use crate::domain::Route;
use crate::error::{CoreError, Result};
use crate::schema::{route_to_matrix, FeatureSchema};

/// One route's `L × F` features (row-major) and optional kWh targets.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRoute {
    pub features: Vec<f32>,
    pub targets: Option<Vec<f32>>,
    pub len: usize,
}

impl EncodedRoute {
    pub fn encode(route: &Route, schema: &FeatureSchema) -> Result<Self> {
        let m = route_to_matrix::<f32>(route, schema)?;
        let targets = route.actual_energy.as_ref().map(|e| e.iter().map(|wh| (wh / 1000.0) as f32).collect());
        Ok(Self { features: m.into_data(), targets, len: route.len() })
    }
}

pub fn encode_routes(routes: &[&Route], schema: &FeatureSchema) -> Result<Vec<EncodedRoute>> {
    routes.iter().map(|r| EncodedRoute::encode(r, schema)).collect()
}

/// Right-padded batch: route `b`, step `t` lives at row `b·padded_len + t`.
#[derive(Clone, Debug)]
pub struct EncodedBatch<S: Scalar> {
    /// `[B·L, F]`, zero rows past each route's end.
    pub features: Tensor<S>,
    /// `[B, L]`, 1 on real segments.
    pub mask: Tensor<S>,
    /// `[B, L]` in kWh when every route carries targets.
    pub targets: Option<Tensor<S>>,
    pub lengths: Vec<usize>,
    pub padded_len: usize,
    pub width: usize,
}

impl<S: Scalar> EncodedBatch<S> {
    pub fn assemble(routes: &[&EncodedRoute], width: usize) -> Result<Self> {
        if routes.is_empty() {
            return Err(CoreError::Validation("cannot batch zero routes".into()));
        }
        let b = routes.len();
        let l = routes.iter().map(|r| r.len).max().unwrap_or(0);
        let mut features = vec![S::zero(); b * l * width];
        let mut mask = vec![S::zero(); b * l];
        let with_targets = routes.iter().all(|r| r.targets.is_some());
        let mut targets = vec![S::zero(); if with_targets { b * l } else { 0 }];
        for (i, r) in routes.iter().enumerate() {
            if r.features.len() != r.len * width {
                return Err(CoreError::Validation(format!(
                    "encoded route has {} values, expected {}×{width}",
                    r.features.len(),
                    r.len
                )));
            }
            let base = i * l * width;
            for (dst, &src) in features[base..base + r.len * width].iter_mut().zip(&r.features) {
                *dst = S::lit(src as f64);
            }
            mask[i * l..i * l + r.len].iter_mut().for_each(|m| *m = S::one());
            if let Some(t) = r.targets.as_ref().filter(|_| with_targets) {
                for (dst, &src) in targets[i * l..i * l + r.len].iter_mut().zip(t) {
                    *dst = S::lit(src as f64);
                }
            }
        }
        Ok(Self {
            features: Tensor::new(vec![b * l, width], features)?,
            mask: Tensor::new(vec![b, l], mask)?,
            targets: if with_targets { Some(Tensor::new(vec![b, l], targets)?) } else { None },
            lengths: routes.iter().map(|r| r.len).collect(),
            padded_len: l,
            width,
        })
    }

    pub fn from_routes(routes: &[&Route], schema: &FeatureSchema) -> Result<Self> {
        let encoded = encode_routes(routes, schema)?;
        Self::assemble(&encoded.iter().collect::<Vec<_>>(), schema.width())
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Features reordered so step `t` of route `b` is row `t·B + b`.
    pub fn time_major_features(&self) -> Tensor<S> {
        let (b, l, f) = (self.batch_size(), self.padded_len, self.width);
        let src = self.features.data();
        let mut out = Vec::with_capacity(src.len());
        for t in 0..l {
            for i in 0..b {
                let row = (i * l + t) * f;
                out.extend_from_slice(&src[row..row + f]);
            }
        }
        Tensor::new(vec![l * b, f], out).expect("same element count")
    }

    /// Unpads a `[B, L]` prediction tensor into per-route vectors.
    pub fn split_rows(&self, pred: &Tensor<S>) -> Vec<Vec<S>> {
        let l = self.padded_len;
        self.lengths.iter().enumerate().map(|(i, &n)| pred.data()[i * l..i * l + n].to_vec()).collect()
    }
}

/// Groups routes into batches of at most `batch_size`, after sorting by
/// length so padding stays small. Returns the batches and, per batch, the
/// original indices of its routes.
pub fn length_bucketed(encoded: &[EncodedRoute], batch_size: usize, width: usize) -> Result<Vec<(EncodedBatch<f32>, Vec<usize>)>> {
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by_key(|&i| (encoded[i].len, i));
    order
        .chunks(batch_size.max(1))
        .map(|idx| {
            let refs: Vec<&EncodedRoute> = idx.iter().map(|&i| &encoded[i]).collect();
            Ok((EncodedBatch::assemble(&refs, width)?, idx.to_vec()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(len: usize, base: f32) -> EncodedRoute {
        EncodedRoute {
            features: (0..len * 2).map(|i| base + i as f32).collect(),
            targets: Some((0..len).map(|i| i as f32).collect()),
            len,
        }
    }

    #[test]
    fn padding_layout() {
        let (a, b) = (enc(2, 0.0), enc(3, 100.0));
        let batch = EncodedBatch::<f64>::assemble(&[&a, &b], 2).unwrap();
        assert_eq!(batch.features.shape(), &[6, 2]);
        assert_eq!(batch.features.row(2), &[0.0, 0.0]);
        assert_eq!(batch.features.row(3), &[100.0, 101.0]);
        assert_eq!(batch.mask.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let tm = batch.time_major_features();
        assert_eq!(tm.row(1), &[100.0, 101.0]);
        assert_eq!(tm.row(4), &[0.0, 0.0]);
        let rows = batch.split_rows(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 9.0, 3.0, 4.0, 5.0]).unwrap());
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]]);
    }

    #[test]
    fn bucketing_keeps_every_route_once() {
        let routes: Vec<EncodedRoute> = [5, 1, 3, 2, 4].iter().map(|&l| enc(l, 0.0)).collect();
        let batches = length_bucketed(&routes, 2, 2).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|(_, idx)| idx.clone()).collect();
        assert_eq!(seen, vec![1, 3, 2, 4, 0]);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(batches[0].0.padded_len, 2);
    }
}
