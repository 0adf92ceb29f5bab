//! Sorted, right-padded batches of variable-length log-likelihood sequences.

use ndarray::{Array2, Array3, ArrayBase, Axis, Data, Ix2, RemoveAxis};

use crate::error::{Error, Result};

/// `(B, T_max, D)` log-likelihoods sorted by length, longest first.
#[derive(Clone, Debug)]
pub struct LogLikBatch {
    values: Array3<f64>,
    lengths: Vec<usize>,
    valid_batch_sizes: Vec<usize>,
    order_map: Vec<usize>,
}

impl LogLikBatch {
    /// Sorts `sequences` (each `(T_b, D)`) by descending length, stably, and
    /// zero-pads them to the right.
    pub fn new<S: Data<Elem = f64>>(sequences: &[ArrayBase<S, Ix2>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Batch("no sequences".into()));
        }
        let num_pdfs = sequences[0].ncols();
        for (i, seq) in sequences.iter().enumerate() {
            if seq.ncols() != num_pdfs {
                return Err(Error::Batch(format!(
                    "sequence {i} has {} pdfs, sequence 0 has {num_pdfs}",
                    seq.ncols()
                )));
            }
            if seq.nrows() == 0 {
                return Err(Error::Batch(format!("sequence {i} has zero frames")));
            }
        }
        if num_pdfs == 0 {
            return Err(Error::Batch("sequences have zero pdfs".into()));
        }

        let mut order_map: Vec<usize> = (0..sequences.len()).collect();
        order_map.sort_by_key(|&i| std::cmp::Reverse(sequences[i].nrows()));
        let lengths: Vec<usize> = order_map.iter().map(|&i| sequences[i].nrows()).collect();
        let max_len = lengths[0];

        let mut values = Array3::zeros((sequences.len(), max_len, num_pdfs));
        for (b, &src) in order_map.iter().enumerate() {
            let seq = &sequences[src];
            values
                .index_axis_mut(Axis(0), b)
                .slice_mut(ndarray::s![..seq.nrows(), ..])
                .assign(seq);
        }

        Ok(LogLikBatch {
            valid_batch_sizes: valid_batch_sizes(&lengths),
            values,
            lengths,
            order_map,
        })
    }

    /// Wraps an already padded `(B, T_max, D)` array given in caller order.
    /// Frames past each length are ignored.
    pub fn from_padded(padded: Array3<f64>, lengths: &[usize]) -> Result<Self> {
        let (b, t_max, _) = padded.dim();
        if lengths.len() != b {
            return Err(Error::Batch(format!("{} lengths for a batch of {b}", lengths.len())));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l > t_max) {
            return Err(Error::Batch(format!("length {bad} exceeds padded length {t_max}")));
        }
        let sequences: Vec<_> = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| padded.slice(ndarray::s![i, ..len, ..]))
            .collect();
        Self::new(&sequences)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Sorted per-item lengths, non-increasing.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// `B_v[t]`, the number of items with more than `t` frames.
    pub fn valid_batch_sizes(&self) -> &[usize] {
        &self.valid_batch_sizes
    }

    /// `order_map[k]` is the caller's index of the item at sorted position `k`.
    pub fn order_map(&self) -> &[usize] {
        &self.order_map
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.lengths[0]
    }

    pub fn num_pdfs(&self) -> usize {
        self.values.dim().2
    }

    pub fn total_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Sequence `b` (sorted order) without padding.
    pub fn sequence(&self, b: usize) -> ndarray::ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![b, ..self.lengths[b], ..])
    }

    /// Applies `order_map` to caller-ordered items.
    pub fn sort_items<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        if items.len() != self.batch_size() {
            return Err(Error::Shape(format!(
                "{} items for a batch of {}",
                items.len(),
                self.batch_size()
            )));
        }
        Ok(self.order_map.iter().map(|&i| items[i].clone()).collect())
    }

    /// Overwrites every padded cell with `value`. Used to check that padding
    /// is never read.
    pub fn poison_padding(&mut self, value: f64) {
        for (b, &len) in self.lengths.iter().enumerate() {
            self.values.slice_mut(ndarray::s![b, len.., ..]).fill(value);
        }
    }
}

/// `B_v[t] = |{b : lengths[b] > t}|` for `t < max(lengths)`.
pub fn valid_batch_sizes(lengths: &[usize]) -> Vec<usize> {
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_len];
    for &len in lengths {
        for c in &mut counts[..len] {
            *c += 1;
        }
    }
    counts
}

/// Moves sorted results back to caller order along axis 0.
pub fn unsort<S, D>(sorted: &ArrayBase<S, D>, order_map: &[usize]) -> Result<ndarray::Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: RemoveAxis,
{
    if sorted.ndim() == 0 || sorted.len_of(Axis(0)) != order_map.len() {
        return Err(Error::Shape(format!(
            "array with shape {:?} does not match an order map of length {}",
            sorted.shape(),
            order_map.len()
        )));
    }
    let mut out = sorted.to_owned();
    for (k, &dst) in order_map.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst).assign(&sorted.index_axis(Axis(0), k));
    }
    Ok(out)
}

/// [`unsort`] for per-item scalars.
pub fn unsort_vec<T: Clone>(sorted: &[T], order_map: &[usize]) -> Result<Vec<T>> {
    if sorted.len() != order_map.len() {
        return Err(Error::Shape(format!(
            "{} values for an order map of length {}",
            sorted.len(),
            order_map.len()
        )));
    }
    let mut out = sorted.to_vec();
    for (k, &dst) in order_map.iter().enumerate() {
        out[dst] = sorted[k].clone();
    }
    Ok(out)
}

/// Convenience for building a `(T, D)` sequence from nested rows.
pub fn sequence_from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn seqs(lengths: &[usize], d: usize) -> Vec<Array2<f64>> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &t)| Array2::from_elem((t, d), i as f64 + 1.0))
            .collect()
    }

    #[test]
    fn valid_sizes_for_100_99_98() {
        let batch = LogLikBatch::new(&seqs(&[100, 99, 98], 2)).unwrap();
        let bv = batch.valid_batch_sizes();
        assert_eq!(bv.len(), 100);
        assert!(bv[..98].iter().all(|&v| v == 3));
        assert_eq!(&bv[98..], &[2, 1]);
    }

    #[test]
    fn single_sequence() {
        let batch = LogLikBatch::new(&seqs(&[5], 3)).unwrap();
        assert_eq!(batch.valid_batch_sizes(), &[1; 5]);
        assert_eq!(batch.values().dim(), (1, 5, 3));
    }

    #[test]
    fn ties_keep_input_order() {
        let batch = LogLikBatch::new(&seqs(&[4, 4], 1)).unwrap();
        assert_eq!(batch.order_map(), &[0, 1]);
    }

    #[test]
    fn sorts_and_pads() {
        let batch = LogLikBatch::new(&seqs(&[3, 7], 2)).unwrap();
        assert_eq!(batch.order_map(), &[1, 0]);
        assert_eq!(batch.lengths(), &[7, 3]);
        assert_eq!(batch.values()[[0, 6, 1]], 2.0);
        assert_eq!(batch.values()[[1, 2, 0]], 1.0);
        assert_eq!(batch.values()[[1, 3, 0]], 0.0);
    }

    #[test]
    fn unsort_swaps_back() {
        let batch = LogLikBatch::new(&seqs(&[3, 7], 1)).unwrap();
        let per_item = Array1::from(vec![10.0, 20.0]);
        let back = unsort(&per_item, batch.order_map()).unwrap();
        assert_eq!(back.to_vec(), vec![20.0, 10.0]);
        assert_eq!(unsort_vec(&[10, 20], batch.order_map()).unwrap(), vec![20, 10]);
        assert!(unsort(&Array1::from(vec![1.0]), batch.order_map()).is_err());
    }

    #[test]
    fn identity_unsort() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        assert_eq!(unsort(&a, &[0, 1, 2]).unwrap(), a);
    }

    #[test]
    fn rejects_bad_input() {
        let empty: Vec<Array2<f64>> = vec![];
        assert!(LogLikBatch::new(&empty).is_err());
        assert!(LogLikBatch::new(&[Array2::zeros((2, 2)), Array2::zeros((2, 3))]).is_err());
        assert!(LogLikBatch::new(&[Array2::zeros((0, 2))]).is_err());
    }

    #[test]
    fn frame_totals_agree() {
        let lengths = [9, 2, 5, 5, 1];
        let bv = valid_batch_sizes(&lengths);
        assert_eq!(bv.iter().sum::<usize>(), lengths.iter().sum::<usize>());
    }
}
