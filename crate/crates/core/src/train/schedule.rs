use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::datamodel::{ExtraPool, FeatureMatrix, ModalKind, TrimodalDataset};
use crate::error::{Error, Result};
use crate::gaussian::ModalitySet;
use crate::objectives::BatchView;

/// One source of training rows: the seen split, the novel split, or an extra pool.
#[derive(Debug, Clone)]
pub struct Pool {
    pub name: String,
    blocks: [Option<Array2<f64>>; 3],
    rows: usize,
}

impl Pool {
    fn new(name: String, blocks: Vec<(ModalKind, &FeatureMatrix)>) -> Self {
        let rows = blocks[0].1.rows();
        let mut out: [Option<Array2<f64>>; 3] = Default::default();
        for (kind, m) in blocks {
            out[kind.index()] = Some(m.to_f64());
        }
        Pool { name, blocks: out, rows }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn present(&self) -> ModalitySet {
        ModalitySet::from_kinds(ModalKind::ALL.into_iter().filter(|k| self.blocks[k.index()].is_some()))
    }

    pub fn batch(&self, rows: &[usize]) -> Result<BatchView> {
        BatchView::new(
            ModalKind::ALL
                .into_iter()
                .filter_map(|k| self.blocks[k.index()].as_ref().map(|b| (k, b.select(Axis(0), rows))))
                .collect(),
        )
    }

    pub fn all(&self) -> Result<BatchView> {
        self.batch(&(0..self.rows).collect::<Vec<_>>())
    }
}

/// Training pools in a fixed order; the seen pool is always first.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub pools: Vec<Pool>,
}

impl TrainingData {
    pub fn from_dataset(ds: &TrimodalDataset) -> Result<Self> {
        use ModalKind::{Brain, Textual, Visual};
        let mut pools = vec![Pool::new(
            "seen".into(),
            vec![(Brain, &ds.seen.brain), (Visual, &ds.seen.visual), (Textual, &ds.seen.textual)],
        )];
        if ds.novel.labels.len() > 0 {
            pools.push(Pool::new(
                "novel".into(),
                vec![(Visual, &ds.novel.visual), (Textual, &ds.novel.textual)],
            ));
        }
        for (i, extra) in ds.extra.iter().enumerate() {
            let blocks = match extra {
                ExtraPool::Pairs { visual, textual } => vec![(Visual, visual), (Textual, textual)],
                ExtraPool::Visual(m) => vec![(Visual, m)],
                ExtraPool::Textual(m) => vec![(Textual, m)],
            };
            pools.push(Pool::new(format!("extra{i}"), blocks));
        }
        if let Some(p) = pools.iter().find(|p| p.rows < 2) {
            return Err(Error::Invalid(format!("training pool `{}` needs at least 2 rows", p.name)));
        }
        Ok(TrainingData { pools })
    }

    pub fn seen(&self) -> &Pool {
        &self.pools[0]
    }

    pub fn batch(&self, b: &ScheduledBatch) -> Result<BatchView> {
        self.pools[b.pool].batch(&b.rows)
    }
}

/// Rows of one pool forming a minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledBatch {
    pub pool: usize,
    pub rows: Vec<usize>,
}

/// Consecutive chunks of a shuffled order; a trailing single row joins the previous chunk.
fn chunks(rows: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// One epoch of minibatches. Each batch comes from a pool chosen with
/// probability proportional to its size; other pools restart with a fresh
/// shuffle when exhausted, and the epoch ends with the last seen batch.
pub fn schedule_batches(data: &TrainingData, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<ScheduledBatch>> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    if data.pools.is_empty() || data.seen().rows() == 0 {
        return Err(Error::Invalid("empty seen pool".into()));
    }
    let sizes: Vec<usize> = data.pools.iter().map(Pool::rows).collect();
    let total: usize = sizes.iter().sum();
    let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = sizes
        .iter()
        .map(|&n| chunks(n, batch_size, rng).into())
        .collect();
    let mut out = Vec::new();
    loop {
        let mut u = rng.random_range(0..total);
        let pool = sizes
            .iter()
            .position(|&s| {
                if u < s {
                    true
                } else {
                    u -= s;
                    false
                }
            })
            .expect("u < total");
        if queues[pool].is_empty() {
            queues[pool] = chunks(sizes[pool], batch_size, rng).into();
        }
        let rows = queues[pool].pop_front().expect("refilled");
        out.push(ScheduledBatch { pool, rows });
        if pool == 0 && queues[0].is_empty() {
            return Ok(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synth_generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sizes_data(sizes: &[usize]) -> TrainingData {
        TrainingData {
            pools: sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let m = FeatureMatrix::new(Array2::zeros((n, 2))).unwrap();
                    let kinds = if i == 0 { ModalKind::ALL.to_vec() } else { vec![ModalKind::Visual] };
                    Pool::new(format!("p{i}"), kinds.into_iter().map(|k| (k, &m)).collect())
                })
                .collect(),
        }
    }

    #[test]
    fn seen_only_covers_every_row_once() {
        let data = sizes_data(&[10]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = schedule_batches(&data, 3, &mut rng).unwrap();
        // 10 rows in chunks of 3: 3, 3, 4 (trailing single merged).
        assert_eq!(batches.iter().map(|b| b.rows.len()).collect::<Vec<_>>(), vec![3, 3, 4]);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.rows.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.pool == 0));
    }

    #[test]
    fn proportional_interleaving() {
        let data = sizes_data(&[1200, 400]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut seen, mut novel) = (0usize, 0usize);
        for _ in 0..1000 {
            let batches = schedule_batches(&data, 100, &mut rng).unwrap();
            let s = batches.iter().filter(|b| b.pool == 0).count();
            assert_eq!(s, 12);
            assert_eq!(batches.last().unwrap().pool, 0);
            seen += s;
            novel += batches.len() - s;
        }
        let ratio = seen as f64 / novel as f64;
        assert!((ratio - 3.0).abs() / 3.0 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn pools_from_dataset() {
        let cfg = SynthConfig {
            extra_visual: 30,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let data = TrainingData::from_dataset(&ds).unwrap();
        assert_eq!(data.pools.len(), 3);
        assert_eq!(data.seen().present(), ModalitySet::ALL);
        assert_eq!(data.pools[1].present().to_string(), "v,t");
        assert_eq!(data.pools[2].present().to_string(), "v");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = schedule_batches(&data, 64, &mut rng).unwrap();
        assert!(batches.iter().any(|b| b.pool != 0));
        let b = data.batch(&batches[0]).unwrap();
        assert_eq!(b.present(), data.pools[batches[0].pool].present());
    }

    #[test]
    fn schedule_is_seeded() {
        let data = sizes_data(&[50, 20]);
        let a = schedule_batches(&data, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = schedule_batches(&data, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(schedule_batches(&data, 1, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }
}
