use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// One unpaired minibatch with the dataset indices it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub x_idx: Vec<usize>,
    pub y_idx: Vec<usize>,
}

struct Order {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl Order {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Order {
            rng,
            perm: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }
}

/// Endless shuffled batches. Each domain is reshuffled independently at
/// every epoch boundary; a batch may straddle two epochs, so every sample
/// appears exactly once per epoch of its domain.
pub struct BatchStream<'a> {
    x: &'a Tensor,
    y: &'a Tensor,
    batch: usize,
    xo: Order,
    yo: Order,
}

impl<'a> BatchStream<'a> {
    /// # Panics
    /// If `batch` is zero or either domain is empty.
    pub fn new(x: &'a Tensor, y: &'a Tensor, batch: usize, seed: u64) -> Self {
        assert!(batch > 0, "batch size must be positive");
        assert!(!x.is_empty() && !y.is_empty(), "domains must be non-empty");
        BatchStream {
            x,
            y,
            batch,
            xo: Order::new(x.shape()[0], seed, 0),
            yo: Order::new(y.shape()[0], seed, 1),
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let x_idx: Vec<usize> = (0..self.batch).map(|_| self.xo.next()).collect();
        let y_idx: Vec<usize> = (0..self.batch).map(|_| self.yo.next()).collect();
        Some(Batch {
            x: self.x.select(&x_idx),
            y: self.y.select(&y_idx),
            x_idx,
            y_idx,
        })
    }
}

/// Runs `consume` over the first `count` batches of `stream` while a
/// producer thread prepares up to `depth` batches ahead. The handoff queue
/// preserves order, so the consumer sees exactly the sequential stream.
pub fn with_prefetch<R>(
    stream: BatchStream<'_>,
    count: usize,
    depth: usize,
    consume: impl FnOnce(&mut dyn Iterator<Item = Batch>) -> R,
) -> R {
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel(depth.max(1));
        s.spawn(move || {
            for b in stream.take(count) {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        // Dropping the receiver on early exit unblocks the producer.
        let mut it = rx.into_iter();
        consume(&mut it)
    })
}
