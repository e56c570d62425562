use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha8 streams derived from one seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const MASK: u64 = 1;
    pub const LORA_INIT: u64 = 2;
    pub const DROPOUT: u64 = 3;
}

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Consecutive non-overlapping chunks of `len` tokens; a short tail is dropped.
pub fn chunk_stream(stream: &[u32], len: usize) -> Vec<Vec<u32>> {
    stream.chunks_exact(len.max(2)).map(<[u32]>::to_vec).collect()
}

/// Shuffled chunk indices grouped into batches; the last batch may be short.
pub fn epoch_batches(chunks: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..chunks).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batches_per_epoch(chunks: usize, batch: usize) -> usize {
    chunks.div_ceil(batch.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chunks_drop_tail() {
        let s: Vec<u32> = (0..10).collect();
        let c = chunk_stream(&s, 4);
        assert_eq!(c, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    }

    #[test]
    fn batches_cover_every_chunk_once() {
        let mut rng = rng_stream(1, streams::DATA);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.len(), batches_per_epoch(10, 4));
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = rng_stream(5, streams::DATA).gen();
        let b: u64 = rng_stream(5, streams::MASK).gen();
        assert_ne!(a, b);
        assert_eq!(a, rng_stream(5, streams::DATA).gen::<u64>());
    }
}
