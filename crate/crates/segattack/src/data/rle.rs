//! Kaggle-style run-length mask codec: 1-indexed starts over the
//! row-major flattened image, space-delimited `start length` pairs.

use super::DataError;
use crate::tensor::Tensor;

/// Decode a run list into a binary `[H, W]` mask.
pub fn rle_decode(rle: &str, height: usize, width: usize) -> Result<Tensor, DataError> {
    let tokens: Vec<&str> = rle.split_whitespace().collect();
    if !tokens.len().is_multiple_of(2) {
        return Err(DataError::Rle(format!(
            "odd token count {} (runs are start/length pairs)",
            tokens.len()
        )));
    }
    let area = height * width;
    let mut data = vec![0.0; area];
    let mut prev_end = 0usize; // 1-indexed end of the previous run
    for (pair, chunk) in tokens.chunks_exact(2).enumerate() {
        let parse = |s: &str, what: &str| -> Result<usize, DataError> {
            s.parse::<usize>().map_err(|_| {
                DataError::Rle(format!("pair {pair}: {what} {s:?} is not a number"))
            })
        };
        let start = parse(chunk[0], "start")?;
        let len = parse(chunk[1], "length")?;
        if start == 0 {
            return Err(DataError::Rle(format!("pair {pair}: starts are 1-indexed, got 0")));
        }
        if len == 0 {
            return Err(DataError::Rle(format!("pair {pair}: zero-length run")));
        }
        if start <= prev_end {
            return Err(DataError::Rle(format!(
                "pair {pair}: run starting at {start} overlaps or precedes the previous run (ends at {prev_end})"
            )));
        }
        let end = start + len - 1;
        if end > area {
            return Err(DataError::Rle(format!(
                "pair {pair}: run {start}+{len} exceeds the {height}x{width} image ({area} pixels)"
            )));
        }
        data[start - 1..end].fill(1.0);
        prev_end = end;
    }
    Ok(Tensor::new(vec![height, width], data)?)
}

/// Encode a binary `[H, W]` mask as its canonical (maximal-run, ascending)
/// run list. An empty mask encodes as the empty string.
pub fn rle_encode(mask: &Tensor) -> Result<String, DataError> {
    if mask.shape().len() != 2 {
        return Err(DataError::Rle(format!(
            "expected a [H, W] mask, got shape {:?}",
            mask.shape()
        )));
    }
    if !mask.is_binary() {
        return Err(DataError::Rle("mask is not strictly binary".into()));
    }
    let mut runs: Vec<String> = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        match (v == 1.0, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                runs.push(format!("{} {}", start + 1, i - start));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(start) = run_start {
        runs.push(format!("{} {}", start + 1, mask.numel() - start));
    }
    Ok(runs.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_full_masks() {
        let empty = rle_decode("", 3, 3).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
        assert_eq!(rle_encode(&empty).unwrap(), "");

        let full = rle_decode("1 4", 2, 2).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
        assert_eq!(rle_encode(&full).unwrap(), "1 4");
    }

    #[test]
    fn first_row_run() {
        // Brute-force flatten: "1 3" covers flat indices 0..3, i.e. row 0 of a 3x3.
        let m = rle_decode("1 3", 3, 3).unwrap();
        let mut expected = [0.0; 9];
        expected[..3].fill(1.0);
        assert_eq!(m.data(), &expected[..]);
    }

    #[test]
    fn malformed_inputs_are_rejected_with_position() {
        assert!(rle_decode("1 2 3", 3, 3).is_err()); // odd tokens
        assert!(rle_decode("1 x", 3, 3).is_err()); // non-numeric
        assert!(rle_decode("0 2", 3, 3).is_err()); // 0 start
        assert!(rle_decode("1 0", 3, 3).is_err()); // zero length
        assert!(rle_decode("8 3", 3, 3).is_err()); // out of range
        let overlap = rle_decode("1 4 3 2", 3, 3).unwrap_err().to_string();
        assert!(overlap.contains("pair 1"), "{overlap}");
        let backwards = rle_decode("5 2 1 1", 3, 3).unwrap_err().to_string();
        assert!(backwards.contains("pair 1"), "{backwards}");
    }

    #[test]
    fn round_trip_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..1000 {
            let h = rng.random_range(1..=16);
            let w = rng.random_range(1..=16);
            let data: Vec<f64> =
                (0..h * w).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let mask = Tensor::new(vec![h, w], data).unwrap();
            let rle = rle_encode(&mask).unwrap();
            let back = rle_decode(&rle, h, w).unwrap();
            assert_eq!(back.data(), mask.data());
        }
    }

    #[test]
    fn encoding_is_canonical() {
        // Maximal runs: no zero gaps between consecutive runs, ascending starts.
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..200 {
            let n = rng.random_range(1..64);
            let data: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let mask = Tensor::new(vec![1, n], data).unwrap();
            let rle = rle_encode(&mask).unwrap();
            let nums: Vec<usize> = rle.split_whitespace().map(|t| t.parse().unwrap()).collect();
            let mut prev_end = 0usize;
            for pair in nums.chunks_exact(2) {
                let (start, len) = (pair[0], pair[1]);
                assert!(len >= 1);
                // A run starting right at prev_end + 1 would have been merged.
                assert!(start > prev_end + 1 || prev_end == 0);
                prev_end = start + len - 1;
            }
        }
    }

    #[test]
    fn rejects_non_binary() {
        let soft = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(rle_encode(&soft).is_err());
    }
}
