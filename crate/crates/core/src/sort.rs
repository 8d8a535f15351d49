//! LSD radix sort of `(key, payload)` pairs by an `f64` key.

#[inline]
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b ^ (1 << 63)
    }
}

#[inline]
fn from_ordered_bits(b: u64) -> f64 {
    if b >> 63 == 1 {
        f64::from_bits(b ^ (1 << 63))
    } else {
        f64::from_bits(!b)
    }
}

const DIGIT: u32 = 11;
const BUCKETS: usize = 1 << DIGIT;

/// Sorts `items` ascending by the first component. Keys must not be NaN.
pub fn sort_by_key<T: Copy>(items: &mut [(f64, T)]) {
    let n = items.len();
    if n < 256 {
        items.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        return;
    }
    let mut keyed: Vec<(u64, T)> = items.iter().map(|&(k, t)| (ordered_bits(k), t)).collect();
    let mut scratch = keyed.clone();
    let mut counts = vec![0usize; BUCKETS];
    let mut shift = 0;
    while shift < 64 {
        counts.iter_mut().for_each(|c| *c = 0);
        for (k, _) in &keyed {
            counts[((k >> shift) as usize) & (BUCKETS - 1)] += 1;
        }
        if counts.contains(&n) {
            shift += DIGIT;
            continue;
        }
        let mut offset = 0;
        for c in counts.iter_mut() {
            let here = *c;
            *c = offset;
            offset += here;
        }
        for item in &keyed {
            let d = ((item.0 >> shift) as usize) & (BUCKETS - 1);
            scratch[counts[d]] = *item;
            counts[d] += 1;
        }
        std::mem::swap(&mut keyed, &mut scratch);
        shift += DIGIT;
    }
    for (dst, (k, t)) in items.iter_mut().zip(keyed) {
        *dst = (from_ordered_bits(k), t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_comparison_sort(keys in proptest::collection::vec(-1e6..1e6f64, 0..3000)) {
            let mut items: Vec<(f64, usize)> = keys.iter().copied().zip(0..).collect();
            let mut expected = items.clone();
            expected.sort_by(|a, b| a.0.total_cmp(&b.0));
            sort_by_key(&mut items);
            let got: Vec<f64> = items.iter().map(|x| x.0).collect();
            let want: Vec<f64> = expected.iter().map(|x| x.0).collect();
            prop_assert_eq!(got, want);
            for (k, i) in &items {
                prop_assert_eq!(*k, keys[*i]);
            }
        }
    }
}
