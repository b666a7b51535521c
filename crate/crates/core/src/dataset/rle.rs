//! COCO run-length mask codec.
//!
//! Runs are taken in column-major order and alternate background/foreground,
//! starting with background. The compressed text form is the usual COCO
//! variant: every count (delta-coded against the count two places back once
//! past index 2) is emitted as 5-bit groups, least significant first, with
//! `0x20` as the continuation flag and an offset of 48.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let expected = self.height as u64 * self.width as u64;
        if total != expected {
            return Err(Error::Integrity(format!(
                "RLE counts sum to {total}, expected {expected} for {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Number of foreground pixels (sum of odd-indexed runs).
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn decode_rle(r: &RleMask) -> Result<Mask> {
    r.validate()?;
    let (w, h) = (r.width, r.height);
    let mut data = vec![false; w as usize * h as usize];
    let mut pos: u64 = 0;
    for (i, &run) in r.counts.iter().enumerate() {
        if i % 2 == 1 {
            for k in pos..pos + run {
                // column-major index k -> (x, y)
                let x = (k / h as u64) as usize;
                let y = (k % h as u64) as usize;
                data[y * w as usize + x] = true;
            }
        }
        pos += run;
    }
    Ok(Mask::from_vec(w, h, data).expect("dims checked"))
}

pub fn encode_rle(mask: &Mask) -> RleMask {
    let (w, h) = mask.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run: u64 = 0;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        height: h,
        width: w,
        counts,
    }
}

pub fn counts_to_string(counts: &[u64]) -> String {
    let mut s = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut ch = (x & 0x1f) as u8;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            s.push((ch + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

pub fn counts_from_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let b = *bytes
                .get(p)
                .ok_or_else(|| Error::Integrity("truncated RLE counts string".into()))?;
            if !(48..48 + 64).contains(&b) {
                return Err(Error::Integrity(format!(
                    "invalid RLE character {:?} at {p}",
                    b as char
                )));
            }
            if k >= 12 {
                return Err(Error::Integrity("RLE count overflows".into()));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2] as i64;
        }
        if x < 0 {
            return Err(Error::Integrity("negative RLE run".into()));
        }
        counts.push(x as u64);
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent column-major run-length computation.
    fn brute_counts(mask: &Mask) -> Vec<u64> {
        let (w, h) = mask.dims();
        let flat: Vec<bool> = (0..w)
            .flat_map(|x| (0..h).map(move |y| (x, y)))
            .map(|(x, y)| mask.get(x, y))
            .collect();
        let mut counts = vec![];
        let mut expect = false;
        let mut i = 0;
        while i < flat.len() {
            let mut n = 0;
            while i < flat.len() && flat[i] == expect {
                n += 1;
                i += 1;
            }
            counts.push(n);
            expect = !expect;
        }
        if counts.is_empty() {
            counts.push(0);
        }
        counts
    }

    #[test]
    fn all_background() {
        let m = Mask::new(3, 3);
        assert_eq!(encode_rle(&m).counts, vec![9]);
    }

    #[test]
    fn single_corner_pixel() {
        let mut m = Mask::new(3, 3);
        m.set(0, 0, true);
        assert_eq!(brute_counts(&m), vec![0, 1, 8]);
        assert_eq!(encode_rle(&m).counts, vec![0, 1, 8]);
    }

    #[test]
    fn column_major_order() {
        // pixel at row 0, col 1 is the 4th pixel in column-major order of a 3x3
        let mut m = Mask::new(3, 3);
        m.set(1, 0, true);
        assert_eq!(encode_rle(&m).counts, vec![3, 1, 5]);
    }

    #[test]
    fn bad_sum_is_integrity_error() {
        let r = RleMask {
            height: 3,
            width: 3,
            counts: vec![4, 4],
        };
        assert!(matches!(decode_rle(&r), Err(Error::Integrity(_))));
    }

    #[test]
    fn known_string_encoding() {
        // pycocotools: counts [0, 1, 8] -> "01X0"? computed by hand:
        // 0 -> '0'; 1 -> '1'; 8 -> 8+48 = '8'
        assert_eq!(counts_to_string(&[0, 1, 8]), "018");
        // delta coding kicks in at index 3: 10 - 1 = 9 -> '9'
        assert_eq!(counts_to_string(&[0, 1, 8, 10]), "0189");
        // 40 = 0b01000 + (1 << 5): low group 8 with continuation -> 'X', then 1 -> '1'
        assert_eq!(counts_to_string(&[40]), "X1");
        assert_eq!(counts_from_string("X1").unwrap(), vec![40]);
    }

    fn mask_strategy() -> impl Strategy<Value = Mask> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |d| Mask::from_vec(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rle_round_trip(m in mask_strategy()) {
            let r = encode_rle(&m);
            prop_assert_eq!(&r.counts, &brute_counts(&m));
            prop_assert_eq!(r.area(), m.area());
            prop_assert_eq!(decode_rle(&r).unwrap(), m);
            let s = counts_to_string(&r.counts);
            prop_assert_eq!(counts_from_string(&s).unwrap(), r.counts);
        }
    }
}
