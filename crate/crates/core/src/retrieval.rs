//! Bit-packed Hamming search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// ±1 codes packed into 64-bit words: bit `j % 64` of word `j / 64` is set
/// iff sign `j` is `+1`. Unused high bits of the last word are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl PackedCodes {
    pub fn pack(codes: &Matrix) -> Result<Self> {
        let (n, bits) = (codes.rows(), codes.cols());
        if bits == 0 {
            return Err(Error::invalid("bits", "codes must have at least one bit"));
        }
        let wpc = bits.div_ceil(64);
        let mut words = vec![0u64; n * wpc];
        for i in 0..n {
            for (j, &x) in codes.row(i).iter().enumerate() {
                if x == 1.0 {
                    words[i * wpc + j / 64] |= 1u64 << (j % 64);
                } else if x != -1.0 {
                    return Err(Error::InvalidCode {
                        row: i,
                        col: j,
                        value: x,
                    });
                }
            }
        }
        Ok(PackedCodes {
            n,
            bits,
            words_per_code: wpc,
            words,
        })
    }

    pub fn unpack(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.n * self.bits);
        for i in 0..self.n {
            let code = self.code(i);
            for j in 0..self.bits {
                data.push(if code[j / 64] >> (j % 64) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                });
            }
        }
        Matrix::new(self.n, self.bits, data).expect("finite by construction")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }
}

/// Number of differing positions between two packed codes.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::shape("hamming", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Database indices ranked by ascending Hamming distance, ties by ascending
/// index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<u32>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn rank_one(query: usize, code: &[u64], database: &PackedCodes, k: usize) -> RankedList {
    // Counting sort by distance keeps equal distances in index order.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); database.bits + 1];
    for j in 0..database.n {
        let d: u32 = code
            .iter()
            .zip(database.code(j))
            .map(|(x, y)| (x ^ y).count_ones())
            .sum();
        buckets[d as usize].push(j);
    }
    let take = k.min(database.n);
    let mut indices = Vec::with_capacity(take);
    let mut distances = Vec::with_capacity(take);
    'outer: for (d, bucket) in buckets.iter().enumerate() {
        for &j in bucket {
            if indices.len() == take {
                break 'outer;
            }
            indices.push(j);
            distances.push(d as u32);
        }
    }
    RankedList {
        query,
        indices,
        distances,
    }
}

/// Exact top-`k` search for every query. `k > n` returns the full ranking.
pub fn search(queries: &PackedCodes, database: &PackedCodes, k: usize) -> Result<Vec<RankedList>> {
    if queries.bits != database.bits {
        return Err(Error::shape(
            "search",
            &[queries.n, queries.bits],
            &[database.n, database.bits],
        ));
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    Ok((0..queries.n)
        .into_par_iter()
        .map(|q| rank_one(q, queries.code(q), database, k))
        .collect())
}
