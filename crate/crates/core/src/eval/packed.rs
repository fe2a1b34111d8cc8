use crate::codes::CodeMatrix;

/// Rows packed 64 codes per word, for Hamming distances.
pub(crate) struct PackedRows {
    words: usize,
    data: Vec<u64>,
}

impl PackedRows {
    pub fn new(m: &CodeMatrix) -> Self {
        Self::with_columns(m, &(0..m.n_codes()).collect::<Vec<_>>())
    }

    /// Pack only `columns`, in that order.
    pub fn with_columns(m: &CodeMatrix, columns: &[usize]) -> Self {
        let words = columns.len().div_ceil(64).max(1);
        let mut data = vec![0u64; words * m.n_records()];
        for (r, row) in m.rows().enumerate() {
            let dst = &mut data[r * words..(r + 1) * words];
            for (j, &c) in columns.iter().enumerate() {
                if row[c] == 1 {
                    dst[j / 64] |= 1 << (j % 64);
                }
            }
        }
        Self { words, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words..(r + 1) * self.words]
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.words
    }

    /// Hamming distance, equal to the squared L2 distance of the 0/1 rows.
    #[inline]
    pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
        a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
    }
}
