use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edit counts of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub hits: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl Alignment {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn reference_len(&self) -> usize {
        self.hits + self.substitutions + self.deletions
    }
}

/// Levenshtein alignment of `hypothesis` against `reference`. Among
/// minimum-edit alignments the one with the most hits is reported.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    // (edits, -hits) is minimized lexicographically.
    let mut prev: Vec<(usize, usize, Alignment)> = (0..=m)
        .map(|j| (j, 0, Alignment { insertions: j, ..Default::default() }))
        .collect();
    for i in 1..=n {
        let mut cur = Vec::with_capacity(m + 1);
        cur.push((i, 0, Alignment { deletions: i, ..Default::default() }));
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let (de, dh, da) = prev[j - 1];
            let diag = if same {
                (de, dh + 1, Alignment { hits: da.hits + 1, ..da })
            } else {
                (de + 1, dh, Alignment { substitutions: da.substitutions + 1, ..da })
            };
            let (ue, uh, ua) = prev[j];
            let del = (ue + 1, uh, Alignment { deletions: ua.deletions + 1, ..ua });
            let (le, lh, la) = cur[j - 1];
            let ins = (le + 1, lh, Alignment { insertions: la.insertions + 1, ..la });
            let best = [diag, del, ins]
                .into_iter()
                .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .expect("three candidates");
            cur.push(best);
        }
        prev = cur;
    }
    prev[m].2
}

/// (substitutions + insertions + deletions) / reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("word error rate needs a non-empty reference".into()));
    }
    Ok(align(reference, hypothesis).edits() as f64 / reference.len() as f64)
}
