//! Class partition for the two-level hierarchical softmax.

use rand::seq::SliceRandom;

use crate::corpus;
use crate::error::{Error, Result};
use crate::rng;

/// Word→class partition. Every word id belongs to exactly one class, and
/// `members[class_of[w]][pos_in_class[w]] == w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassAssignment {
    pub class_of: Vec<usize>,
    pub pos_in_class: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClassAssignment {
    /// Rebuilds the derived tables from a bare word→class map.
    pub fn from_class_of(class_of: Vec<usize>, n_classes: usize) -> Result<ClassAssignment> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        let mut pos_in_class = vec![0; class_of.len()];
        for (w, &c) in class_of.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::DataCorruption(format!(
                    "word {w} assigned to class {c} of {n_classes}"
                )));
            }
            pos_in_class[w] = members[c].len();
            members[c].push(w);
        }
        if let Some(empty) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::DataCorruption(format!("class {empty} is empty")));
        }
        Ok(ClassAssignment {
            class_of,
            pos_in_class,
            members,
        })
    }
}

/// Seeded random balanced partition of the vocabulary into `n_classes`
/// groups. Reserved tokens always land in class 0; the remaining words are
/// shuffled and dealt so group sizes differ by at most one, with class 0
/// taking a smaller share since it already holds the reserved ids.
pub fn assign_classes(vocab_size: usize, n_classes: usize, seed: u64) -> Result<ClassAssignment> {
    let reserved = corpus::RESERVED.len();
    if vocab_size < reserved {
        return Err(Error::Usage(format!(
            "vocabulary of {vocab_size} lacks the {reserved} reserved tokens"
        )));
    }
    let content = vocab_size - reserved;
    if n_classes == 0 {
        return Err(Error::Usage("n_classes must be at least 1".into()));
    }
    // Classes 1.. must each receive at least one word or their softmax layer
    // would leak probability mass.
    if n_classes > 1 && content < n_classes - 1 {
        return Err(Error::Usage(format!(
            "{n_classes} classes cannot be filled from {content} non-reserved words"
        )));
    }

    let mut ids: Vec<usize> = (reserved..vocab_size).collect();
    ids.shuffle(&mut rng::stream(seed, "classes"));

    // Larger chunks go to the highest class indices.
    let base = content / n_classes;
    let rem = content % n_classes;
    let mut class_of = vec![0usize; vocab_size];
    let mut cursor = 0;
    for c in 0..n_classes {
        let size = base + usize::from(c >= n_classes - rem);
        for &w in &ids[cursor..cursor + size] {
            class_of[w] = c;
        }
        cursor += size;
    }
    ClassAssignment::from_class_of(class_of, n_classes)
}

/// Composes class and per-class word distributions into a full-vocabulary
/// distribution: P(w) = P(class(w)) · P(w | class(w)).
pub fn compose_tree_distribution(
    class_probs: &[f64],
    word_probs: &[Vec<f64>],
    assignment: &ClassAssignment,
) -> Vec<f64> {
    let mut dist = vec![0.0; assignment.class_of.len()];
    for (w, p) in dist.iter_mut().enumerate() {
        let c = assignment.class_of[w];
        *p = class_probs[c] * word_probs[c][assignment.pos_in_class[w]];
    }
    dist
}
