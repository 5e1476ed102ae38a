//! Free products of finite groups.
//!
//! Elements are reduced words: finite sequences of letters with no identity
//! letters and no two neighbouring letters from the same factor. Factor
//! indices are 0-based in the Rust API and 1-based in every text format
//! (config files, CSV tokens, reports).

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupError {
    #[error("factor {factor}: a factor group needs at least 2 elements, got {order}")]
    TooSmall { factor: usize, order: usize },
    #[error("factor {factor}: multiplication table must be {order}x{order}, row {row} has {len} entries")]
    TableShape {
        factor: usize,
        order: usize,
        row: usize,
        len: usize,
    },
    #[error("factor {factor}: table entry ({row},{col}) = {value} is not an element index")]
    EntryOutOfRange {
        factor: usize,
        row: usize,
        col: usize,
        value: usize,
    },
    #[error("factor {factor}: element 0 is not a two-sided identity (fails at element {element})")]
    IdentityAxiom { factor: usize, element: usize },
    #[error("factor {factor}: associativity fails on ({a}*{b})*{c} != {a}*({b}*{c})")]
    Associativity {
        factor: usize,
        a: usize,
        b: usize,
        c: usize,
    },
    #[error("factor {factor}: element {element} has no inverse")]
    MissingInverse { factor: usize, element: usize },
    #[error("factor {factor}: expected {order} labels, got {got}")]
    LabelCount {
        factor: usize,
        order: usize,
        got: usize,
    },
    #[error("factor {factor}: duplicate element label {label:?}")]
    DuplicateLabel { factor: usize, label: String },
    #[error("factor {factor}: generator {generator} is the identity or out of range")]
    BadGenerator { factor: usize, generator: usize },
    #[error("factor {factor}: generators do not reach element {element}")]
    NotGenerating { factor: usize, element: usize },
    #[error("unknown factor preset {0:?} (expected \"cyclic:m\")")]
    UnknownPreset(String),
    #[error("a free product needs at least 2 factors, got {0}")]
    TooFewFactors(usize),
    #[error("malformed letter: factor {factor}, element {element}")]
    MalformedLetter { factor: usize, element: usize },
    #[error("word is not reduced at position {position}")]
    NotReduced { position: usize },
    #[error("cannot parse word token {0:?}")]
    BadToken(String),
    #[error("enumeration cap {cap} exceeded ({reached} words reached)")]
    CapExceeded { cap: usize, reached: usize },
}

/// A non-identity element of one factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Letter {
    pub factor: u8,
    pub element: u16,
}

impl Letter {
    pub fn new(factor: usize, element: usize) -> Self {
        Letter {
            factor: factor as u8,
            element: element as u16,
        }
    }

    pub fn factor(self) -> usize {
        self.factor as usize
    }

    pub fn element(self) -> usize {
        self.element as usize
    }
}

/// A reduced word. The empty word is the identity `e`.
///
/// The derived ordering is plain lexicographic on letters; it is only used
/// for deterministic map iteration. Use [`FreeProduct::canonical_cmp`] for
/// the length-lexicographic order of enumerations and exports.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Word {
    letters: Vec<Letter>,
}

impl Word {
    pub fn identity() -> Self {
        Word::default()
    }

    pub fn is_identity(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn syllables(&self) -> usize {
        self.letters.len()
    }

    pub fn first(&self) -> Option<Letter> {
        self.letters.first().copied()
    }

    pub fn last(&self) -> Option<Letter> {
        self.letters.last().copied()
    }

    pub(crate) fn from_reduced(letters: Vec<Letter>) -> Self {
        Word { letters }
    }
}

/// How the identity is treated by [`FreeProduct::in_cone_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConePolicy {
    /// `e` belongs to every cone.
    #[default]
    IdentityAdmitted,
    /// `e` belongs to no cone.
    Strict,
}

/// A finite group given by its multiplication table.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGroup {
    index: usize,
    order: usize,
    labels: Vec<String>,
    table: Vec<u16>,
    inverse: Vec<u16>,
    generators: Vec<u16>,
    dist: Vec<u32>,
    symmetrized: bool,
}

impl FactorGroup {
    /// Builds and validates a factor from an explicit table.
    ///
    /// `table[a][b]` is the index of `a*b`; index 0 must be the identity.
    /// A generating set that is not closed under inverses is symmetrized and
    /// the fact is recorded (see [`FactorGroup::was_symmetrized`]).
    pub fn from_table(
        index: usize,
        labels: Vec<String>,
        table: &[Vec<usize>],
        generators: &[usize],
    ) -> Result<Self, GroupError> {
        let order = table.len();
        let factor = index + 1;
        if order < 2 {
            return Err(GroupError::TooSmall { factor, order });
        }
        if labels.len() != order {
            return Err(GroupError::LabelCount {
                factor,
                order,
                got: labels.len(),
            });
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].contains(label) {
                return Err(GroupError::DuplicateLabel {
                    factor,
                    label: label.clone(),
                });
            }
        }
        let mut flat = Vec::with_capacity(order * order);
        for (row, entries) in table.iter().enumerate() {
            if entries.len() != order {
                return Err(GroupError::TableShape {
                    factor,
                    order,
                    row,
                    len: entries.len(),
                });
            }
            for (col, &value) in entries.iter().enumerate() {
                if value >= order {
                    return Err(GroupError::EntryOutOfRange {
                        factor,
                        row,
                        col,
                        value,
                    });
                }
                flat.push(value as u16);
            }
        }
        let mul = |a: usize, b: usize| flat[a * order + b] as usize;
        for g in 0..order {
            if mul(0, g) != g || mul(g, 0) != g {
                return Err(GroupError::IdentityAxiom { factor, element: g });
            }
        }
        for a in 0..order {
            for b in 0..order {
                let ab = mul(a, b);
                for c in 0..order {
                    if mul(ab, c) != mul(a, mul(b, c)) {
                        return Err(GroupError::Associativity { factor, a, b, c });
                    }
                }
            }
        }
        let mut inverse = Vec::with_capacity(order);
        for g in 0..order {
            match (0..order).find(|&h| mul(g, h) == 0 && mul(h, g) == 0) {
                Some(h) => inverse.push(h as u16),
                None => return Err(GroupError::MissingInverse { factor, element: g }),
            }
        }

        let mut gens: Vec<u16> = Vec::new();
        for &g in generators {
            if g == 0 || g >= order {
                return Err(GroupError::BadGenerator {
                    factor,
                    generator: g,
                });
            }
            if !gens.contains(&(g as u16)) {
                gens.push(g as u16);
            }
        }
        let mut symmetrized = false;
        for i in 0..gens.len() {
            let inv = inverse[gens[i] as usize];
            if !gens.contains(&inv) {
                gens.push(inv);
                symmetrized = true;
            }
        }
        gens.sort_unstable();

        // BFS in Cay(G_k, S_k); S_k is symmetric so left/right makes no difference.
        let mut dist = vec![u32::MAX; order];
        dist[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(g) = queue.pop_front() {
            for &s in &gens {
                let h = mul(g, s as usize);
                if dist[h] == u32::MAX {
                    dist[h] = dist[g] + 1;
                    queue.push_back(h);
                }
            }
        }
        if let Some(element) = dist.iter().position(|&d| d == u32::MAX) {
            return Err(GroupError::NotGenerating { factor, element });
        }

        Ok(FactorGroup {
            index,
            order,
            labels,
            table: flat,
            inverse,
            generators: gens,
            dist,
            symmetrized,
        })
    }

    /// `Z/mZ` with generators `{1, m-1}`.
    pub fn cyclic(index: usize, m: usize) -> Result<Self, GroupError> {
        if m < 2 {
            return Err(GroupError::TooSmall {
                factor: index + 1,
                order: m,
            });
        }
        let table: Vec<Vec<usize>> = (0..m)
            .map(|a| (0..m).map(|b| (a + b) % m).collect())
            .collect();
        let labels = (0..m)
            .map(|g| if g == 0 { "e".to_string() } else { g.to_string() })
            .collect();
        Self::from_table(index, labels, &table, &[1, m - 1])
    }

    /// Parses a preset string such as `cyclic:3`.
    pub fn preset(index: usize, spec: &str) -> Result<Self, GroupError> {
        let bad = || GroupError::UnknownPreset(spec.to_string());
        let (kind, arg) = spec.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "cyclic" => {
                let m: usize = arg.trim().parse().map_err(|_| bad())?;
                Self::cyclic(index, m)
            }
            _ => Err(bad()),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn generators(&self) -> Vec<usize> {
        self.generators.iter().map(|&g| g as usize).collect()
    }

    pub fn was_symmetrized(&self) -> bool {
        self.symmetrized
    }

    #[inline]
    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.table[a * self.order + b] as usize
    }

    #[inline]
    pub fn inv(&self, a: usize) -> usize {
        self.inverse[a] as usize
    }

    /// Distance from the identity in `Cay(G_k, S_k)`.
    #[inline]
    pub fn dist_from_identity(&self, g: usize) -> u32 {
        self.dist[g]
    }

    pub fn diameter(&self) -> u32 {
        self.dist.iter().copied().max().unwrap_or(0)
    }

    /// Rows of the multiplication table, for serialization.
    pub fn table_rows(&self) -> Vec<Vec<usize>> {
        self.table
            .chunks(self.order)
            .map(|row| row.iter().map(|&v| v as usize).collect())
            .collect()
    }
}

/// `G_1 * ... * G_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeProduct {
    factors: Vec<FactorGroup>,
    max_letter_length: u32,
}

impl FreeProduct {
    pub fn new(factors: Vec<FactorGroup>) -> Result<Self, GroupError> {
        if factors.len() < 2 {
            return Err(GroupError::TooFewFactors(factors.len()));
        }
        let factors: Vec<FactorGroup> = factors
            .into_iter()
            .enumerate()
            .map(|(k, mut f)| {
                f.index = k;
                f
            })
            .collect();
        let max_letter_length = factors.iter().map(|f| f.diameter()).max().unwrap_or(0);
        Ok(FreeProduct {
            factors,
            max_letter_length,
        })
    }

    /// Free product of cyclic groups with the given orders.
    pub fn cyclic(orders: &[usize]) -> Result<Self, GroupError> {
        let factors = orders
            .iter()
            .enumerate()
            .map(|(k, &m)| FactorGroup::cyclic(k, m))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(factors)
    }

    pub fn rank(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[FactorGroup] {
        &self.factors
    }

    pub fn factor(&self, k: usize) -> &FactorGroup {
        &self.factors[k]
    }

    /// Largest word length of a single letter.
    pub fn max_letter_length(&self) -> u32 {
        self.max_letter_length
    }

    pub fn letter(&self, factor: usize, element: usize) -> Result<Letter, GroupError> {
        if factor >= self.rank() || element == 0 || element >= self.factors[factor].order {
            return Err(GroupError::MalformedLetter { factor, element });
        }
        Ok(Letter::new(factor, element))
    }

    /// Builds a word from `(factor, element)` pairs, which must already be reduced.
    pub fn word(&self, pairs: &[(usize, usize)]) -> Result<Word, GroupError> {
        let letters = pairs
            .iter()
            .map(|&(k, g)| self.letter(k, g))
            .collect::<Result<Vec<_>, _>>()?;
        let word = Word { letters };
        self.check_word(&word)?;
        Ok(word)
    }

    /// Reduces an arbitrary letter sequence (identity letters allowed as element 0).
    pub fn reduce(&self, pairs: &[(usize, usize)]) -> Result<Word, GroupError> {
        let mut word = Word::identity();
        for &(k, g) in pairs {
            if k >= self.rank() || g >= self.factors[k].order {
                return Err(GroupError::MalformedLetter {
                    factor: k,
                    element: g,
                });
            }
            if g != 0 {
                self.push_letter(&mut word, Letter::new(k, g));
            }
        }
        Ok(word)
    }

    pub fn check_letter(&self, l: Letter) -> Result<(), GroupError> {
        self.letter(l.factor(), l.element()).map(|_| ())
    }

    pub fn check_word(&self, x: &Word) -> Result<(), GroupError> {
        for (i, &l) in x.letters.iter().enumerate() {
            self.check_letter(l)?;
            if i > 0 && x.letters[i - 1].factor == l.factor {
                return Err(GroupError::NotReduced { position: i });
            }
        }
        Ok(())
    }

    /// Right-multiplies `word` by one letter in place and returns the change in word length.
    ///
    /// Only the suffix is touched, so this is O(1).
    #[inline]
    pub fn push_letter(&self, word: &mut Word, l: Letter) -> i64 {
        let f = &self.factors[l.factor()];
        match word.letters.last_mut() {
            Some(top) if top.factor == l.factor => {
                let old = f.dist[top.element()] as i64;
                let g = f.mul(top.element(), l.element());
                if g == 0 {
                    word.letters.pop();
                    -old
                } else {
                    top.element = g as u16;
                    f.dist[g] as i64 - old
                }
            }
            _ => {
                word.letters.push(l);
                f.dist[l.element()] as i64
            }
        }
    }

    /// The reduced word for `xy`.
    pub fn multiply(&self, x: &Word, y: &Word) -> Result<Word, GroupError> {
        self.check_word(x)?;
        self.check_word(y)?;
        Ok(self.multiply_unchecked(x, y))
    }

    pub(crate) fn multiply_unchecked(&self, x: &Word, y: &Word) -> Word {
        let mut out = x.clone();
        for &l in &y.letters {
            self.push_letter(&mut out, l);
        }
        out
    }

    pub fn inverse(&self, x: &Word) -> Result<Word, GroupError> {
        self.check_word(x)?;
        Ok(self.inverse_unchecked(x))
    }

    pub(crate) fn inverse_unchecked(&self, x: &Word) -> Word {
        let letters = x
            .letters
            .iter()
            .rev()
            .map(|l| Letter::new(l.factor(), self.factors[l.factor()].inv(l.element())))
            .collect();
        Word { letters }
    }

    /// Geodesics in a free product split per syllable, so `|x|` is the sum of
    /// the within-factor distances of its letters.
    pub fn word_length(&self, x: &Word) -> u32 {
        x.letters
            .iter()
            .map(|l| self.factors[l.factor()].dist[l.element()])
            .sum()
    }

    pub fn distance(&self, x: &Word, y: &Word) -> Result<u32, GroupError> {
        self.check_word(x)?;
        self.check_word(y)?;
        let xinv = self.inverse_unchecked(x);
        Ok(self.word_length(&self.multiply_unchecked(&xinv, y)))
    }

    /// Factor of the last letter; `None` for `e`.
    pub fn suffix_type(&self, x: &Word) -> Option<usize> {
        x.last().map(Letter::factor)
    }

    /// Membership in the cone `C(i)`, with `e` admitted.
    pub fn in_cone(&self, y: &Word, i: usize) -> bool {
        self.in_cone_with(y, i, ConePolicy::IdentityAdmitted)
    }

    pub fn in_cone_with(&self, y: &Word, i: usize, policy: ConePolicy) -> bool {
        match y.first() {
            Some(l) => l.factor() != i,
            None => policy == ConePolicy::IdentityAdmitted,
        }
    }

    /// Length-lexicographic order: word length, then letters.
    pub fn canonical_cmp(&self, a: &Word, b: &Word) -> Ordering {
        self.word_length(a)
            .cmp(&self.word_length(b))
            .then_with(|| a.letters.cmp(&b.letters))
    }

    /// All words with `|x| < n`, each once, in canonical order.
    pub fn ball_enumerate(&self, n: u32, cap: usize) -> Result<Vec<Word>, GroupError> {
        let mut out = Vec::new();
        if n == 0 {
            return Ok(out);
        }
        let mut stack = vec![(Word::identity(), 0u32)];
        while let Some((w, len)) = stack.pop() {
            if out.len() >= cap {
                return Err(GroupError::CapExceeded {
                    cap,
                    reached: out.len() + stack.len() + 1,
                });
            }
            let last = w.last().map(Letter::factor);
            for (k, f) in self.factors.iter().enumerate() {
                if Some(k) == last {
                    continue;
                }
                for g in 1..f.order {
                    let l = len + f.dist[g];
                    if l < n {
                        let mut next = w.clone();
                        next.letters.push(Letter::new(k, g));
                        stack.push((next, l));
                    }
                }
            }
            out.push(w);
        }
        out.sort_by(|a, b| self.canonical_cmp(a, b));
        Ok(out)
    }

    /// Dash-separated `factor:element` tokens with 1-based factors; `e` for the identity.
    pub fn to_tokens(&self, x: &Word) -> String {
        if x.is_identity() {
            return "e".to_string();
        }
        x.letters
            .iter()
            .map(|l| format!("{}:{}", l.factor() + 1, l.element()))
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn parse_tokens(&self, s: &str) -> Result<Word, GroupError> {
        let s = s.trim();
        if s == "e" || s.is_empty() {
            return Ok(Word::identity());
        }
        let mut pairs = Vec::new();
        for tok in s.split('-') {
            let bad = || GroupError::BadToken(tok.to_string());
            let (k, g) = tok.split_once(':').ok_or_else(bad)?;
            let k: usize = k.parse().map_err(|_| bad())?;
            let g: usize = g.parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(bad());
            }
            pairs.push((k - 1, g));
        }
        self.word(&pairs)
    }

    /// Human-readable form using element labels, e.g. `a·b²`-style labels joined by `.`.
    pub fn display(&self, x: &Word) -> String {
        if x.is_identity() {
            return "e".to_string();
        }
        x.letters
            .iter()
            .map(|l| self.factors[l.factor()].labels[l.element()].as_str())
            .collect::<Vec<_>>()
            .join(".")
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.factor + 1, self.element)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // G1 = Z/2 = {e, a}, G2 = Z/3 = {e, b, b²}
    fn z2_z3() -> FreeProduct {
        FreeProduct::cyclic(&[2, 3]).unwrap()
    }

    #[test]
    fn worked_reduction_example() {
        let g = z2_z3();
        let x = g.word(&[(0, 1), (1, 2), (0, 1), (1, 1)]).unwrap(); // a b² a b
        let y = g.word(&[(1, 2), (0, 1)]).unwrap(); // b² a
        let xy = g.multiply(&x, &y).unwrap();
        assert_eq!(xy, g.word(&[(0, 1), (1, 2)]).unwrap());
        assert_eq!(g.suffix_type(&xy), Some(1));
    }

    #[test]
    fn identity_and_cancellation() {
        let g = z2_z3();
        let ab = g.word(&[(0, 1), (1, 1)]).unwrap();
        assert_eq!(g.multiply(&ab, &Word::identity()).unwrap(), ab);
        let b2a = g.word(&[(1, 2), (0, 1)]).unwrap();
        assert!(g.multiply(&ab, &b2a).unwrap().is_identity());
        assert_eq!(g.inverse(&ab).unwrap(), b2a);
        assert!(g.inverse(&Word::identity()).unwrap().is_identity());
    }

    #[test]
    fn lengths_and_distances() {
        let g = z2_z3();
        let ab2 = g.word(&[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.word_length(&Word::identity()), 0);
        assert_eq!(g.word_length(&ab2), 2);
        assert_eq!(g.distance(&Word::identity(), &ab2).unwrap(), 2);
        assert_eq!(g.distance(&ab2, &ab2).unwrap(), 0);
        let ab = g.word(&[(0, 1), (1, 1)]).unwrap();
        assert_eq!(g.distance(&ab, &ab2).unwrap(), 1);

        let h = FreeProduct::cyclic(&[2, 4]).unwrap();
        let b2 = h.word(&[(1, 2)]).unwrap();
        assert_eq!(h.word_length(&b2), 2);
        assert_eq!(h.max_letter_length(), 2);
    }

    #[test]
    fn suffix_types_and_cones() {
        let g = z2_z3();
        let a = g.word(&[(0, 1)]).unwrap();
        let ba = g.word(&[(1, 1), (0, 1)]).unwrap();
        let ab = g.word(&[(0, 1), (1, 1)]).unwrap();
        assert_eq!(g.suffix_type(&a), Some(0));
        assert_eq!(g.suffix_type(&Word::identity()), None);
        assert!(g.in_cone(&ba, 0));
        assert!(!g.in_cone(&ab, 0));
        for i in 0..2 {
            assert!(g.in_cone(&Word::identity(), i));
            assert!(!g.in_cone_with(&Word::identity(), i, ConePolicy::Strict));
        }
    }

    #[test]
    fn small_balls() {
        let g = z2_z3();
        assert!(g.ball_enumerate(0, 10).unwrap().is_empty());
        assert_eq!(g.ball_enumerate(1, 10).unwrap(), vec![Word::identity()]);
        let b2 = g.ball_enumerate(2, 10).unwrap();
        let expected = vec![
            Word::identity(),
            g.word(&[(0, 1)]).unwrap(),
            g.word(&[(1, 1)]).unwrap(),
            g.word(&[(1, 2)]).unwrap(),
        ];
        assert_eq!(b2, expected);
        assert!(matches!(
            g.ball_enumerate(6, 5),
            Err(GroupError::CapExceeded { cap: 5, .. })
        ));
    }

    #[test]
    fn malformed_input_is_rejected() {
        let g = z2_z3();
        assert!(matches!(
            g.word(&[(0, 2)]),
            Err(GroupError::MalformedLetter { .. })
        ));
        assert!(matches!(
            g.word(&[(5, 1)]),
            Err(GroupError::MalformedLetter { .. })
        ));
        assert!(matches!(
            g.word(&[(1, 1), (1, 1)]),
            Err(GroupError::NotReduced { position: 1 })
        ));
        let bogus = Word::from_reduced(vec![Letter::new(0, 1), Letter::new(0, 1)]);
        assert!(g.multiply(&bogus, &Word::identity()).is_err());
    }

    #[test]
    fn table_validation_reports_witnesses() {
        // not associative: a*a = b, a*b = e, b*a = b-ish junk
        let labels = vec!["e".into(), "a".into(), "b".into()];
        let table = vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 2, 1]];
        let err = FactorGroup::from_table(0, labels.clone(), &table, &[1]).unwrap_err();
        assert!(matches!(
            err,
            GroupError::Associativity { .. } | GroupError::MissingInverse { .. }
        ));

        let not_identity = vec![vec![1, 0], vec![0, 1]];
        let err = FactorGroup::from_table(0, vec!["e".into(), "a".into()], &not_identity, &[1])
            .unwrap_err();
        assert_eq!(err, GroupError::IdentityAxiom { factor: 1, element: 0 });

        let z4: Vec<Vec<usize>> = (0..4).map(|a| (0..4).map(|b| (a + b) % 4).collect()).collect();
        let four = (0..4).map(|g| g.to_string()).collect::<Vec<_>>();
        let err = FactorGroup::from_table(0, four.clone(), &z4, &[2]).unwrap_err();
        assert_eq!(err, GroupError::NotGenerating { factor: 1, element: 1 });

        let f = FactorGroup::from_table(0, four, &z4, &[1]).unwrap();
        assert!(f.was_symmetrized());
        assert_eq!(f.generators(), vec![1, 3]);
        assert_eq!(f.dist_from_identity(2), 2);
    }

    #[test]
    fn presets_and_tokens() {
        assert!(FactorGroup::preset(0, "cyclic:5").is_ok());
        assert!(matches!(
            FactorGroup::preset(0, "dihedral:4"),
            Err(GroupError::UnknownPreset(_))
        ));
        assert!(matches!(
            FreeProduct::cyclic(&[2]),
            Err(GroupError::TooFewFactors(1))
        ));
        let g = z2_z3();
        let w = g.word(&[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.to_tokens(&w), "1:1-2:2");
        assert_eq!(g.parse_tokens("1:1-2:2").unwrap(), w);
        assert_eq!(g.parse_tokens("e").unwrap(), Word::identity());
        assert!(g.parse_tokens("0:1").is_err());
    }
}
