//! Synthetic stroke corpus generator.
//!
//! Words are assembled from a fixed library of 16 polyline glyph
//! templates; four glyphs have variants carrying a detached mark stroke
//! above the base shape, written after all base strokes the way delayed
//! diacritical marks are. Every coordinate is jittered per control point
//! so no two samples are identical, and all randomness is derived from
//! (seed, sample index) via splitmix64.

use crate::error::{Error, Result};
use crate::ink::InkSample;
use crate::util::SplitMix64;
use crate::vocab::Vocabulary;

/// Glyph advance in glyph-units (template box is 1×1).
const ADVANCE: f64 = 1.25;
/// Jitter amplitude per control point, in glyph-units.
const JITTER: f64 = 0.1;

type Polyline = &'static [(f64, f64)];

/// Base templates: (symbol, strokes). Unit box, y downward.
const BASE_GLYPHS: [(char, &[Polyline]); 16] = [
    ('a', &[&[(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)], &[(0.25, 0.6), (0.75, 0.6)]]),
    ('b', &[&[(0.0, 0.0), (0.0, 1.0)], &[(0.0, 0.45), (0.9, 0.5), (0.9, 1.0), (0.0, 1.0)]]),
    ('c', &[&[(1.0, 0.15), (0.3, 0.0), (0.0, 0.5), (0.3, 1.0), (1.0, 0.85)]]),
    ('d', &[&[(1.0, 0.0), (1.0, 1.0)], &[(1.0, 0.45), (0.1, 0.5), (0.1, 1.0), (1.0, 1.0)]]),
    ('e', &[&[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (1.0, 1.0)], &[(0.0, 0.5), (0.7, 0.5)]]),
    ('f', &[&[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)], &[(0.0, 0.5), (0.7, 0.5)]]),
    ('g', &[&[(1.0, 0.0), (0.0, 0.2), (0.0, 1.0), (1.0, 1.0), (1.0, 0.55), (0.55, 0.55)]]),
    ('h', &[&[(0.0, 0.0), (0.0, 1.0)], &[(1.0, 0.0), (1.0, 1.0)], &[(0.0, 0.5), (1.0, 0.5)]]),
    ('i', &[&[(0.5, 0.0), (0.5, 1.0)], &[(0.2, 1.0), (0.8, 1.0)]]),
    ('j', &[&[(0.8, 0.0), (0.8, 0.85), (0.4, 1.0), (0.0, 0.85)]]),
    ('k', &[&[(0.0, 0.0), (0.0, 1.0)], &[(1.0, 0.0), (0.0, 0.55), (1.0, 1.0)]]),
    ('l', &[&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]]),
    ('m', &[&[(0.0, 1.0), (0.0, 0.0), (0.5, 0.6), (1.0, 0.0), (1.0, 1.0)]]),
    ('n', &[&[(0.0, 1.0), (0.0, 0.0), (1.0, 1.0), (1.0, 0.0)]]),
    ('o', &[&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]]),
    ('p', &[&[(0.0, 1.0), (0.0, 0.0), (0.9, 0.1), (0.9, 0.5), (0.0, 0.55)]]),
];

/// Mark variants: labeled symbol -> base glyph carrying the mark.
const MARKED_GLYPHS: [(char, char); 4] = [('á', 'a'), ('é', 'e'), ('í', 'i'), ('ó', 'o')];

/// Detached mark stroke, placed above the base glyph.
const MARK_STROKE: [(f64, f64); 2] = [(0.3, -0.35), (0.7, -0.2)];

/// The 20 symbols the built-in template library can draw.
pub fn synthetic_alphabet() -> Vec<char> {
    let mut v: Vec<char> = BASE_GLYPHS.iter().map(|&(c, _)| c).collect();
    v.extend(MARKED_GLYPHS.iter().map(|&(c, _)| c));
    v
}

/// Default vocabulary over the built-in templates.
pub fn synthetic_vocabulary() -> Vocabulary {
    Vocabulary::new(synthetic_alphabet()).expect("alphabet has no duplicates")
}

fn base_strokes(c: char) -> Option<&'static [Polyline]> {
    BASE_GLYPHS.iter().find(|&&(s, _)| s == c).map(|&(_, st)| st)
}

/// Deterministic synthetic corpus. Each sample is a word of length
/// uniform in `word_len_range`; with probability `mark_prob` one glyph
/// is replaced by a marked variant whose mark stroke is appended after
/// all base strokes.
pub fn generate_corpus(
    seed: u64,
    n_samples: usize,
    alphabet: &Vocabulary,
    word_len_range: (usize, usize),
    mark_prob: f64,
) -> Result<Vec<InkSample>> {
    let (lo, hi) = word_len_range;
    if n_samples < 1 {
        return Err(Error::Usage("n_samples must be >= 1".into()));
    }
    if lo < 1 || lo > hi {
        return Err(Error::Config(format!(
            "bad word_len_range ({lo},{hi})"
        )));
    }
    if !(0.0..=1.0).contains(&mark_prob) {
        return Err(Error::Config(format!("mark_prob {mark_prob} outside [0,1]")));
    }
    let bases: Vec<char> = alphabet
        .non_reserved()
        .iter()
        .copied()
        .filter(|c| base_strokes(*c).is_some())
        .collect();
    if bases.len() < 4 {
        return Err(Error::Config(format!(
            "alphabet has only {} drawable non-reserved symbols, need >= 4",
            bases.len()
        )));
    }
    let marked: Vec<(char, char)> = MARKED_GLYPHS
        .iter()
        .copied()
        .filter(|&(m, _)| alphabet.non_reserved().contains(&m))
        .collect();

    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = SplitMix64::derive(seed, i as u64);
        let len = lo + rng.below(hi - lo + 1);
        // (label symbol, base template symbol, carries mark)
        let mut glyphs: Vec<(char, char, bool)> = (0..len)
            .map(|_| {
                let c = bases[rng.below(bases.len())];
                (c, c, false)
            })
            .collect();
        if !marked.is_empty() && rng.next_f64() < mark_prob {
            let pos = rng.below(len);
            let (m, b) = marked[rng.below(marked.len())];
            glyphs[pos] = (m, b, true);
        }

        let mut strokes: Vec<Vec<(f64, f64)>> = Vec::new();
        let mut mark_strokes: Vec<Vec<(f64, f64)>> = Vec::new();
        for (slot, &(_, base, has_mark)) in glyphs.iter().enumerate() {
            let x0 = slot as f64 * ADVANCE;
            let template = base_strokes(base).expect("filtered to drawable");
            for polyline in template {
                let pts = polyline
                    .iter()
                    .map(|&(x, y)| {
                        (
                            x0 + x + rng.uniform(-JITTER, JITTER),
                            y + rng.uniform(-JITTER, JITTER),
                        )
                    })
                    .collect();
                strokes.push(pts);
            }
            if has_mark {
                let pts = MARK_STROKE
                    .iter()
                    .map(|&(x, y)| {
                        (
                            x0 + x + rng.uniform(-JITTER, JITTER),
                            y + rng.uniform(-JITTER, JITTER),
                        )
                    })
                    .collect();
                mark_strokes.push(pts);
            }
        }
        // delayed diacritics: marks written after every base stroke
        strokes.extend(mark_strokes);
        let label: String = glyphs.iter().map(|&(c, _, _)| c).collect();
        out.push(InkSample { strokes, label });
    }
    Ok(out)
}
