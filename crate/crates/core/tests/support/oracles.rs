//! Independent reference implementations and hand-worked fixtures used to
//! check the metric code. Shared with the acceptance target.

#![allow(dead_code)]

use poempixel_core::textmetrics::Smoothing;

/// LCS length by trying every subsequence of the shorter side, longest first.
pub fn brute_force_lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let n = short.len();
    assert!(n <= 16, "exhaustive search is for short inputs");
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let sub: Vec<&String> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &short[i]).collect();
        if is_subsequence(&sub, long) {
            best = size;
        }
    }
    best
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|t| t == *s))
}

/// Size of the multiset intersection of the two n-gram lists, by removing
/// each matched n-gram from a working copy of the reference list.
pub fn multiset_ngram_overlap(a: &[String], b: &[String], n: usize) -> usize {
    let grams = |s: &[String]| -> Vec<Vec<String>> {
        if s.len() < n {
            Vec::new()
        } else {
            s.windows(n).map(|w| w.to_vec()).collect()
        }
    };
    let mut pool = grams(b);
    let mut hits = 0;
    for g in grams(a) {
        if let Some(pos) = pool.iter().position(|p| *p == g) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    hits
}

pub struct BleuFixture {
    pub name: &'static str,
    pub candidate: &'static str,
    pub references: &'static [&'static str],
    pub smoothing: Smoothing,
    pub expected: f64,
}

const EPS: f64 = 1e-9;

/// BLEU-4 fixtures with expected values written out from the formula
/// BP * exp(mean ln p_n) over the effective orders.
pub fn bleu_fixtures() -> Vec<BleuFixture> {
    let e = std::f64::consts::E;
    vec![
        BleuFixture {
            name: "identical sentence",
            candidate: "the cat sat on the mat",
            references: &["the cat sat on the mat"],
            smoothing: Smoothing::Epsilon,
            expected: 1.0,
        },
        BleuFixture {
            // c=3, r=6, p1=p2=p3=1, three effective orders, BP=e^(1-2)
            name: "short exact prefix",
            candidate: "the cat sat",
            references: &["the cat sat on the mat"],
            smoothing: Smoothing::Epsilon,
            expected: 1.0 / e,
        },
        BleuFixture {
            // p1=1/4 (clipped), p2..p4 zero -> epsilon
            name: "clipped repetition",
            candidate: "the the the the",
            references: &["the cat"],
            smoothing: Smoothing::Epsilon,
            expected: (((0.25f64).ln() + 3.0 * EPS.ln()) / 4.0).exp(),
        },
        BleuFixture {
            // p1=3/4, p2=1/3, p3=0/2, p4=0/1
            name: "one substituted token",
            candidate: "a b c d",
            references: &["a b x d"],
            smoothing: Smoothing::Epsilon,
            expected: (((0.75f64).ln() + (1.0f64 / 3.0).ln() + 2.0 * EPS.ln()) / 4.0).exp(),
        },
        BleuFixture {
            name: "one substituted token, unsmoothed",
            candidate: "a b c d",
            references: &["a b x d"],
            smoothing: Smoothing::None,
            expected: 0.0,
        },
        BleuFixture {
            // p1=1, p2=0/2, p3=0/1 over three effective orders
            name: "reversed order",
            candidate: "a b c",
            references: &["c b a"],
            smoothing: Smoothing::Epsilon,
            expected: ((2.0 * EPS.ln()) / 3.0).exp(),
        },
        BleuFixture {
            name: "two-token identity",
            candidate: "the cat",
            references: &["the cat"],
            smoothing: Smoothing::Epsilon,
            expected: 1.0,
        },
        BleuFixture {
            // p1=6/6, p2=4/5, p3=2/4, p4=0/3
            name: "rotated clauses",
            candidate: "on the mat the cat sat",
            references: &["the cat sat on the mat"],
            smoothing: Smoothing::Epsilon,
            expected: ((0.8f64.ln() + 0.5f64.ln() + EPS.ln()) / 4.0).exp(),
        },
        BleuFixture {
            // reference lengths 3 and 7 tie on distance; the shorter gives BP=1
            name: "closest reference tie",
            candidate: "a b c d e",
            references: &["a b c", "a b c d e f g"],
            smoothing: Smoothing::Epsilon,
            expected: 1.0,
        },
        BleuFixture {
            // r=4 (closest), BP=e^(1-4/2), p1=p2=1
            name: "brevity against closest reference",
            candidate: "a b",
            references: &["a b c d", "a b c d e f"],
            smoothing: Smoothing::Epsilon,
            expected: 1.0 / e,
        },
        BleuFixture {
            // clipping takes the max count over references: p1=3/3, p2=2/2, p3=0/1
            name: "multi-reference clipping",
            candidate: "the the cat",
            references: &["the cat", "the the dog"],
            smoothing: Smoothing::Epsilon,
            expected: 1e-3,
        },
        BleuFixture {
            name: "empty candidate",
            candidate: "",
            references: &["the cat"],
            smoothing: Smoothing::Epsilon,
            expected: 0.0,
        },
    ]
}

pub struct MeteorFixture {
    pub name: &'static str,
    pub candidate: &'static str,
    pub reference: &'static str,
    pub expected: f64,
}

/// METEOR fixtures: Fmean = PR / (0.9P + 0.1R), penalty = 0.5 (ch/m)^3.
pub fn meteor_fixtures() -> Vec<MeteorFixture> {
    vec![
        MeteorFixture {
            // m=2, P=R=2/3, ch=1
            name: "one mismatch",
            candidate: "the cat sat",
            reference: "the cat slept",
            expected: 2.0 / 3.0 * (1.0 - 1.0 / 16.0),
        },
        MeteorFixture {
            name: "identical six tokens",
            candidate: "the cat sat on the mat",
            reference: "the cat sat on the mat",
            expected: 1.0 - 1.0 / 432.0,
        },
        MeteorFixture {
            // three singleton chunks -> penalty 0.5
            name: "reversed",
            candidate: "a b c",
            reference: "c b a",
            expected: 0.5,
        },
        MeteorFixture {
            name: "disjoint",
            candidate: "x y",
            reference: "a b",
            expected: 0.0,
        },
        MeteorFixture {
            // cats~cat and running~runs match on stems; one chunk of three
            name: "stem matches",
            candidate: "the cats running",
            reference: "the cat runs",
            expected: 1.0 - 1.0 / 54.0,
        },
        MeteorFixture {
            // P=1, R=1/3, Fmean=5/14
            name: "short candidate",
            candidate: "the cat",
            reference: "the cat sat on the mat",
            expected: 5.0 / 14.0 * (15.0 / 16.0),
        },
        MeteorFixture {
            // P=1/3, R=1, Fmean=5/6
            name: "long candidate",
            candidate: "the cat sat on the mat",
            reference: "the cat",
            expected: 25.0 / 32.0,
        },
        MeteorFixture {
            name: "punctuation ignored",
            candidate: "The cat, sat.",
            reference: "the cat sat",
            expected: 1.0 - 1.0 / 54.0,
        },
        MeteorFixture {
            // a->0, a->2, b->1: three chunks
            name: "repeated token",
            candidate: "a a b",
            reference: "a b a",
            expected: 0.5,
        },
        MeteorFixture {
            // greedy alignment sends "the" to reference position 0: m=4, ch=3,
            // P=1, R=2/3, Fmean=20/29, penalty=27/128
            name: "greedy earliest match",
            candidate: "sat on the mat",
            reference: "the cat sat on the mat",
            expected: 20.0 / 29.0 * (101.0 / 128.0),
        },
    ]
}
