//! Table-driven English suffix stripper used by the METEOR stem stage.
//!
//! Rules are tried in order; the first suffix that matches and leaves a stem
//! of at least [`MIN_STEM`] characters wins. After stripping `-ing`/`-ed`
//! a doubled final consonant is collapsed ("sitting" -> "sit").

const MIN_STEM: usize = 3;

const RULES: &[(&str, &str)] = &[
    ("ational", "ate"),
    ("ization", "ize"),
    ("fulness", "ful"),
    ("ousness", "ous"),
    ("iveness", "ive"),
    ("lessly", "less"),
    ("ingly", ""),
    ("fully", "ful"),
    ("edly", ""),
    ("ities", "ity"),
    ("sses", "ss"),
    ("ness", ""),
    ("ment", ""),
    ("ies", "y"),
    ("ied", "y"),
    ("ing", ""),
    ("ly", ""),
    ("ed", ""),
    ("es", ""),
    ("s", ""),
];

/// Suffixes that must not lose a trailing `s`.
const KEEP_S: &[&str] = &["ss", "us", "is"];

pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    if w.chars().count() <= MIN_STEM {
        return w;
    }
    for &(suffix, replacement) in RULES {
        if !w.ends_with(suffix) {
            continue;
        }
        if suffix == "s" && KEEP_S.iter().any(|k| w.ends_with(k)) {
            return w;
        }
        if suffix == "es" && !(w.ends_with("ches") || w.ends_with("shes") || w.ends_with("xes") || w.ends_with("zes")) {
            // plain "-es" words such as "shades" only drop the final "s"
            let base = &w[..w.len() - 1];
            return base.to_string();
        }
        let base = &w[..w.len() - suffix.len()];
        if base.chars().count() < MIN_STEM {
            continue;
        }
        let mut stemmed = format!("{base}{replacement}");
        if (suffix == "ing" || suffix == "ed") && replacement.is_empty() {
            undouble(&mut stemmed);
        }
        return stemmed;
    }
    w
}

fn undouble(s: &mut String) {
    let bytes = s.as_bytes();
    let n = bytes.len();
    if n >= 2 && bytes[n - 1] == bytes[n - 2] {
        let c = bytes[n - 1] as char;
        if c.is_ascii_alphabetic() && !"aeioulsz".contains(c) {
            s.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stem;

    #[test]
    fn golden_stems() {
        let cases = [
            ("cats", "cat"),
            ("cat", "cat"),
            ("running", "run"),
            ("sitting", "sit"),
            ("walked", "walk"),
            ("stories", "story"),
            ("carried", "carry"),
            ("quickly", "quick"),
            ("darkness", "dark"),
            ("movement", "move"),
            ("relational", "relate"),
            ("kindness", "kind"),
            ("grass", "grass"),
            ("glasses", "glass"),
            ("famous", "famous"),
            ("analysis", "analysis"),
            ("shades", "shade"),
            ("branches", "branch"),
            ("boxes", "box"),
            ("longingly", "long"),
            ("sleep", "sleep"),
            ("slept", "slept"),
            ("falling", "fall"),
            ("cities", "city"),
            ("hopefully", "hopeful"),
            ("Trees", "tree"),
            ("is", "is"),
            ("sing", "sing"),
        ];
        for (word, expected) in cases {
            assert_eq!(stem(word), expected, "stem({word})");
        }
    }
}
