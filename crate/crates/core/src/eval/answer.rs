//! Answer extraction and canonical comparison.

/// Contents of every balanced `\boxed{...}` in `text`, in order. An opening
/// with no matching close brace ends the scan.
pub fn boxed_contents(text: &str) -> Vec<String> {
    const OPEN: &str = "\\boxed{";
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(OPEN) {
        let body = &rest[pos + OPEN.len()..];
        let mut depth = 1usize;
        let mut end = None;
        for (i, c) in body.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(i) => {
                out.push(body[..i].trim().to_string());
                rest = &body[i + 1..];
            }
            None => break,
        }
    }
    out
}

pub fn last_boxed(text: &str) -> Option<String> {
    boxed_contents(text).pop()
}

fn find_ci(hay: &str, needle: &str) -> Option<usize> {
    hay.to_ascii_lowercase().rfind(needle)
}

/// The final answer of a sample: the last balanced `\boxed{}`; failing that,
/// the text after the last "Answer:" or "final answer is" line; else none.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(b) = last_boxed(text) {
        return Some(b);
    }
    for line in text.lines().rev() {
        let hit = find_ci(line, "final answer is")
            .map(|i| i + "final answer is".len())
            .or_else(|| find_ci(line, "answer:").map(|i| i + "answer:".len()));
        if let Some(start) = hit {
            let a = line[start..]
                .trim()
                .trim_end_matches('.')
                .trim_start_matches(':')
                .trim();
            if !a.is_empty() {
                return Some(a.to_string());
            }
        }
    }
    None
}

/// Strips one layer of surrounding math delimiters.
fn strip_delims(s: &str) -> &str {
    for (l, r) in [("$$", "$$"), ("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")] {
        if s.len() >= l.len() + r.len() {
            if let Some(inner) = s.strip_prefix(l).and_then(|x| x.strip_suffix(r)) {
                return inner.trim();
            }
        }
    }
    s
}

/// Unwraps `\text{...}` and `\mathrm{...}` when they span the whole value.
fn strip_wrapper(s: &str) -> &str {
    for w in ["\\text{", "\\mathrm{", "\\textbf{"] {
        if let Some(inner) = s.strip_prefix(w).and_then(|x| x.strip_suffix('}')) {
            return inner.trim();
        }
    }
    s
}

fn strip_leading_zeros(num: &str) -> String {
    let (sign, digits) = match num.strip_prefix('-') {
        Some(d) => ("-", d),
        None => ("", num.strip_prefix('+').unwrap_or(num)),
    };
    let int_end = digits.find('.').unwrap_or(digits.len());
    let int = digits[..int_end].trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let mut frac = &digits[int_end..];
    if frac.contains('.') {
        frac = frac.trim_end_matches('0');
        if frac == "." {
            frac = "";
        }
    }
    let out = format!("{int}{frac}");
    if out == "0" {
        out
    } else {
        format!("{sign}{out}")
    }
}

fn is_decimal(s: &str) -> bool {
    let d = s.strip_prefix(['-', '+']).unwrap_or(s);
    !d.is_empty()
        && d.chars().all(|c| c.is_ascii_digit() || c == '.')
        && d.matches('.').count() <= 1
        && d.chars().any(|c| c.is_ascii_digit())
}

/// Removes thousands separators from a value like `1,234,567`.
fn strip_thousands(s: &str) -> String {
    let d = s.strip_prefix('-').unwrap_or(s);
    let groups: Vec<&str> = d.split(',').collect();
    let ok = groups.len() > 1
        && !groups[0].is_empty()
        && groups[0].len() <= 3
        && groups[0].chars().all(|c| c.is_ascii_digit())
        && groups[1..]
            .iter()
            .all(|g| g.len() == 3 && g.chars().all(|c| c.is_ascii_digit()));
    if ok {
        s.replace(',', "")
    } else {
        s.to_string()
    }
}

/// Canonical form used for strict matching. Trims, strips delimiters and a
/// trailing period, collapses whitespace, folds `\dfrac`/`\tfrac` into
/// `\frac`, drops spaces around commas, writes simple `\frac{a}{b}` as
/// `a/b`, drops percent and degree marks and a leading `x =`, and strips
/// plain numbers of a `+` sign, leading zeros, trailing fractional zeros
/// and thousands commas.
pub fn canonicalize(s: &str) -> String {
    let mut t = s.trim();
    loop {
        let before = t;
        t = strip_delims(t);
        t = t.trim_end_matches('.').trim();
        t = strip_wrapper(t);
        if t == before {
            break;
        }
    }
    let mut v = t.split_whitespace().collect::<Vec<_>>().join(" ");
    for (from, to) in [
        (", ", ","),
        (" ,", ","),
        ("\\dfrac", "\\frac"),
        ("\\tfrac", "\\frac"),
        ("\\left", ""),
        ("\\right", ""),
        ("^{\\circ}", ""),
        ("^\\circ", ""),
        ("\\%", ""),
        ("%", ""),
        ("\\!", ""),
        ("\\,", ""),
    ] {
        v = v.replace(from, to);
    }
    let v = v.trim();
    // "x = 5" -> "5" for a single-letter variable.
    let v = match v.split_once('=') {
        Some((lhs, rhs)) if lhs.trim().len() == 1 && lhs.trim().chars().all(|c| c.is_ascii_alphabetic()) => rhs.trim(),
        _ => v,
    };
    let v = fold_frac(v);
    let v = strip_thousands(&v);
    if is_decimal(&v) {
        return strip_leading_zeros(&v);
    }
    if let Some((n, d)) = v.split_once('/') {
        let (n, d) = (n.trim(), d.trim());
        if is_decimal(n) && is_decimal(d) {
            return format!("{}/{}", strip_leading_zeros(n), strip_leading_zeros(d));
        }
    }
    v.to_string()
}

/// `\frac{a}{b}` (optionally signed) with plain numeric a, b becomes `a/b`.
fn fold_frac(v: &str) -> String {
    let (sign, body) = match v.strip_prefix('-') {
        Some(b) => ("-", b.trim_start()),
        None => ("", v),
    };
    let Some(rest) = body.strip_prefix("\\frac{") else {
        return v.to_string();
    };
    let Some((num, rest)) = rest.split_once("}{") else {
        return v.to_string();
    };
    let Some(den) = rest.strip_suffix('}') else {
        return v.to_string();
    };
    if is_decimal(num) && is_decimal(den) {
        format!("{sign}{num}/{den}")
    } else {
        v.to_string()
    }
}

/// Exact rational value of an integer, decimal, or `a/b` of those.
fn rational(s: &str) -> Option<(i128, i128)> {
    fn dec(s: &str) -> Option<(i128, i128)> {
        if !is_decimal(s) {
            return None;
        }
        let neg = s.starts_with('-');
        let d = s.trim_start_matches(['-', '+']);
        let (i, f) = d.split_once('.').unwrap_or((d, ""));
        if i.len() + f.len() > 30 {
            return None;
        }
        let digits = format!("{i}{f}");
        let n: i128 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
        let den = 10i128.checked_pow(f.len() as u32)?;
        Some((if neg { -n } else { n }, den))
    }
    match s.split_once('/') {
        Some((a, b)) => {
            let (an, ad) = dec(a.trim())?;
            let (bn, bd) = dec(b.trim())?;
            if bn == 0 {
                return None;
            }
            Some((an.checked_mul(bd)?, ad.checked_mul(bn)?))
        }
        None => dec(s),
    }
}

/// Strict comparison: canonical strings equal, or both canonical values are
/// exact rationals with the same value (so `0.5` matches `1/2`).
pub fn answers_match(candidate: &str, gold: &str) -> bool {
    let (c, g) = (canonicalize(candidate), canonicalize(gold));
    if c == g {
        return true;
    }
    match (rational(&c), rational(&g)) {
        (Some((a, b)), Some((x, y))) => match (a.checked_mul(y), x.checked_mul(b)) {
            (Some(l), Some(r)) => l == r,
            _ => false,
        },
        _ => false,
    }
}
