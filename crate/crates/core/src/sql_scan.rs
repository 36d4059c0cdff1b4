//! Minimal lexical scan over SQL text: skips string literals, quoted
//! identifiers and comments, and tracks parenthesis depth.

/// Calls `visit(byte_offset, ch, depth)` for every character outside literals
/// and comments. Stops early when `visit` returns false.
pub fn scan_code<F>(sql: &str, mut visit: F)
where
    F: FnMut(usize, char, u32) -> bool,
{
    let bytes = sql.as_bytes();
    let mut depth: u32 = 0;
    let mut iter = sql.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        match c {
            '\'' | '"' | '`' | '[' => {
                let close = if c == '[' { ']' } else { c };
                // Doubled quote characters escape themselves.
                loop {
                    match iter.next() {
                        None => return,
                        Some((_, d)) if d == close => {
                            if close != ']' && iter.peek().map(|&(_, n)| n) == Some(close) {
                                iter.next();
                                continue;
                            }
                            break;
                        }
                        Some(_) => {}
                    }
                }
            }
            '-' if bytes.get(i + 1) == Some(&b'-') => {
                for (_, d) in iter.by_ref() {
                    if d == '\n' {
                        break;
                    }
                }
            }
            '/' if bytes.get(i + 1) == Some(&b'*') => {
                iter.next();
                let mut prev = '\0';
                for (_, d) in iter.by_ref() {
                    if prev == '*' && d == '/' {
                        break;
                    }
                    prev = d;
                }
            }
            '(' => {
                if !visit(i, c, depth) {
                    return;
                }
                depth += 1;
            }
            ')' => {
                depth = depth.saturating_sub(1);
                if !visit(i, c, depth) {
                    return;
                }
            }
            _ => {
                if !visit(i, c, depth) {
                    return;
                }
            }
        }
    }
}

/// Byte offset of the first statement terminator outside literals/comments.
pub fn first_terminator(sql: &str) -> Option<usize> {
    let mut found = None;
    scan_code(sql, |i, c, _| {
        if c == ';' {
            found = Some(i);
            false
        } else {
            true
        }
    });
    found
}

/// Upper-cased keywords/identifiers appearing at parenthesis depth zero.
pub fn top_level_words(sql: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut last_end = usize::MAX;
    scan_code(sql, |i, c, depth| {
        let word_char = c.is_alphanumeric() || c == '_';
        // A skipped literal or comment between two characters splits words.
        let contiguous = last_end == i;
        if !(word_char && depth == 0 && contiguous) && !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
        if word_char && depth == 0 {
            current.extend(c.to_uppercase());
        }
        last_end = i + c.len_utf8();
        true
    });
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// True iff the statement's outermost clause structure contains ORDER BY.
pub fn has_top_level_order_by(sql: &str) -> bool {
    top_level_words(sql)
        .windows(2)
        .any(|w| w[0] == "ORDER" && w[1] == "BY")
}
