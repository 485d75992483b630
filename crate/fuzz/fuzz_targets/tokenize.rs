#![no_main]

use lawg_core::text::{tokenize, Vocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // First line is the vocabulary, the rest is the expression.
    let (vocab_line, expression) = text.split_once('\n').unwrap_or((text, "red circle"));
    let words: Vec<&str> = vocab_line.split_whitespace().collect();
    let Ok(vocab) = Vocabulary::from_words(&words) else {
        return;
    };
    if let Ok(t) = tokenize(expression, &vocab, 12) {
        assert_eq!(t.ids.len(), 12);
        assert_eq!(t.mask.len(), 12);
        assert!(t.mask[0]);
        assert!(t.ids.iter().all(|&id| id < vocab.len()));
    }
});
