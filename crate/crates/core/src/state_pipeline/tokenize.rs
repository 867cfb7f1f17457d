/// Byte-level token ids, truncated to `context_len`.
pub fn tokenize(text: &str, context_len: usize) -> Vec<usize> {
    text.bytes().take(context_len).map(usize::from).collect()
}

/// Lossy inverse of [`tokenize`] for display.
pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
