use std::fmt;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: usize = 4;
const FIRST: u8 = b' ';
const LAST: u8 = b'~';

/// Fixed character inventory: the 95 printable ASCII characters (space
/// through tilde) after the four special tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    /// Number of characters, excluding special tokens.
    pub const CHARS: usize = (LAST - FIRST + 1) as usize;
    /// Token count including specials.
    pub const SIZE: usize = Self::CHARS + SPECIALS;
    pub const PAD: usize = PAD;
    pub const SOS: usize = SOS;
    pub const EOS: usize = EOS;
    pub const UNK: usize = UNK;

    /// The vocabulary does not depend on the corpus; characters outside the
    /// fixed set encode as [`UNK`].
    pub fn build<'a>(_transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        Vocabulary
    }

    /// Token count including specials.
    pub fn len(&self) -> usize {
        Self::SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn charset(&self) -> String {
        (FIRST..=LAST).map(char::from).collect()
    }

    pub fn contains(&self, c: char) -> bool {
        (FIRST as u32..=LAST as u32).contains(&(c as u32))
    }

    pub fn id(&self, c: char) -> usize {
        if self.contains(c) {
            SPECIALS + (c as usize - FIRST as usize)
        } else {
            UNK
        }
    }

    /// Printable character of a token id; `None` for specials and
    /// out-of-range ids.
    pub fn char(&self, id: usize) -> Option<char> {
        (SPECIALS..self.len())
            .contains(&id)
            .then(|| char::from(FIRST + (id - SPECIALS) as u8))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Renders ids back to text; UNK renders as U+FFFD, other specials are
    /// skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                UNK => Some(char::REPLACEMENT_CHARACTER),
                _ => self.char(id),
            })
            .collect()
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.charset())
    }
}
