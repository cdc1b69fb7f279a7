//! Corpus-trained byte-pair tokenizer with a word-boundary marker.
//!
//! Words are split to characters behind a leading `▁` symbol, then the most
//! frequent adjacent symbol pairs are merged until the vocabulary cap is
//! reached or no pair occurs twice. Ties on frequency resolve to the
//! lexicographically smallest pair, so training is fully deterministic.

use crate::error::{ModelError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

const MARKER: char = '▁';

/// Serializable tokenizer state: everything needed to reconstruct encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerState {
    pub pieces: Vec<String>,
    pub merges: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    piece_id: BTreeMap<String, usize>,
    merge_rank: BTreeMap<(String, String), usize>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.merges == other.merges
    }
}

impl Tokenizer {
    /// Learn merges from a corpus. `vocab_cap` bounds the total piece count
    /// including the four specials.
    pub fn train(corpus: &[String], vocab_cap: usize) -> Result<Self> {
        // Word frequencies drive pair counting; BTreeMap keeps every scan
        // order-deterministic.
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *word_freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }

        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut alphabet: BTreeMap<String, ()> = BTreeMap::new();
        alphabet.insert(MARKER.to_string(), ());
        for w in word_freq.keys() {
            for ch in w.chars() {
                alphabet.insert(ch.to_string(), ());
            }
        }
        if pieces.len() + alphabet.len() > vocab_cap {
            return Err(ModelError::Tokenizer(format!(
                "alphabet of {} symbols does not fit vocab cap {}",
                alphabet.len(),
                vocab_cap
            )));
        }
        pieces.extend(alphabet.keys().cloned());

        // Working symbol sequences per distinct word.
        let mut seqs: Vec<(Vec<String>, usize)> = word_freq
            .iter()
            .map(|(w, &f)| {
                let mut s = vec![MARKER.to_string()];
                s.extend(w.chars().map(|c| c.to_string()));
                (s, f)
            })
            .collect();

        let mut merges = Vec::new();
        while pieces.len() < vocab_cap {
            let mut pair_freq: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (syms, f) in &seqs {
                for win in syms.windows(2) {
                    *pair_freq
                        .entry((win[0].clone(), win[1].clone()))
                        .or_insert(0) += f;
                }
            }
            // Ascending map scan + strict '>' keeps the smallest pair on ties.
            let mut best: Option<(&(String, String), usize)> = None;
            for (pair, &f) in &pair_freq {
                if best.map_or(true, |(_, bf)| f > bf) {
                    best = Some((pair, f));
                }
            }
            let Some((pair, f)) = best else { break };
            if f < 2 {
                break;
            }
            let pair = pair.clone();
            let merged = format!("{}{}", pair.0, pair.1);
            for (syms, _) in &mut seqs {
                merge_in_place(syms, &pair, &merged);
            }
            pieces.push(merged);
            merges.push(pair);
        }

        Ok(Self::from_state(TokenizerState { pieces, merges }))
    }

    pub fn from_state(state: TokenizerState) -> Self {
        let piece_id = state
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let merge_rank = state
            .merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Tokenizer {
            pieces: state.pieces,
            merges: state.merges,
            piece_id,
            merge_rank,
        }
    }

    pub fn state(&self) -> TokenizerState {
        TokenizerState {
            pieces: self.pieces.clone(),
            merges: self.merges.clone(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(|s| s.as_str())
    }

    /// Encode a sentence, wrapping it in BOS/EOS. The empty string encodes
    /// to exactly `[BOS, EOS]`. Characters outside the training alphabet
    /// map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            let mut syms = vec![MARKER.to_string()];
            syms.extend(word.chars().map(|c| c.to_string()));
            self.apply_merges(&mut syms);
            for s in syms {
                ids.push(*self.piece_id.get(&s).unwrap_or(&UNK));
            }
        }
        ids.push(EOS);
        ids
    }

    fn apply_merges(&self, syms: &mut Vec<String>) {
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..syms.len().saturating_sub(1) {
                let key = (syms[i].clone(), syms[i + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(br, _)| rank < br) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let pair = self.merges[rank].clone();
            let merged = format!("{}{}", pair.0, pair.1);
            merge_in_place(syms, &pair, &merged);
        }
    }

    /// Decode ids back to text. Specials are dropped except UNK, which
    /// renders as its literal piece so lossy inputs stay visible.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => continue,
                _ => {}
            }
            match self.pieces.get(id) {
                Some(p) => s.push_str(p),
                None => s.push_str(SPECIALS[UNK]),
            }
        }
        s.replace(MARKER, " ").trim().to_string()
    }
}

/// Replace every adjacent occurrence of `pair` with `merged`, scanning left
/// to right (an element consumed by one merge cannot join the next).
fn merge_in_place(syms: &mut Vec<String>, pair: &(String, String), merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            syms[i] = merged.to_string();
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drivecap_scenes::{caption_for, Category, ColBand, ObjectAttrs, ObjectColor, RowBand, Scenario};

    fn template_corpus() -> Vec<String> {
        let mut out = Vec::new();
        for scenario in Scenario::ALL {
            for category in Category::ALL {
                for color in [ObjectColor::Red, ObjectColor::Cyan] {
                    for row in [RowBand::Far, RowBand::Middle, RowBand::Near] {
                        for col in [ColBand::Left, ColBand::Center, ColBand::Right] {
                            let attrs = ObjectAttrs { category, color, row, col };
                            out.push(caption_for(scenario, attrs).join(" "));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn empty_string_encodes_to_bos_eos() {
        let tok = Tokenizer::train(&["a b".to_string()], 64).unwrap();
        assert_eq!(tok.encode(""), vec![BOS, EOS]);
    }

    #[test]
    fn round_trips_every_template_caption() {
        let corpus = template_corpus();
        let tok = Tokenizer::train(&corpus, 512).unwrap();
        assert!(tok.vocab() <= 512);
        for line in &corpus {
            let ids = tok.encode(line);
            assert_eq!(ids[0], BOS);
            assert_eq!(*ids.last().unwrap(), EOS);
            assert_eq!(&tok.decode(&ids), line, "round trip failed");
        }
    }

    #[test]
    fn frequent_words_collapse_to_single_pieces() {
        let corpus = template_corpus();
        let tok = Tokenizer::train(&corpus, 512).unwrap();
        // "the" occurs in every caption several times over.
        let ids = tok.encode("the");
        assert_eq!(ids.len(), 3, "expected [BOS, ▁the, EOS], got {ids:?}");
        // A full caption should sit near one piece per word, far below
        // per-character length.
        let line = &corpus[0];
        let words = line.split_whitespace().count();
        let ids = tok.encode(line);
        assert!(
            ids.len() - 2 <= words + 4,
            "{} pieces for {} words",
            ids.len() - 2,
            words
        );
    }

    #[test]
    fn unknown_characters_map_to_unk_and_stay_visible() {
        let tok = Tokenizer::train(&["plain words only".to_string()], 64).unwrap();
        let ids = tok.encode("plain Zords");
        assert!(ids.contains(&UNK));
        assert!(tok.decode(&ids).contains("<unk>"));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = template_corpus();
        let a = Tokenizer::train(&corpus, 512).unwrap();
        let b = Tokenizer::train(&corpus, 512).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn state_round_trip_preserves_encoding() {
        let corpus = template_corpus();
        let a = Tokenizer::train(&corpus, 256).unwrap();
        let json = serde_json::to_string(&a.state()).unwrap();
        let b = Tokenizer::from_state(serde_json::from_str(&json).unwrap());
        assert_eq!(a, b);
        for line in corpus.iter().take(5) {
            assert_eq!(a.encode(line), b.encode(line));
        }
    }

    #[test]
    fn vocab_cap_is_respected_and_tiny_caps_fail() {
        let corpus = template_corpus();
        let tok = Tokenizer::train(&corpus, 96).unwrap();
        assert!(tok.vocab() <= 96);
        assert!(Tokenizer::train(&corpus, 10).is_err());
    }
}
