use super::{TokenizeError, PAD};

/// One song of a token corpus: an id and its unpadded per-track sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenRecord {
    pub id: String,
    pub tracks: Vec<Vec<u32>>,
}

/// `#SONG <id>` followed by one line of space-separated ids per track.
/// Trailing PAD is stripped.
pub fn write_token_corpus(records: &[TokenRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str("#SONG ");
        out.push_str(&r.id);
        out.push('\n');
        for track in &r.tracks {
            let end = track.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
            let line: Vec<String> = track[..end].iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn read_token_corpus(text: &str) -> Result<Vec<TokenRecord>, TokenizeError> {
    let mut records: Vec<TokenRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| TokenizeError::Parse { line: i + 1, message };
        if let Some(id) = line.strip_prefix("#SONG ") {
            records.push(TokenRecord { id: id.to_string(), tracks: Vec::new() });
            continue;
        }
        let record = records.last_mut().ok_or_else(|| err("track line before any #SONG".into()))?;
        let ids = line
            .split_ascii_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| err(format!("bad id {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        record.tracks.push(ids);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout() {
        let r = vec![TokenRecord { id: "a/1".into(), tracks: vec![vec![3, 1, 9, 2, 0, 0], vec![4, 1, 2]] }];
        let text = write_token_corpus(&r);
        assert_eq!(text, "#SONG a/1\n3 1 9 2\n4 1 2\n");
        assert!(read_token_corpus("1 2 3\n").is_err());
        assert!(read_token_corpus("#SONG x\n1 z\n").is_err());
    }

    proptest! {
        #[test]
        fn file_round_trip(recs in prop::collection::vec(
            ("[a-z0-9_]{1,8}", prop::collection::vec(prop::collection::vec(1u32..500, 1..20), 1..5)), 0..5)) {
            let records: Vec<TokenRecord> = recs.into_iter().map(|(id, tracks)| TokenRecord { id, tracks }).collect();
            let text = write_token_corpus(&records);
            let back = read_token_corpus(&text).unwrap();
            prop_assert_eq!(&back, &records);
            prop_assert_eq!(write_token_corpus(&back), text);
        }
    }
}
