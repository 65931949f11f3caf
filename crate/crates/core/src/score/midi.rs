//! Minimal Standard MIDI File reader and writer.
//!
//! Reading keeps the file's native resolution; [`super::quantize_song`] maps
//! it onto the 48-per-quarter grid afterwards. Tempo events are ignored.

use std::collections::{BTreeMap, HashMap, VecDeque};

use super::{Instrument, Note, ScoreError, Song, Track, TICKS_PER_QUARTER};

const DRUM_CHANNEL: u8 = 9;

fn malformed(msg: impl Into<String>) -> ScoreError {
    ScoreError::MalformedMidi(msg.into())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }

    fn u8(&mut self) -> Result<u8, ScoreError> {
        let b = *self.data.get(self.pos).ok_or_else(|| malformed("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ScoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| malformed("truncated chunk"))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ScoreError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, ScoreError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(malformed("variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Default)]
struct ChannelNotes {
    program: Option<u8>,
    notes: Vec<Note>,
    open: HashMap<u8, VecDeque<(u32, u8)>>,
}

/// Parse a format 0 or 1 Standard MIDI File.
///
/// Notes are grouped per (chunk, channel); channel 10 becomes a drum track,
/// all other tracks get a provisional class from their program number.
pub fn parse_midi(bytes: &[u8]) -> Result<Song, ScoreError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4).map_err(|_| malformed("missing header"))? != b"MThd" {
        return Err(malformed("bad header magic"));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(malformed("header chunk too short"));
    }
    let header = cur.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(malformed(format!("unsupported format {format}")));
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(malformed("SMPTE or zero division"));
    }
    let tpq = u32::from(division);

    let mut tracks = Vec::new();
    let mut chunks_read = 0;
    while chunks_read < ntracks && !cur.done() {
        let magic = cur.take(4)?;
        let len = cur.u32()? as usize;
        let body = cur.take(len)?;
        if magic != b"MTrk" {
            continue;
        }
        chunks_read += 1;
        tracks.extend(parse_track(body)?);
    }
    if chunks_read < ntracks {
        return Err(malformed(format!("expected {ntracks} tracks, found {chunks_read}")));
    }

    let mut song = Song { tracks, n_bars: 0, ticks_per_quarter: tpq };
    song.n_bars = song.bars_spanned();
    Ok(song)
}

fn parse_track(body: &[u8]) -> Result<Vec<Track>, ScoreError> {
    let mut cur = Cursor::new(body);
    let mut time: u32 = 0;
    let mut running: Option<u8> = None;
    let mut name: Option<String> = None;
    let mut channels: BTreeMap<u8, ChannelNotes> = BTreeMap::new();

    while !cur.done() {
        time = time.saturating_add(cur.vlq()?);
        let mut status = cur.u8()?;
        let first_data = if status < 0x80 {
            let rs = running.ok_or_else(|| malformed("data byte without running status"))?;
            let data = status;
            status = rs;
            Some(data)
        } else {
            None
        };
        match status {
            0xff => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let data = cur.take(len)?;
                match kind {
                    0x03 if name.is_none() => name = Some(String::from_utf8_lossy(data).into_owned()),
                    0x58 => {
                        if data.len() < 2 {
                            return Err(malformed("short time signature event"));
                        }
                        let numerator = data[0];
                        let denominator = 1u32 << data[1].min(31);
                        if numerator != 4 || denominator != 4 {
                            return Err(ScoreError::UnsupportedTimeSignature { numerator, denominator });
                        }
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let d1 = match first_data {
                    Some(d) => d,
                    None => cur.u8()?,
                };
                let kind = status & 0xf0;
                let d2 = if matches!(kind, 0xc0 | 0xd0) { 0 } else { cur.u8()? };
                if d1 > 127 || d2 > 127 {
                    return Err(malformed("data byte out of range"));
                }
                let ch = channels.entry(channel).or_default();
                match kind {
                    0x90 if d2 > 0 => ch.open.entry(d1).or_default().push_back((time, d2)),
                    0x80 | 0x90 => {
                        if let Some((onset, velocity)) = ch.open.get_mut(&d1).and_then(|q| q.pop_front()) {
                            if time > onset {
                                ch.notes.push(Note::new(onset, d1, time - onset, velocity));
                            }
                        }
                    }
                    0xc0
                        if ch.program.is_none() => {
                            ch.program = Some(d1);
                        }
                    _ => {}
                }
            }
            _ => return Err(malformed(format!("unexpected status byte {status:#04x}"))),
        }
    }

    let mut out = Vec::new();
    for (channel, mut ch) in channels {
        // notes still held at end of track close there
        for (pitch, queue) in ch.open.drain() {
            for (onset, velocity) in queue {
                if time > onset {
                    ch.notes.push(Note::new(onset, pitch, time - onset, velocity));
                }
            }
        }
        if ch.notes.is_empty() {
            continue;
        }
        let instrument = if channel == DRUM_CHANNEL {
            Instrument::Drum
        } else {
            super::preprocess::program_class(ch.program.unwrap_or(0), false).unwrap_or(Instrument::Strings)
        };
        let program = if channel == DRUM_CHANNEL { None } else { Some(ch.program.unwrap_or(0)) };
        let mut track = Track { instrument, program, name: name.clone(), notes: ch.notes };
        track.normalize_order();
        out.push(track);
    }
    Ok(out)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | cont);
    }
}

fn chunk(out: &mut Vec<u8>, magic: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Write a quantized song as a format 1 file at 48 ticks per quarter,
/// 120 BPM and 4/4. The melody track is named "Melody" so that reading the
/// file back recovers the same instrument classes.
pub fn write_midi(song: &Song) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&((song.tracks.len() + 1) as u16).to_be_bytes());
    header.extend_from_slice(&(song.ticks_per_quarter as u16).to_be_bytes());
    chunk(&mut out, b"MThd", &header);

    let mut conductor = Vec::new();
    conductor.extend_from_slice(&[0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20]);
    conductor.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
    conductor.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
    chunk(&mut out, b"MTrk", &conductor);

    let mut next_channel = 0u8;
    for track in &song.tracks {
        let channel = if track.is_drum() {
            DRUM_CHANNEL
        } else {
            let c = next_channel;
            next_channel += 1;
            if next_channel == DRUM_CHANNEL {
                next_channel += 1;
            }
            c & 0x0f
        };
        let mut body = Vec::new();
        let name = match track.instrument {
            Instrument::SquareSynth => "Melody",
            other => other.name(),
        };
        body.push(0x00);
        body.extend_from_slice(&[0xff, 0x03]);
        push_vlq(&mut body, name.len() as u32);
        body.extend_from_slice(name.as_bytes());
        if !track.is_drum() {
            let program = track.program.unwrap_or_else(|| track.instrument.canonical_program());
            body.extend_from_slice(&[0x00, 0xc0 | channel, program & 0x7f]);
        }
        // (time, off-before-on, pitch, velocity)
        let mut events: Vec<(u32, u8, u8, u8)> = Vec::with_capacity(track.notes.len() * 2);
        for n in &track.notes {
            events.push((n.onset, 1, n.pitch, n.velocity));
            events.push((n.end(), 0, n.pitch, 0));
        }
        events.sort();
        let mut now = 0;
        for (time, is_on, pitch, velocity) in events {
            push_vlq(&mut body, time - now);
            now = time;
            if is_on == 1 {
                body.extend_from_slice(&[0x90 | channel, pitch, velocity]);
            } else {
                body.extend_from_slice(&[0x80 | channel, pitch, 0]);
            }
        }
        body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        chunk(&mut out, b"MTrk", &body);
    }
    out
}

impl Song {
    /// Whether the song is already on the canonical grid.
    pub fn is_quantized(&self) -> bool {
        self.ticks_per_quarter == TICKS_PER_QUARTER
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Format 0, division 48, one note-on(60, 80) at 0 and its note-off one
    /// quarter later, assembled byte by byte.
    pub(crate) fn single_note_file() -> Vec<u8> {
        vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 48, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 12, //
            0x00, 0x90, 60, 80, //
            0x30, 0x80, 60, 0, //
            0x00, 0xff, 0x2f, 0x00,
        ]
    }

    #[test]
    fn single_note() {
        let song = parse_midi(&single_note_file()).unwrap();
        assert_eq!(song.tracks.len(), 1);
        assert_eq!(song.tracks[0].notes, vec![Note::new(0, 60, 48, 80)]);
        assert_eq!(song.n_bars, 1);
    }

    #[test]
    fn empty_file_has_no_bars() {
        let bytes = vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 48, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 4, 0x00, 0xff, 0x2f, 0x00,
        ];
        let song = parse_midi(&bytes).unwrap();
        assert!(song.tracks.is_empty());
        assert_eq!(song.n_bars, 0);
    }

    #[test]
    fn three_four_rejected() {
        let bytes = vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 48, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 12, //
            0x00, 0xff, 0x58, 0x04, 3, 2, 24, 8, //
            0x00, 0xff, 0x2f, 0x00,
        ];
        assert!(matches!(
            parse_midi(&bytes),
            Err(ScoreError::UnsupportedTimeSignature { numerator: 3, denominator: 4 })
        ));
    }

    #[test]
    fn truncated_chunk_is_malformed() {
        let mut bytes = single_note_file();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_midi(&bytes), Err(ScoreError::MalformedMidi(_))));
        assert!(matches!(parse_midi(b"MThx"), Err(ScoreError::MalformedMidi(_))));
        assert!(matches!(parse_midi(b""), Err(ScoreError::MalformedMidi(_))));
    }

    #[test]
    fn running_status_and_velocity_zero_off() {
        let bytes = vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 96, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 14, //
            0x00, 0xc1, 25, //
            0x00, 0x91, 64, 100, //
            0x60, 64, 0, // running status, velocity 0 = off
            0x00, 0xff, 0x2f, 0x00,
        ];
        let song = parse_midi(&bytes).unwrap();
        assert_eq!(song.ticks_per_quarter, 96);
        assert_eq!(song.tracks[0].program, Some(25));
        assert_eq!(song.tracks[0].instrument, Instrument::Guitar);
        assert_eq!(song.tracks[0].notes, vec![Note::new(0, 64, 96, 100)]);
    }

    #[test]
    fn write_then_read_preserves_notes() {
        let song = Song::new(
            vec![
                Track::new(Instrument::Drum, vec![Note::new(0, 36, 12, 64), Note::new(12, 42, 12, 64)]),
                Track::new(Instrument::Bass, vec![Note::new(0, 40, 96, 90), Note::new(96, 43, 96, 91)]),
                Track::new(Instrument::SquareSynth, vec![Note::new(192, 72, 24, 100)]),
            ],
            2,
        );
        let back = parse_midi(&write_midi(&song)).unwrap();
        assert_eq!(back.n_bars, 2);
        assert_eq!(back.tracks.len(), 3);
        for (a, b) in song.tracks.iter().zip(&back.tracks) {
            assert_eq!(a.notes, b.notes);
        }
        assert!(back.tracks[2].explicitly_melody());
        assert_eq!(back.tracks[1].instrument, Instrument::Bass);
    }
}
