//! Objective fidelity of a generated cover against its reference, and
//! generation speed.

use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::features::beat_chords;
use crate::score::{Note, Song};
use crate::tokenizer::{velocity_bin, Vocab, VELOCITY_BINS};

const GROOVE_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no bars to compare")]
    ZeroBars,
    #[error("elapsed time must be positive")]
    ZeroDuration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    Pitch,
    Duration,
    Velocity,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub nde: f64,
    pub oap: f64,
    pub oad: f64,
    pub oav: f64,
    pub ccs: f64,
    pub gcs: f64,
    pub ca: f64,
    pub ssmd: f64,
    pub tok_per_sec: f64,
    pub note_per_sec: f64,
    pub n_bars_compared: usize,
    /// Whether the two songs had different bar counts.
    pub truncated: bool,
}

/// Work done by one generation call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub tokens: usize,
    pub notes: usize,
    pub seconds: f64,
}

struct Bar<'a> {
    notes: Vec<(&'a Note, bool)>,
}

/// Notes of every bar across all tracks, tagged with drum membership.
fn bars(song: &Song, n: usize) -> Vec<Bar<'_>> {
    let tpb = song.ticks_per_bar();
    let mut out: Vec<Bar> = (0..n).map(|_| Bar { notes: Vec::new() }).collect();
    for t in &song.tracks {
        for note in &t.notes {
            if let Some(bar) = out.get_mut((note.onset / tpb) as usize) {
                bar.notes.push((note, t.is_drum()));
            }
        }
    }
    out
}

fn compared_bars(a: &Song, b: &Song) -> Result<usize, MetricsError> {
    match a.n_bars.min(b.n_bars) {
        0 => Err(MetricsError::ZeroBars),
        n => Ok(n),
    }
}

/// RMSE of per-bar onset counts over all tracks, divided by the larger of
/// 1 and the densest reference bar.
pub fn note_density_error(reference: &Song, cover: &Song) -> Result<f64, MetricsError> {
    let n = compared_bars(reference, cover)?;
    let r: Vec<f64> = bars(reference, n).iter().map(|b| b.notes.len() as f64).collect();
    let c: Vec<f64> = bars(cover, n).iter().map(|b| b.notes.len() as f64).collect();
    let mse = r.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    Ok(mse.sqrt() / r.iter().copied().fold(1.0, f64::max))
}

fn duration_vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(Vocab::default_vocab)
}

fn histogram(bar: &Bar, element: Element) -> Vec<u64> {
    let vocab = duration_vocab();
    let size = match element {
        Element::Pitch => 128,
        Element::Duration => vocab.duration_mesh().len(),
        Element::Velocity => VELOCITY_BINS as usize,
    };
    let mut h = vec![0u64; size];
    for &(n, drum) in &bar.notes {
        let bin = match element {
            Element::Pitch if !drum => n.pitch as usize,
            Element::Velocity if !drum => velocity_bin(n.velocity) as usize,
            Element::Duration => vocab.duration_class(n.duration) as usize,
            _ => continue,
        };
        h[bin] += 1;
    }
    h
}

/// Mean over bars of the shared mass of the two normalized histograms,
/// `Σ min(p, q)`, evaluated on counts so equal histograms give exactly 1.
pub fn overlap_area(reference: &Song, cover: &Song, element: Element) -> Result<f64, MetricsError> {
    let n = compared_bars(reference, cover)?;
    let (rb, cb) = (bars(reference, n), bars(cover, n));
    let total: f64 = rb
        .iter()
        .zip(&cb)
        .map(|(r, c)| {
            let (p, q) = (histogram(r, element), histogram(c, element));
            let (np, nq) = (p.iter().sum::<u64>(), q.iter().sum::<u64>());
            match (np > 0, nq > 0) {
                (false, false) => 1.0,
                (true, true) => {
                    let shared: u64 = p.iter().zip(&q).map(|(a, b)| (a * nq).min(b * np)).sum();
                    shared as f64 / (np * nq) as f64
                }
                _ => 0.0,
            }
        })
        .sum();
    Ok(total / n as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    match (na > 0.0, nb > 0.0) {
        (false, false) => 1.0,
        (true, true) => (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb).sqrt()).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

fn chroma(bar: &Bar) -> Vec<f64> {
    let mut v = vec![0.0; 12];
    for &(n, drum) in &bar.notes {
        if !drum {
            v[n.pitch as usize % 12] += 1.0;
        }
    }
    v
}

fn groove(bar: &Bar, ticks_per_bar: u32) -> Vec<f64> {
    let mut v = vec![0.0; GROOVE_STEPS];
    for &(n, _) in &bar.notes {
        let step = (n.onset % ticks_per_bar) as usize * GROOVE_STEPS / ticks_per_bar as usize;
        v[step] = 1.0;
    }
    v
}

fn mean_cosine(reference: &Song, cover: &Song, vector: impl Fn(&Bar, u32) -> Vec<f64>) -> Result<f64, MetricsError> {
    let n = compared_bars(reference, cover)?;
    let (rb, cb) = (bars(reference, n), bars(cover, n));
    let (rt, ct) = (reference.ticks_per_bar(), cover.ticks_per_bar());
    Ok(rb.iter().zip(&cb).map(|(r, c)| cosine(&vector(r, rt), &vector(c, ct))).sum::<f64>() / n as f64)
}

/// Bar-wise cosine of pitch-class onset counts of pitched tracks.
pub fn chroma_similarity(reference: &Song, cover: &Song) -> Result<f64, MetricsError> {
    mean_cosine(reference, cover, |b, _| chroma(b))
}

/// Bar-wise cosine of 16th-note onset indicators over all tracks.
pub fn grooving_similarity(reference: &Song, cover: &Song) -> Result<f64, MetricsError> {
    mean_cosine(reference, cover, groove)
}

/// Fraction of beats whose detected chords are equal.
pub fn chord_accuracy(reference: &Song, cover: &Song) -> Result<f64, MetricsError> {
    let n = compared_bars(reference, cover)?;
    let (r, c) = (beat_chords(reference), beat_chords(cover));
    let beats = n * crate::features::BEATS_PER_BAR;
    Ok(r[..beats].iter().zip(&c[..beats]).filter(|(a, b)| a == b).count() as f64 / beats as f64)
}

fn ssm(song: &Song, n: usize) -> Vec<Vec<f64>> {
    let chromas: Vec<Vec<f64>> = bars(song, n).iter().map(chroma).collect();
    chromas.iter().map(|a| chromas.iter().map(|b| cosine(a, b)).collect()).collect()
}

/// Mean absolute difference of the bar-chroma self-similarity matrices.
pub fn ssm_distance(reference: &Song, cover: &Song) -> Result<f64, MetricsError> {
    let n = compared_bars(reference, cover)?;
    let (a, b) = (ssm(reference, n), ssm(cover, n));
    let total: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / (n * n) as f64)
}

pub fn speed_report(tokens: usize, notes: usize, seconds: f64) -> Result<(f64, f64), MetricsError> {
    if seconds.is_nan() || seconds <= 0.0 {
        return Err(MetricsError::ZeroDuration);
    }
    Ok((tokens as f64 / seconds, notes as f64 / seconds))
}

pub fn evaluate_pair(reference: &Song, cover: &Song, timing: Option<Timing>) -> Result<MetricsReport, MetricsError> {
    let n = compared_bars(reference, cover)?;
    let (tok_per_sec, note_per_sec) = match timing {
        Some(t) => speed_report(t.tokens, t.notes, t.seconds)?,
        None => (0.0, 0.0),
    };
    Ok(MetricsReport {
        nde: note_density_error(reference, cover)?,
        oap: overlap_area(reference, cover, Element::Pitch)?,
        oad: overlap_area(reference, cover, Element::Duration)?,
        oav: overlap_area(reference, cover, Element::Velocity)?,
        ccs: chroma_similarity(reference, cover)?,
        gcs: grooving_similarity(reference, cover)?,
        ca: chord_accuracy(reference, cover)?,
        ssmd: ssm_distance(reference, cover)?,
        tok_per_sec,
        note_per_sec,
        n_bars_compared: n,
        truncated: reference.n_bars != cover.n_bars,
    })
}

/// Field-wise mean; `None` for an empty batch.
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Some(MetricsReport {
        nde: mean(|r| r.nde),
        oap: mean(|r| r.oap),
        oad: mean(|r| r.oad),
        oav: mean(|r| r.oav),
        ccs: mean(|r| r.ccs),
        gcs: mean(|r| r.gcs),
        ca: mean(|r| r.ca),
        ssmd: mean(|r| r.ssmd),
        tok_per_sec: mean(|r| r.tok_per_sec),
        note_per_sec: mean(|r| r.note_per_sec),
        n_bars_compared: reports.iter().map(|r| r.n_bars_compared).sum(),
        truncated: reports.iter().any(|r| r.truncated),
    })
}

pub const CSV_HEADER: &str = "name,nde,oap,oad,oav,ccs,gcs,ca,ssmd,tok_per_sec,note_per_sec,n_bars";

impl MetricsReport {
    fn values(&self) -> [(&'static str, f64); 10] {
        [
            ("nde", self.nde),
            ("oap", self.oap),
            ("oad", self.oad),
            ("oav", self.oav),
            ("ccs", self.ccs),
            ("gcs", self.gcs),
            ("ca", self.ca),
            ("ssmd", self.ssmd),
            ("tok_per_sec", self.tok_per_sec),
            ("note_per_sec", self.note_per_sec),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.values() {
            writeln!(s, "{k} = {v:.6}").unwrap();
        }
        writeln!(s, "n_bars_compared = {}", self.n_bars_compared).unwrap();
        writeln!(s, "truncated = {}", self.truncated).unwrap();
        s
    }

    pub fn csv_row(&self, name: &str) -> String {
        let mut s = name.replace(',', "_");
        for (_, v) in self.values() {
            write!(s, ",{v:.6}").unwrap();
        }
        write!(s, ",{}", self.n_bars_compared).unwrap();
        s
    }

    /// Whether every metric lies in its declared range.
    pub fn in_range(&self) -> bool {
        let unit = [self.oap, self.oad, self.oav, self.ccs, self.gcs, self.ca];
        unit.iter().all(|x| (0.0..=1.0).contains(x))
            && self.nde >= 0.0
            && (0.0..=2.0).contains(&self.ssmd)
            && self.tok_per_sec >= 0.0
            && self.note_per_sec >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{Instrument, Track, TICKS_PER_BAR};
    use proptest::prelude::*;

    fn song(tracks: Vec<(Instrument, Vec<(u32, u8)>)>, n_bars: usize) -> Song {
        Song::new(
            tracks
                .into_iter()
                .map(|(inst, notes)| Track::new(inst, notes.into_iter().map(|(o, p)| Note::new(o, p, 12, 80)).collect()))
                .collect(),
            n_bars,
        )
    }

    #[test]
    fn density_error_by_hand() {
        let r = song(vec![(Instrument::Piano, vec![(0, 60), (12, 60), (24, 60), (36, 60), (192, 60), (204, 60), (216, 60), (228, 60)])], 2);
        let empty = song(vec![], 2);
        assert_eq!(note_density_error(&r, &r).unwrap(), 0.0);
        assert!((note_density_error(&r, &empty).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(note_density_error(&empty, &empty).unwrap(), 0.0);
        assert_eq!(note_density_error(&song(vec![], 0), &r), Err(MetricsError::ZeroBars));
    }

    #[test]
    fn pitch_overlap_by_hand() {
        let r = song(vec![(Instrument::Piano, vec![(0, 60), (12, 60), (24, 64)])], 1);
        let c = song(vec![(Instrument::Piano, vec![(0, 60), (12, 64), (24, 64)])], 1);
        assert!((overlap_area(&r, &c, Element::Pitch).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let d = song(vec![(Instrument::Piano, vec![(0, 61)])], 1);
        assert_eq!(overlap_area(&r, &d, Element::Pitch).unwrap(), 0.0);
        let empty = song(vec![], 1);
        assert_eq!(overlap_area(&empty, &empty, Element::Velocity).unwrap(), 1.0);
        assert_eq!(overlap_area(&r, &empty, Element::Duration).unwrap(), 0.0);
    }

    #[test]
    fn drums_do_not_move_pitch_or_velocity_overlap() {
        let r = song(vec![(Instrument::Piano, vec![(0, 60), (48, 67)])], 1);
        let mut c = song(vec![(Instrument::Piano, vec![(0, 60), (96, 64)])], 1);
        let (p, v) = (overlap_area(&r, &c, Element::Pitch).unwrap(), overlap_area(&r, &c, Element::Velocity).unwrap());
        c.tracks.push(Track::new(Instrument::Drum, vec![Note::new(0, 36, 12, 127), Note::new(24, 38, 12, 10)]));
        assert_eq!(overlap_area(&r, &c, Element::Pitch).unwrap(), p);
        assert_eq!(overlap_area(&r, &c, Element::Velocity).unwrap(), v);
    }

    #[test]
    fn chroma_and_groove_by_hand() {
        let c_only = song(vec![(Instrument::Piano, vec![(0, 60)])], 1);
        let fs_only = song(vec![(Instrument::Piano, vec![(0, 66)])], 1);
        assert_eq!(chroma_similarity(&c_only, &fs_only).unwrap(), 0.0);
        assert_eq!(chroma_similarity(&c_only, &c_only).unwrap(), 1.0);
        // onsets on every other 16th versus only the downbeat: 1 / √8
        let step = TICKS_PER_BAR / 16;
        let alternating = song(vec![(Instrument::Drum, (0..8).map(|k| (2 * k * step, 36)).collect())], 1);
        let downbeat = song(vec![(Instrument::Drum, vec![(0, 36)])], 1);
        let g = grooving_similarity(&alternating, &downbeat).unwrap();
        assert!((g - 1.0 / 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn chord_accuracy_transposition_and_halves() {
        let triad = |root: u8, bar: u32| (0..4u32).flat_map(move |beat| [0u8, 4, 7].map(|i| (bar * TICKS_PER_BAR + beat * 48, root + i)));
        let r = song(vec![(Instrument::Piano, triad(60, 0).chain(triad(65, 1)).collect())], 2);
        let up = song(vec![(Instrument::Piano, triad(61, 0).chain(triad(66, 1)).collect())], 2);
        let half = song(vec![(Instrument::Piano, triad(60, 0).chain(triad(67, 1)).collect())], 2);
        assert_eq!(chord_accuracy(&r, &r).unwrap(), 1.0);
        assert_eq!(chord_accuracy(&r, &up).unwrap(), 0.0);
        assert_eq!(chord_accuracy(&r, &half).unwrap(), 0.5);
    }

    #[test]
    fn ssm_distance_closed_form() {
        let same: Vec<(u32, u8)> = (0..4).map(|b| (b * TICKS_PER_BAR, 60)).collect();
        let orthogonal: Vec<(u32, u8)> = (0..4).map(|b| (b * TICKS_PER_BAR, 60 + b as u8)).collect();
        let r = song(vec![(Instrument::Piano, same)], 4);
        let c = song(vec![(Instrument::Piano, orthogonal)], 4);
        assert!((ssm_distance(&r, &c).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(ssm_distance(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn ssm_distance_grows_with_corruption() {
        let r = song(vec![(Instrument::Piano, (0..6).map(|b| (b * TICKS_PER_BAR, 60)).collect())], 6);
        let mut last = 0.0;
        for k in 0..=6u32 {
            let notes = (0..6).map(|b| (b * TICKS_PER_BAR, if b < k { 61 + b as u8 } else { 60 })).collect();
            let d = ssm_distance(&r, &song(vec![(Instrument::Piano, notes)], 6)).unwrap();
            assert!(d >= last - 1e-12);
            last = d;
        }
    }

    #[test]
    fn speed_and_batch_mean() {
        assert_eq!(speed_report(1000, 300, 2.0).unwrap(), (500.0, 150.0));
        assert_eq!(speed_report(1, 1, 0.0), Err(MetricsError::ZeroDuration));
        let a = song(vec![(Instrument::Piano, vec![(0, 60), (48, 64)])], 1);
        let b = song(vec![(Instrument::Piano, vec![(0, 60)])], 1);
        let c = song(vec![(Instrument::Piano, vec![(0, 62)])], 1);
        let reports: Vec<MetricsReport> =
            [(&a, &a), (&a, &b), (&a, &c)].iter().map(|(x, y)| evaluate_pair(x, y, None).unwrap()).collect();
        // hand values: nde 0, 1/2, 1/2 and oap 1, 1/2, 0
        let m = mean_report(&reports).unwrap();
        assert!((m.nde - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.oap - 0.5).abs() < 1e-12);
        assert_eq!(m.n_bars_compared, 3);
        assert!(mean_report(&[]).is_none());
        assert!(m.to_text().contains("oap = 0.500000"));
        assert_eq!(m.csv_row("x").split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn bar_mismatch_truncates() {
        let a = song(vec![(Instrument::Piano, vec![(0, 60), (200, 64)])], 2);
        let b = song(vec![(Instrument::Piano, vec![(0, 60)])], 1);
        let r = evaluate_pair(&a, &b, None).unwrap();
        assert!(r.truncated);
        assert_eq!(r.n_bars_compared, 1);
        assert_eq!(r.oap, 1.0);
    }

    fn arb_song() -> impl Strategy<Value = Song> {
        let note = (0u32..4 * TICKS_PER_BAR, 0u8..128, 1u32..200, 1u8..128);
        let track = (0usize..6, prop::collection::vec(note, 0..20));
        prop::collection::vec(track, 0..4).prop_map(|ts| {
            let tracks = ts
                .into_iter()
                .map(|(i, ns)| {
                    let mut notes: Vec<Note> = ns.into_iter().map(|(o, p, d, v)| Note::new(o, p, d, v)).collect();
                    notes.sort_by_key(|n| (n.onset, n.pitch));
                    Track::new(Instrument::ALL[i], notes)
                })
                .collect();
            Song::new(tracks, 4)
        })
    }

    proptest! {
        #[test]
        fn ranges_and_symmetry(a in arb_song(), b in arb_song()) {
            let ab = evaluate_pair(&a, &b, None).unwrap();
            let ba = evaluate_pair(&b, &a, None).unwrap();
            prop_assert!(ab.in_range());
            for (x, y) in [(ab.oap, ba.oap), (ab.oad, ba.oad), (ab.oav, ba.oav), (ab.ccs, ba.ccs), (ab.gcs, ba.gcs), (ab.ssmd, ba.ssmd)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let aa = evaluate_pair(&a, &a, None).unwrap();
            prop_assert_eq!((aa.nde, aa.ssmd), (0.0, 0.0));
            prop_assert_eq!([aa.oap, aa.oad, aa.oav, aa.ccs, aa.gcs, aa.ca], [1.0; 6]);
        }
    }
}
