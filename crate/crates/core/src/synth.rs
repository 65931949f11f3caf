//! Seeded generator of small four-track pop songs for tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::score::{Instrument, Note, Song, Track, DRUM_DURATION, DRUM_VELOCITY, TICKS_PER_BAR};
use crate::tokenizer::{velocity_bin, velocity_from_bin};

const STEP: u32 = TICKS_PER_BAR / 16;
const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const PROGRESSIONS: [[usize; 4]; 6] = [[0, 4, 5, 3], [0, 5, 3, 4], [5, 3, 0, 4], [0, 3, 4, 4], [0, 0, 3, 4], [3, 4, 2, 5]];
const KICK: u8 = 36;
const SNARE: u8 = 38;
const HAT: u8 = 42;

const DRUM_GROOVES: [[&[u32]; 3]; 3] = [
    [&[0, 8], &[4, 12], &[0, 2, 4, 6, 8, 10, 12, 14]],
    [&[0, 6, 8], &[4, 12], &[0, 2, 4, 6, 8, 10, 12, 14]],
    [&[0, 3, 8, 11], &[4, 12], &[0, 2, 4, 6, 8, 10, 12, 14]],
];
const BASS_RHYTHMS: [&[u32]; 4] = [&[0, 8], &[0, 6, 8, 14], &[0, 4, 8, 12], &[0, 3, 6, 8, 12]];
const COMP_RHYTHMS: [&[u32]; 4] = [&[0, 8], &[0, 4, 8, 12], &[2, 6, 10, 14], &[0, 6, 12]];
const MELODY_RHYTHMS: [&[u32]; 4] = [&[0, 4, 6, 8, 12], &[0, 2, 4, 8, 10, 12], &[0, 3, 6, 8, 11, 14], &[0, 4, 8, 10, 12, 14]];

/// Velocities survive tokenization unchanged.
fn velocity(v: u8) -> u8 {
    velocity_from_bin(velocity_bin(v))
}

fn chord_pitches(root: i32, degree: usize, base: i32) -> [u8; 3] {
    [0, 2, 4].map(|k| {
        let d = degree + k;
        (base + root + MAJOR[d % 7] + 12 * (d / 7) as i32) as u8
    })
}

/// Note durations: up to the next onset in the bar, or the bar end.
fn durations(onsets: &[u32]) -> Vec<u32> {
    onsets.iter().enumerate().map(|(i, &o)| (onsets.get(i + 1).copied().unwrap_or(16) - o) * STEP).collect()
}

/// One song of `n_bars` bars with drums, bass, a comping instrument and a
/// lead melody.
pub fn synth_song(rng: &mut impl Rng, n_bars: usize) -> Song {
    let root = rng.gen_range(0..12);
    let prog = PROGRESSIONS.choose(rng).unwrap();
    let groove = DRUM_GROOVES.choose(rng).unwrap();
    let bass_rhythm = *BASS_RHYTHMS.choose(rng).unwrap();
    let comp_rhythm = *COMP_RHYTHMS.choose(rng).unwrap();
    let comp_inst = *[Instrument::Piano, Instrument::Guitar, Instrument::Strings].choose(rng).unwrap();
    let lead_rhythms: Vec<&[u32]> = (0..2).map(|_| *MELODY_RHYTHMS.choose(rng).unwrap()).collect();
    // a two-bar motif as scale steps above the chord root
    let motif: Vec<Vec<usize>> = lead_rhythms.iter().map(|r| r.iter().map(|_| rng.gen_range(0..5)).collect()).collect();
    let (bass_vel, comp_vel, lead_vel) = (velocity(rng.gen_range(80..100)), velocity(rng.gen_range(60..80)), velocity(rng.gen_range(85..110)));

    let (mut drums, mut bass, mut comp, mut lead) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for bar in 0..n_bars {
        let t0 = bar as u32 * TICKS_PER_BAR;
        let degree = prog[bar % 4];
        let fill = bar % 4 == 3 && rng.gen_bool(0.5);
        for (key, steps) in [KICK, SNARE, HAT].into_iter().zip(groove.iter()) {
            for &s in steps.iter() {
                drums.push(Note::new(t0 + s * STEP, key, DRUM_DURATION, DRUM_VELOCITY));
            }
        }
        if fill {
            for s in [13, 14, 15] {
                drums.push(Note::new(t0 + s * STEP, SNARE, DRUM_DURATION, DRUM_VELOCITY));
            }
        }
        let [b, _, fifth] = chord_pitches(root, degree, 36);
        for (k, (&s, d)) in bass_rhythm.iter().zip(durations(bass_rhythm)).enumerate() {
            let p = if k % 2 == 1 && rng.gen_bool(0.3) { fifth } else { b };
            bass.push(Note::new(t0 + s * STEP, p, d, bass_vel));
        }
        for (&s, d) in comp_rhythm.iter().zip(durations(comp_rhythm)) {
            for p in chord_pitches(root, degree, 60) {
                comp.push(Note::new(t0 + s * STEP, p, d, comp_vel));
            }
        }
        let phrase = bar % 2;
        let rhythm = lead_rhythms[phrase];
        for ((&s, d), &step) in rhythm.iter().zip(durations(rhythm)).zip(&motif[phrase]) {
            let vary = if rng.gen_bool(0.15) { 1 } else { 0 };
            let deg = degree + step + vary;
            let p = 72 + root + MAJOR[deg % 7] + 12 * (deg / 7) as i32;
            lead.push(Note::new(t0 + s * STEP, p as u8, d, lead_vel));
        }
    }
    let mut tracks = vec![
        Track::new(Instrument::Drum, drums),
        Track::new(Instrument::Bass, bass),
        Track::new(comp_inst, comp),
        Track::new(Instrument::SquareSynth, lead),
    ];
    tracks.iter_mut().for_each(Track::normalize_order);
    Song::new(tracks, n_bars)
}

/// `n` songs of 22 to 28 bars, reproducible from `seed`; every song passes
/// the corpus filter.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<Song> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let bars = rng.gen_range(22..=28);
            synth_song(&mut rng, bars)
        })
        .collect()
}
