use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bandcontrol::cli::stats_table;
use bandcontrol::metrics::{evaluate_pair, mean_report};
use bandcontrol::score::{Instrument, Note, Song, Track};
use bandcontrol::synth::synth_corpus;
use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bandcontrol")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn last_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().last().unwrap().to_string()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "midi", "--n", "6", "--seed", "4"]);
    ok(d, &["preprocess", "--in", "midi", "--out", "songs", "--min-bars", "4", "--max-bars", "4", "--stride", "8"]);
    assert!(d.join("songs/MANIFEST").exists());
    ok(d, &["tokenize", "--in", "songs", "--out", "corpus.tok", "--split", "train"]);
    assert!(d.join("corpus.vocab").exists());
    ok(d, &["bpe-train", "--corpus", "corpus.tok", "--vocab-size", "320", "--out", "merges.txt"]);
    ok(d, &["features", "--in", "songs", "--out", "feats"]);
    ok(d, &["train", "--in", "songs", "--out", "model.ckpt", "--steps", "2", "--vq-steps", "2", "--bpe", "merges.txt"]);
    assert!(d.join("model.ckpt.vq").exists() && d.join("model.ckpt.manifest").exists());

    let reference = "songs/synth_0000_w000.song";
    for out in ["a/synth_0000_w000.mid", "b/synth_0000_w000.mid"] {
        ok(d, &["generate", "--checkpoint", "model.ckpt", "--reference", reference, "--out", out, "--seed", "5", "--bpe", "merges.txt", "--max-len", "48"]);
    }
    let a = fs::read(d.join("a/synth_0000_w000.tokens")).unwrap();
    assert_eq!(a, fs::read(d.join("b/synth_0000_w000.tokens")).unwrap());
    let generated = Song::from_text(&fs::read_to_string(d.join("a/synth_0000_w000.song")).unwrap()).unwrap();
    assert_eq!(generated.n_bars, 4);

    ok(d, &["evaluate", "--ref", "songs", "--cov", "songs", "--out", "self.csv"]);
    let mean = last_line(&d.join("self.csv"));
    let fields: Vec<&str> = mean.split(',').collect();
    assert_eq!(fields[..2], ["MEAN", "0.000000"]);
    assert!(fields[2..8].iter().all(|f| *f == "1.000000"), "{mean}");
    assert_eq!(fields[8], "0.000000");
}

#[test]
fn preprocess_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "midi", "--n", "3", "--seed", "9"]);
    ok(d, &["preprocess", "--in", "midi", "--out", "x"]);
    ok(d, &["preprocess", "--in", "midi", "--out", "y"]);
    let names: Vec<_> = fs::read_dir(d.join("x")).unwrap().map(|e| e.unwrap().file_name()).filter(|n| n != "MANIFEST").collect();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(d.join("x").join(&n)).unwrap(), fs::read(d.join("y").join(&n)).unwrap());
    }
}

fn three_four_midi() -> Vec<u8> {
    let ev = |delta: u32, kind| TrackEvent { delta: u28::new(delta), kind };
    let note = |on: bool, key: u8| TrackEventKind::Midi {
        channel: u4::new(0),
        message: if on {
            MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(90) }
        } else {
            MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) }
        },
    };
    let track = vec![
        ev(0, TrackEventKind::Meta(MetaMessage::TimeSignature(3, 2, 24, 8))),
        ev(0, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(500_000)))),
        ev(0, note(true, 60)),
        ev(480, note(false, 60)),
        ev(0, TrackEventKind::Meta(MetaMessage::EndOfTrack)),
    ];
    let smf = Smf { header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(480))), tracks: vec![track] };
    let mut bytes = Vec::new();
    smf.write_std(&mut bytes).unwrap();
    bytes
}

#[test]
fn rejected_reference_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("waltz.mid"), three_four_midi()).unwrap();
    ok(d, &["synth", "--out", "midi", "--n", "2", "--seed", "1"]);
    ok(d, &["preprocess", "--in", "midi", "--out", "songs", "--min-bars", "4", "--max-bars", "4", "--stride", "16"]);
    ok(d, &["train", "--in", "songs", "--out", "m.ckpt", "--steps", "1", "--vq-steps", "1"]);
    let out = run(d, &["generate", "--checkpoint", "m.ckpt", "--reference", "waltz.mid", "--out", "gen/w.mid"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("time signature"));
    assert!(!d.join("gen").exists());
}

fn write_songs(dir: &Path, songs: &[(&str, &Song)]) {
    fs::create_dir_all(dir).unwrap();
    for (name, s) in songs {
        fs::write(dir.join(format!("{name}.song")), s.to_text()).unwrap();
    }
}

#[test]
fn evaluate_reports_missing_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let c = synth_corpus(2, 3);
    write_songs(&d.join("ref"), &[("one", &c[0]), ("two", &c[1])]);
    write_songs(&d.join("cov"), &[("one", &c[0])]);
    let out = run(d, &["evaluate", "--ref", "ref", "--cov", "cov", "--out", "e.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("two.song"));
    assert!(!d.join("e.csv").exists());
}

#[test]
fn evaluate_mean_row_over_three_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let c = synth_corpus(4, 8);
    write_songs(&d.join("ref"), &[("a", &c[0]), ("b", &c[1]), ("c", &c[2])]);
    write_songs(&d.join("cov"), &[("a", &c[0]), ("b", &c[3]), ("c", &c[1])]);
    ok(d, &["evaluate", "--ref", "ref", "--cov", "cov", "--out", "e.csv"]);
    let reports: Vec<_> = [(0, 0), (1, 3), (2, 1)].iter().map(|&(r, v)| evaluate_pair(&c[r], &c[v], None).unwrap()).collect();
    let mean = mean_report(&reports).unwrap();
    let csv = fs::read_to_string(d.join("e.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(last_line(&d.join("e.csv")), mean.csv_row("MEAN"));
    let hand = (reports[0].oap + reports[1].oap + reports[2].oap) / 3.0;
    assert!((mean.oap - hand).abs() < 1e-12);
}

#[test]
fn stats_table_and_missing_input() {
    let table = stats_table(&synth_corpus(3, 2), None).unwrap();
    assert!(avg_of(&table, "remi_track") < avg_of(&table, "remi_plus"));

    let melody = Song::new(vec![Track::new(Instrument::SquareSynth, (0..16).map(|k| Note::new(k * 48, 72, 48, 80)).collect())], 4);
    let table = stats_table(&[melody], None).unwrap();
    let (track, plus) = (avg_of(&table, "remi_track"), avg_of(&table, "remi_plus"));
    // one instrument token per note against three framing tokens per track
    assert_eq!(plus - track, 16.0 - 3.0);

    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = run(tmp.path(), &["stats", "--corpus", "empty"]);
    assert_eq!(out.status.code(), Some(2));
}

fn avg_of(table: &str, repr: &str) -> f64 {
    table.lines().find(|l| l.starts_with(repr)).unwrap().split_whitespace().last().unwrap().parse().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["preprocess", "--in", "x", "--out", "y", "--min-bars", "9", "--max-bars", "4"]).status.code(), Some(1));
}
