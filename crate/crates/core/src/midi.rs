//! Standard MIDI File ingestion and goal key-state trajectories.
//!
//! Parsing flattens every track of a format 0 or 1 file into a single note
//! list with absolute times in seconds. Ticks are converted through a global
//! tempo map built from all `Set Tempo` meta events (default 120 bpm).
//!
//! Pairing rules:
//!  - a note-on with velocity 0 is a note-off
//!  - overlapping notes on the same (channel, pitch) are closed first-in first-out
//!  - notes still sounding at the end of their track are closed at the track's last tick
//!  - zero-length notes are dropped
//!
//! Controllers (including the sustain pedal), program changes and sysex are skipped.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::{key_for_pitch, KeyFrame, NUM_KEYS};

/// Default tempo in microseconds per quarter note.
pub const DEFAULT_TEMPO_US: u32 = 500_000;
/// Default control rate in Hz.
pub const DEFAULT_CONTROL_RATE_HZ: f64 = 20.0;
/// Default lookahead window, in frames.
pub const DEFAULT_LOOKAHEAD: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated chunk: {0}")]
    TruncatedChunk(String),
    #[error("unsupported format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    UnsupportedDivision,
    #[error("invalid event at byte {offset}: {reason}")]
    InvalidEvent { offset: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub pitch: u8,
    pub onset_s: f64,
    pub offset_s: f64,
    pub velocity: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoEvent {
    pub tick: u64,
    pub us_per_quarter: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidiSong {
    pub ticks_per_quarter: u16,
    pub tempo_events: Vec<TempoEvent>,
    pub notes: Vec<Note>,
}

impl MidiSong {
    /// Builds a song directly from notes, sorting them by onset.
    pub fn from_notes(mut notes: Vec<Note>) -> Self {
        sort_notes(&mut notes);
        MidiSong {
            ticks_per_quarter: 480,
            tempo_events: vec![TempoEvent {
                tick: 0,
                us_per_quarter: DEFAULT_TEMPO_US,
            }],
            notes,
        }
    }

    /// Time of the last note-off in seconds; zero for an empty song.
    pub fn duration_s(&self) -> f64 {
        self.notes.iter().map(|n| n.offset_s).fold(0.0, f64::max)
    }
}

fn sort_notes(notes: &mut [Note]) {
    notes.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset_s.total_cmp(&b.offset_s))
    });
}

/// Piecewise-constant tempo map from ticks to seconds.
#[derive(Debug, Clone)]
pub struct TempoMap {
    tpq: f64,
    // (start tick, seconds at start tick, us per quarter)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    pub fn new(ticks_per_quarter: u16, events: &[TempoEvent]) -> Self {
        let tpq = ticks_per_quarter as f64;
        let mut sorted = events.to_vec();
        sorted.sort_by_key(|e| e.tick);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        for e in sorted {
            let (tick, secs, tempo) = *segments.last().unwrap();
            let at = secs + (e.tick - tick) as f64 * tempo as f64 / (tpq * 1e6);
            if e.tick == tick {
                segments.pop();
            }
            segments.push((e.tick, at, e.us_per_quarter));
        }
        TempoMap { tpq, segments }
    }

    pub fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (start, secs, tempo) = self.segments[idx];
        secs + (tick - start) as f64 * tempo as f64 / (self.tpq * 1e6)
    }

    /// Nearest tick for a time in seconds.
    pub fn ticks(&self, seconds: f64) -> u64 {
        let idx = self
            .segments
            .partition_point(|s| s.1 <= seconds)
            .saturating_sub(1);
        let (start, secs, tempo) = self.segments[idx];
        let delta = (seconds - secs) * self.tpq * 1e6 / tempo as f64;
        start + delta.max(0.0).round() as u64
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self, ctx: &str) -> Result<u8, MidiError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| MidiError::TruncatedChunk(ctx.to_string()))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8], MidiError> {
        if self.bytes.len() - self.pos < n {
            return Err(MidiError::TruncatedChunk(ctx.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn vlq(&mut self, ctx: &str) -> Result<u32, MidiError> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8(ctx)?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::InvalidEvent {
            offset: self.pos,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

#[derive(Debug, Clone, Copy)]
enum NoteEvent {
    On { tick: u64, channel: u8, pitch: u8, velocity: u8 },
    Off { tick: u64, channel: u8, pitch: u8 },
}

struct Track {
    notes: Vec<NoteEvent>,
    end_tick: u64,
}

fn parse_track(data: &[u8], base: usize, tempos: &mut Vec<TempoEvent>) -> Result<Track, MidiError> {
    let mut r = Reader { bytes: data, pos: 0 };
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut notes = Vec::new();
    while r.pos < data.len() {
        tick += r.vlq("track event delta")? as u64;
        let start = r.pos;
        let first = r.u8("event status")?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    return Err(MidiError::InvalidEvent {
                        offset: base + start,
                        reason: "data byte without running status".into(),
                    })
                }
            }
        };
        match status {
            0xff => {
                let kind = r.u8("meta type")?;
                let len = r.vlq("meta length")? as usize;
                let payload = r.take(len, "meta payload")?;
                match kind {
                    0x51 if len == 3 => tempos.push(TempoEvent {
                        tick,
                        us_per_quarter: u32::from_be_bytes([0, payload[0], payload[1], payload[2]]),
                    }),
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq("sysex length")? as usize;
                r.take(len, "sysex payload")?;
                running = None;
            }
            0xf1..=0xfe => {
                return Err(MidiError::InvalidEvent {
                    offset: base + start,
                    reason: format!("system message 0x{status:02x} in file"),
                })
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let mut first_data = first_data;
                let mut next = |r: &mut Reader| -> Result<u8, MidiError> {
                    match first_data.take() {
                        Some(b) => Ok(b),
                        None => r.u8("channel message data"),
                    }
                };
                match status & 0xf0 {
                    0x80 => {
                        let pitch = next(&mut r)?;
                        next(&mut r)?;
                        notes.push(NoteEvent::Off { tick, channel, pitch });
                    }
                    0x90 => {
                        let pitch = next(&mut r)?;
                        let velocity = next(&mut r)?;
                        notes.push(if velocity == 0 {
                            NoteEvent::Off { tick, channel, pitch }
                        } else {
                            NoteEvent::On { tick, channel, pitch, velocity }
                        });
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        next(&mut r)?;
                        next(&mut r)?;
                    }
                    0xc0 | 0xd0 => {
                        next(&mut r)?;
                    }
                    _ => unreachable!("status byte has the high bit set"),
                }
            }
        }
    }
    Ok(Track { notes, end_tick: tick })
}

/// Parses a format 0 or 1 Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiSong, MidiError> {
    if bytes.len() < 8 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd signature".into()));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header length {header_len} < 6"
        )));
    }
    if bytes.len() < 8 + header_len {
        return Err(MidiError::TruncatedChunk("MThd".into()));
    }
    let format = be_u16(&bytes[8..10]);
    let ntracks = be_u16(&bytes[10..12]);
    let division = be_u16(&bytes[12..14]);
    match format {
        0 | 1 => {}
        f => return Err(MidiError::UnsupportedFormat(f)),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedDivision);
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter".into()));
    }

    let mut pos = 8 + header_len;
    let mut tempos = Vec::new();
    let mut tracks = Vec::new();
    while tracks.len() < ntracks as usize && pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(MidiError::TruncatedChunk("chunk header".into()));
        }
        let id = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        if bytes.len() - body < len {
            return Err(MidiError::TruncatedChunk(format!(
                "{} declares {len} bytes, {} available",
                String::from_utf8_lossy(id),
                bytes.len() - body
            )));
        }
        if id == b"MTrk" {
            tracks.push(parse_track(&bytes[body..body + len], body, &mut tempos)?);
        }
        pos = body + len;
    }
    if tracks.len() < ntracks as usize {
        return Err(MidiError::TruncatedChunk(format!(
            "header declares {ntracks} tracks, found {}",
            tracks.len()
        )));
    }

    // Stable sort keeps file order for same-tick tempo events; the last one wins.
    tempos.sort_by_key(|e| e.tick);
    let map = TempoMap::new(division, &tempos);
    let mut notes = Vec::new();
    for track in &tracks {
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        let close = |pitch: u8, on: u64, off: u64, velocity: u8, notes: &mut Vec<Note>| {
            if off > on {
                notes.push(Note {
                    pitch,
                    onset_s: map.seconds(on),
                    offset_s: map.seconds(off),
                    velocity,
                });
            }
        };
        for ev in &track.notes {
            match *ev {
                NoteEvent::On { tick, channel, pitch, velocity } => {
                    open.entry((channel, pitch)).or_default().push_back((tick, velocity));
                }
                NoteEvent::Off { tick, channel, pitch } => {
                    if let Some((on, vel)) = open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                        close(pitch, on, tick, vel, &mut notes);
                    }
                }
            }
        }
        let mut dangling: Vec<_> = open.into_iter().collect();
        dangling.sort_by_key(|(k, _)| *k);
        for ((_, pitch), queue) in dangling {
            for (on, vel) in queue {
                close(pitch, on, track.end_tick, vel, &mut notes);
            }
        }
    }
    sort_notes(&mut notes);
    Ok(MidiSong {
        ticks_per_quarter: division,
        tempo_events: tempos,
        notes,
    })
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
        out.push(buf[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Serializes a song as a single-track format 0 file on channel 0.
///
/// Note times are rounded to the nearest tick of the song's tempo map.
pub fn write_smf(song: &MidiSong) -> Vec<u8> {
    let map = TempoMap::new(song.ticks_per_quarter, &song.tempo_events);
    // (tick, order, bytes); offs sort before ons at the same tick.
    let mut events: Vec<(u64, u8, Vec<u8>)> = Vec::new();
    for t in &song.tempo_events {
        let v = t.us_per_quarter.to_be_bytes();
        events.push((t.tick, 0, vec![0xff, 0x51, 0x03, v[1], v[2], v[3]]));
    }
    for n in &song.notes {
        events.push((map.ticks(n.offset_s), 1, vec![0x80, n.pitch, 0x40]));
        events.push((map.ticks(n.onset_s), 2, vec![0x90, n.pitch, n.velocity.max(1)]));
    }
    events.sort_by_key(|e| (e.0, e.1));
    let mut track = Vec::new();
    let mut last = 0u64;
    for (tick, _, bytes) in events {
        push_vlq(&mut track, (tick - last) as u32);
        track.extend_from_slice(&bytes);
        last = tick;
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&song.ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

/// Per-frame key states sampled at a fixed control rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTrajectory {
    pub control_rate_hz: f64,
    pub frames: Vec<KeyFrame>,
    /// Notes skipped because their pitch lies off the 88-key range.
    #[serde(default)]
    pub dropped_notes: usize,
}

impl GoalTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn active_key_count(&self) -> usize {
        self.frames.iter().map(|f| f.count()).sum()
    }

    /// Keys that are active in at least one frame.
    pub fn used_keys(&self) -> KeyFrame {
        self.frames.iter().fold(KeyFrame::EMPTY, |acc, f| acc.union(*f))
    }
}

/// `ceil(x)` that treats values within 1e-9 of an integer as that integer.
pub(crate) fn ceil_snapped(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// First frame index `i` with `i / rate >= t`.
fn first_frame_at_or_after(t: f64, rate: f64) -> usize {
    let mut i = (t * rate).ceil().max(0.0) as usize;
    while (i as f64) / rate < t {
        i += 1;
    }
    while i > 0 && ((i - 1) as f64) / rate >= t {
        i -= 1;
    }
    i
}

/// Samples the song's key states on the half-open note intervals `[onset, offset)`.
pub fn to_goal_trajectory(song: &MidiSong, rate_hz: f64) -> GoalTrajectory {
    assert!(rate_hz > 0.0, "control rate must be positive");
    let n_frames = ceil_snapped(song.duration_s() * rate_hz);
    let mut frames = vec![KeyFrame::EMPTY; n_frames];
    let mut dropped = 0;
    for note in &song.notes {
        let Some(key) = key_for_pitch(note.pitch) else {
            dropped += 1;
            continue;
        };
        let start = first_frame_at_or_after(note.onset_s, rate_hz);
        let end = first_frame_at_or_after(note.offset_s, rate_hz).min(n_frames);
        for frame in frames.iter_mut().take(end).skip(start) {
            frame.set(key);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} notes outside the 88-key range");
    }
    GoalTrajectory {
        control_rate_hz: rate_hz,
        frames,
        dropped_notes: dropped,
    }
}

/// `L` consecutive goal frames starting at the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalObservation {
    pub window: Vec<KeyFrame>,
    pub lookahead: usize,
}

impl GoalObservation {
    /// Row-major `L x 88` 0/1 encoding.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.window.len() * NUM_KEYS);
        for f in &self.window {
            out.extend_from_slice(&f.to_dense());
        }
        out
    }
}

/// Frames `[frame_index, frame_index + lookahead)`, zero-padded past the end.
pub fn goal_window(traj: &GoalTrajectory, frame_index: usize, lookahead: usize) -> GoalObservation {
    assert!(lookahead >= 1, "lookahead must be at least one frame");
    let window = (frame_index..frame_index + lookahead)
        .map(|i| traj.frames.get(i).copied().unwrap_or(KeyFrame::EMPTY))
        .collect();
    GoalObservation { window, lookahead }
}
