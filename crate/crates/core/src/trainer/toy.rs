//! Small synthetic songs for smoke runs and tests.

use crate::midi::{to_goal_trajectory, GoalTrajectory, MidiSong, Note, DEFAULT_CONTROL_RATE_HZ};

const VELOCITY: u8 = 80;

fn note(pitch: u8, onset_s: f64, dur_s: f64) -> Note {
    Note {
        pitch,
        onset_s,
        offset_s: onset_s + dur_s,
        velocity: VELOCITY,
    }
}

/// Ten seconds of 0.4 s notes cycling over C4, D4 and E4 (keys 39, 41, 43).
pub fn three_key_song() -> MidiSong {
    let cycle = [60, 62, 64, 62];
    MidiSong::from_notes((0..19).map(|i| note(cycle[i % cycle.len()], 0.5 + 0.5 * i as f64, 0.4)).collect())
}

/// Eight seconds over C4, D4, E4, F4 and G4 (keys 39, 41, 43, 44, 46),
/// with single notes and two-note chords split across the hands.
pub fn five_key_song() -> MidiSong {
    let mut notes = Vec::new();
    let pattern: [&[u8]; 8] = [&[60], &[64], &[67], &[65], &[60, 67], &[62], &[64, 65], &[62, 67]];
    for i in 0..15 {
        for &p in pattern[i % pattern.len()] {
            notes.push(note(p, 0.5 + 0.5 * i as f64, 0.4));
        }
    }
    MidiSong::from_notes(notes)
}

/// Named toy songs as goal trajectories at the default control rate.
pub fn toy_suite() -> Vec<(String, GoalTrajectory)> {
    vec![
        ("three_key".to_string(), to_goal_trajectory(&three_key_song(), DEFAULT_CONTROL_RATE_HZ)),
        ("five_key".to_string(), to_goal_trajectory(&five_key_song(), DEFAULT_CONTROL_RATE_HZ)),
    ]
}
