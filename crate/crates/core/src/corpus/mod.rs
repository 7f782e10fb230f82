//! Transcripts, chapter segmentation, labeled windows.

mod labels;
mod segment;
mod transcript;
mod windows;

use std::collections::BTreeMap;

pub use labels::{
    chapter_counts, join_and_normalize_labels, normalized_cell_labels, read_ratings,
    write_ratings, CellKey, RatingRecord,
};
pub use segment::{equipartition_chapters, stage_split, word_boundaries, ChapterRef, Segmentation};
pub use transcript::{
    parse_transcript, parse_transcripts, read_transcripts, split_sentences, write_transcripts,
    Sentence, SpeakerRole, Transcript, Utterance,
};
pub use windows::{
    build_windows, read_windows, write_windows, LessonSegmentation, NestingKey, PrefixUnit,
    Window, WindowConfig,
};

use crate::error::Result;
use crate::items::{Instrument, ItemRegistry};

/// Number of lesson stages (beginning, middle, end).
pub const N_STAGES: u32 = 3;

/// Segments one lesson under every selected instrument that has ratings for
/// it. Chapter counts come from the ratings; stages split them evenly.
pub fn segment_lesson(
    t: &Transcript,
    counts: &BTreeMap<(String, Instrument), u32>,
    instruments: &[Instrument],
) -> Result<LessonSegmentation> {
    let mut segs = LessonSegmentation::default();
    for &inst in instruments {
        let Some(&k) = counts.get(&(t.lesson_id.clone(), inst)) else {
            continue;
        };
        let seg = equipartition_chapters(t, &stage_split(k, N_STAGES))?;
        match inst {
            Instrument::Mqi => segs.mqi = Some(seg),
            Instrument::Class => segs.class = Some(seg),
        }
    }
    Ok(segs)
}

/// Segments, windows and labels a whole corpus. Lessons without ratings for
/// any selected instrument are skipped with a warning.
pub fn build_labeled_windows(
    lessons: &[Transcript],
    ratings: &[RatingRecord],
    items: &ItemRegistry,
    instruments: &[Instrument],
    cfg: &WindowConfig,
) -> Result<Vec<Window>> {
    let counts = chapter_counts(ratings, items)?;
    let mut out = Vec::new();
    for t in lessons {
        let segs = segment_lesson(t, &counts, instruments)?;
        if segs.primary().is_none() {
            log::warn!("lesson {} has no ratings for the selected instruments", t.lesson_id);
            continue;
        }
        out.extend(build_windows(t, &segs, cfg)?);
    }
    // Unselected instruments have no chapters, so their items stay masked.
    join_and_normalize_labels(&mut out, ratings, items)?;
    Ok(out)
}
