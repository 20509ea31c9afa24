//! Visual-token selection rules and layered pruning schedules.

mod presets;
mod schedule;
mod select;

pub use presets::{preset, preset_names};
pub use schedule::{apply_schedule, select_tokens, PruneAction, PruneSchedule, RatioBasis, ScheduleRun, Strategy};
pub use select::{
    cosine_distances, duplication_pivots, duplication_scores, last_row_visual_attention, retained_count,
    select_attention_topk, select_low_duplication, select_maxmin_diversity, select_random, DUPLICATION_PIVOTS,
};
