use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TokenStreams;

/// Padding token for positions past the end of a file.
pub const PAD_TOKEN: u32 = 0;

/// One teacher-forced window of a file.
///
/// Row `i` reads the tuple at file position `start + i` and is scored on
/// the tuple at `start + i + 1`. Rows past the file end hold [`PAD_TOKEN`];
/// `loss_mask` is false for them and for the file's final tuple, which has
/// nothing to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub inputs: [Vec<u32>; 4],
    pub targets: [Vec<u32>; 4],
    pub loss_mask: Vec<bool>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    pub fn scored(&self) -> usize {
        self.loss_mask.iter().filter(|&&v| v).count()
    }

    pub fn padding(&self, file_len: usize) -> usize {
        (self.start + self.len()).saturating_sub(file_len)
    }

    pub fn input_refs(&self) -> [&[u32]; 4] {
        [&self.inputs[0], &self.inputs[1], &self.inputs[2], &self.inputs[3]]
    }

    pub fn target_refs(&self) -> [&[u32]; 4] {
        [&self.targets[0], &self.targets[1], &self.targets[2], &self.targets[3]]
    }
}

pub fn segment_count(file_len: usize, segment_len: usize) -> usize {
    file_len.div_ceil(segment_len)
}

/// Segment `index` of a file cut into windows of `segment_len`.
pub fn make_segment(file: &TokenStreams, index: usize, segment_len: usize) -> Segment {
    let n = file.len();
    let start = index * segment_len;
    let at = |s: usize, p: usize| {
        if p < n {
            file.stream(crate::codec::Stream::ALL[s])[p]
        } else {
            PAD_TOKEN
        }
    };
    Segment {
        start,
        inputs: std::array::from_fn(|s| (start..start + segment_len).map(|p| at(s, p)).collect()),
        targets: std::array::from_fn(|s| (start..start + segment_len).map(|p| at(s, p + 1)).collect()),
        loss_mask: (start..start + segment_len).map(|p| p + 1 < n).collect(),
    }
}

pub fn segment_file(file: &TokenStreams, segment_len: usize) -> Vec<Segment> {
    (0..segment_count(file.len(), segment_len))
        .map(|k| make_segment(file, k, segment_len))
        .collect()
}

/// What one batch lane processes at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneItem {
    pub file: usize,
    pub segment: usize,
    /// The lane starts a new file: its memory must be cleared first.
    pub reset: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LaneCursor {
    file: usize,
    segment: usize,
}

/// Feeds files to batch lanes in a seeded shuffled order, one segment per
/// lane per step. A lane walks its file front to back, then takes the next
/// file in the epoch order; each epoch reshuffles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentScheduler {
    seed: u64,
    segments_per_file: Vec<usize>,
    epoch: u64,
    next_in_order: usize,
    lanes: Vec<Option<LaneCursor>>,
}

impl SegmentScheduler {
    /// Files without segments are never scheduled. `None` when no file has
    /// one.
    pub fn new(segments_per_file: Vec<usize>, lanes: usize, seed: u64) -> Option<Self> {
        if lanes == 0 || segments_per_file.iter().all(|&c| c == 0) {
            return None;
        }
        Some(Self {
            seed,
            segments_per_file,
            epoch: 0,
            next_in_order: 0,
            lanes: vec![None; lanes],
        })
    }

    pub fn segments_per_file(&self) -> &[usize] {
        &self.segments_per_file
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// File visiting order of `epoch` (files without segments omitted).
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut files: Vec<usize> = (0..self.segments_per_file.len())
            .filter(|&f| self.segments_per_file[f] > 0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        files.shuffle(&mut rng);
        files
    }

    fn next_file(&mut self) -> usize {
        let order = self.order(self.epoch);
        if self.next_in_order >= order.len() {
            self.epoch += 1;
            self.next_in_order = 0;
            return self.next_file();
        }
        self.next_in_order += 1;
        order[self.next_in_order - 1]
    }

    pub fn next_batch(&mut self) -> Vec<LaneItem> {
        let mut out = Vec::with_capacity(self.lanes.len());
        for lane in 0..self.lanes.len() {
            let item = match self.lanes[lane] {
                Some(c) if c.segment + 1 < self.segments_per_file[c.file] => LaneItem {
                    file: c.file,
                    segment: c.segment + 1,
                    reset: false,
                },
                _ => LaneItem {
                    file: self.next_file(),
                    segment: 0,
                    reset: true,
                },
            };
            self.lanes[lane] = Some(LaneCursor {
                file: item.file,
                segment: item.segment,
            });
            out.push(item);
        }
        out
    }
}

/// The first `steps` batches a fresh scheduler produces over `files`.
pub fn segment_corpus(
    files: &[TokenStreams],
    segment_len: usize,
    batch: usize,
    seed: u64,
    steps: usize,
) -> Vec<Vec<LaneItem>> {
    let counts = files.iter().map(|f| segment_count(f.len(), segment_len)).collect();
    match SegmentScheduler::new(counts, batch, seed) {
        Some(mut s) => (0..steps).map(|_| s.next_batch()).collect(),
        None => Vec::new(),
    }
}
