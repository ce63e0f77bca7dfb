use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::imaging::{BinaryMask, Image};
use crate::synthcorpus::{subject_mask, PosterRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    GroundTruth,
    ColorThreshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub mask: BinaryMask,
    pub source: SegmentSource,
}

/// Ground-truth subject pixels when the record is known, otherwise
/// [`segment_by_color`] with an exact-match threshold.
pub fn segment_subject(record: Option<&PosterRecord>, image: &Image) -> SubjectMask {
    match record {
        Some(r) => SubjectMask {
            mask: subject_mask(r),
            source: SegmentSource::GroundTruth,
        },
        None => segment_by_color(image, 0),
    }
}

/// Largest 8-connected component of pixels whose colour differs from their
/// row's left border pixel by more than `tol` in some channel.
///
/// Backgrounds are constant along rows, so the border pixel is the
/// background colour of that row. Glyphs are separated by blank cell
/// columns and never merge into a component larger than the subject.
pub fn segment_by_color(image: &Image, tol: u8) -> SubjectMask {
    let (w, h) = image.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let mut fg = vec![false; wu * hu];
    for y in 0..h {
        let bg = image.get_pixel(0, y).0;
        for x in 0..w {
            let p = image.get_pixel(x, y).0;
            fg[y as usize * wu + x as usize] = (0..3).any(|c| p[c].abs_diff(bg[c]) > tol);
        }
    }

    let mut label = vec![usize::MAX; wu * hu];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = vec![start];
        label[start] = start;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % wu) as i64, (i / wu) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= wu as i64 || ny >= hu as i64 {
                        continue;
                    }
                    let j = ny as usize * wu + nx as usize;
                    if fg[j] && label[j] == usize::MAX {
                        label[j] = start;
                        comp.push(j);
                        queue.push_back(j);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }

    let mut mask = BinaryMask::new(w, h);
    for i in best {
        mask.bits[i] = true;
    }
    SubjectMask {
        mask,
        source: SegmentSource::ColorThreshold,
    }
}
