//! Key-layer selection, student-to-teacher layer mapping and granularity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spans::Granularity;

/// `{n_s - j*k : j = 0..m}`, ascending.
pub fn select_layers(n_s: usize, k: usize, m: usize) -> Result<Vec<usize>> {
    if k == 0 || m == 0 {
        return Err(Error::Schedule(format!("stride ({k}) and budget ({m}) must be positive")));
    }
    if (m - 1).checked_mul(k).map_or(true, |reach| reach >= n_s) {
        return Err(Error::Schedule(format!("budget {m} at stride {k} exceeds {n_s} student layers")));
    }
    Ok((0..m).rev().map(|j| n_s - j * k).collect())
}

/// Proportional image `floor(l_s * n_t / n_s)`, at least 1.
pub fn map_layer(l_s: usize, n_s: usize, n_t: usize) -> Result<usize> {
    if l_s == 0 || l_s > n_s {
        return Err(Error::LayerOutOfRange { layer: l_s, max: n_s });
    }
    Ok((l_s * n_t / n_s).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub student_layer: usize,
    pub teacher_layer: usize,
    pub granularity: Granularity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub entries: Vec<ScheduleEntry>,
    /// `None` when built from an explicit layer list.
    pub stride: Option<usize>,
    pub budget: usize,
}

/// Word granularity for the lowest `word_count` layers, phrase above.
pub fn assign_granularity(
    layers: &[usize],
    word_count: usize,
    n_s: usize,
    n_t: usize,
) -> Result<Vec<ScheduleEntry>> {
    if word_count > layers.len() {
        return Err(Error::Schedule(format!(
            "word_count {word_count} exceeds {} selected layers",
            layers.len()
        )));
    }
    layers
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            Ok(ScheduleEntry {
                student_layer: l,
                teacher_layer: map_layer(l, n_s, n_t)?,
                granularity: if i < word_count {
                    Granularity::Word
                } else {
                    Granularity::Phrase
                },
            })
        })
        .collect()
}

impl LayerSchedule {
    pub fn build(n_s: usize, n_t: usize, stride: usize, budget: usize, word_count: usize) -> Result<Self> {
        let layers = select_layers(n_s, stride, budget)?;
        Ok(Self {
            entries: assign_granularity(&layers, word_count, n_s, n_t)?,
            stride: Some(stride),
            budget,
        })
    }

    /// Schedule from a hand-picked student layer list.
    pub fn explicit(layers: &[usize], n_s: usize, n_t: usize, word_count: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Schedule("explicit layer list is empty".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule(format!("layers {layers:?} must be strictly increasing")));
        }
        Ok(Self {
            entries: assign_granularity(layers, word_count, n_s, n_t)?,
            stride: None,
            budget: layers.len(),
        })
    }

    pub fn student_layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.student_layer).collect()
    }

    pub fn layers_with(&self, g: Granularity) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.granularity == g)
            .map(|e| e.student_layer)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for LayerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[schedule]")?;
        match self.stride {
            Some(k) => writeln!(f, "stride = {k}")?,
            None => writeln!(f, "stride = \"explicit\"")?,
        }
        writeln!(f, "budget = {}", self.budget)?;
        for e in &self.entries {
            let g = match e.granularity {
                Granularity::Word => "word",
                Granularity::Phrase => "phrase",
            };
            writeln!(f)?;
            writeln!(f, "[[schedule.entry]]")?;
            writeln!(f, "student_layer = {}", e.student_layer)?;
            writeln!(f, "teacher_layer = {}", e.teacher_layer)?;
            writeln!(f, "granularity = \"{g}\"")?;
        }
        Ok(())
    }
}
