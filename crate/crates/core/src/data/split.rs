use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PixelSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMode {
    /// Fields shuffled within year strata, greedily filled to 60/20/20 of pixels.
    Random,
    LeaveOneYearOut { year: i32 },
    LeaveOneFarmOut { farm: u32 },
}

const PROPORTIONS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub mode: SplitMode,
    pub seed: u64,
    /// Field assignment for the random and leave-one-farm-out modes.
    pub fields: BTreeMap<u32, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, s: &PixelSample) -> Option<Split> {
        match self.mode {
            SplitMode::LeaveOneYearOut { year } => {
                self.fields.contains_key(&s.field_id).then_some(if s.year == year { Split::Val } else { Split::Train })
            }
            _ => self.fields.get(&s.field_id).copied(),
        }
    }

    pub fn fields_in(&self, which: Split) -> Vec<u32> {
        self.fields.iter().filter(|(_, &s)| s == which).map(|(&f, _)| f).collect()
    }
}

fn assign_random(samples: &[PixelSample], seed: u64) -> Result<BTreeMap<u32, Split>> {
    let mut pixels: BTreeMap<u32, usize> = BTreeMap::new();
    let mut years: BTreeMap<u32, BTreeSet<i32>> = BTreeMap::new();
    for s in samples {
        *pixels.entry(s.field_id).or_default() += 1;
        years.entry(s.field_id).or_default().insert(s.year);
    }
    if pixels.len() < 3 {
        return Err(Error::contract(format!("random split needs at least 3 fields, got {}", pixels.len())));
    }
    let mut strata: BTreeMap<Vec<i32>, Vec<u32>> = BTreeMap::new();
    for (field, ys) in &years {
        strata.entry(ys.iter().copied().collect()).or_default().push(*field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (years, mut fields) in strata {
        fields.shuffle(&mut rng);
        if fields.len() < 3 {
            log::warn!("year stratum {years:?} has {} fields; splits will not all contain it", fields.len());
        }
        let total: usize = fields.iter().map(|f| pixels[f]).sum();
        let mut filled = [0usize; 3];
        for (i, field) in fields.iter().enumerate() {
            let k = if i < 3 && fields.len() >= 3 {
                i
            } else {
                let deficit = |k: usize| PROPORTIONS[k] * total as f64 - filled[k] as f64;
                (0..3).fold(0, |best, k| if deficit(k) > deficit(best) { k } else { best })
            };
            filled[k] += pixels[field];
            out.insert(*field, Split::ALL[k]);
        }
    }
    Ok(out)
}

pub fn split_dataset(samples: &[PixelSample], mode: SplitMode, seed: u64) -> Result<SplitAssignment> {
    let fields = match &mode {
        SplitMode::Random => assign_random(samples, seed)?,
        SplitMode::LeaveOneYearOut { year } => {
            let years: BTreeSet<i32> = samples.iter().map(|s| s.year).collect();
            if years.len() < 2 || !years.contains(year) {
                return Err(Error::contract(format!("leave-one-year-out needs year {year} among at least 2 years, have {years:?}")));
            }
            samples.iter().map(|s| (s.field_id, Split::Train)).collect()
        }
        SplitMode::LeaveOneFarmOut { farm } => {
            let farms: BTreeSet<u32> = samples.iter().map(|s| s.farm_id).collect();
            if farms.len() < 2 || !farms.contains(farm) {
                return Err(Error::contract(format!("leave-one-farm-out needs farm {farm} among at least 2 farms, have {farms:?}")));
            }
            samples.iter().map(|s| (s.field_id, if s.farm_id == *farm { Split::Val } else { Split::Train })).collect()
        }
    };
    Ok(SplitAssignment { mode, seed, fields })
}
