use rand::seq::SliceRandom;
use rand::Rng;

use super::{augment_image, AugmentParams, LabeledDataset, Origin};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Up-sample every minority class to the majority count.
///
/// Each new sample is an augmented copy of an original drawn with
/// replacement from its class. New ids continue after the largest existing
/// id, and the full result is shuffled.
pub fn balance(ds: &LabeledDataset, p: &AugmentParams, seed: u64) -> Result<LabeledDataset> {
    p.validate()?;
    let counts = ds.counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rng = stream(seed, Stream::Augment);
    let mut images = ds.images().to_vec();
    let mut next_id = ds.next_id();
    for (class, &count) in counts.iter().enumerate() {
        if count == target {
            continue;
        }
        let mut sources: Vec<usize> = ds
            .images()
            .iter()
            .enumerate()
            .filter(|(_, img)| img.label == class && img.origin == Origin::Original)
            .map(|(i, _)| i)
            .collect();
        if sources.is_empty() {
            // only augmented samples left; fall back to any member
            sources = (0..ds.len()).filter(|&i| ds.get(i).label == class).collect();
        }
        for _ in count..target {
            let src = sources[rng.random_range(0..sources.len())];
            let mut aug = augment_image(ds.get(src), p, &mut rng)?;
            aug.id = next_id;
            aug.source_id = Some(ds.get(src).source_id.unwrap_or(ds.get(src).id));
            next_id += 1;
            images.push(aug);
        }
    }
    images.shuffle(&mut rng);
    LabeledDataset::new(ds.class_names().to_vec(), images)
}
