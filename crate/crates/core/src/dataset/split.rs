use rand::seq::SliceRandom;

use super::LabeledDataset;
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

/// Shuffled, class-stratified `(train, test)` index lists.
///
/// Each class contributes `round(fraction * n)` samples to train, clamped to
/// `[1, n - 1]` so both parts see every class. Both lists are in shuffled
/// order.
pub fn split_indices(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut rng = stream(seed, Stream::Split);
    let mut order = ds.all_indices();
    order.shuffle(&mut rng);
    let mut per_class = vec![Vec::new(); ds.num_classes()];
    for i in order {
        per_class[ds.get(i).label].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, members) in per_class.iter().enumerate() {
        let n = members.len();
        if n < 2 {
            return Err(invalid(format!(
                "class {} has {n} sample(s), at least 2 are needed to stratify",
                ds.class_names()[class]
            )));
        }
        let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

pub fn split_shuffle(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(ds, fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledImage;

    fn toy(per_class: usize, classes: usize) -> LabeledDataset {
        let imgs = (0..per_class * classes)
            .map(|i| LabeledImage::new(i, 8, 8, vec![0.5; 64], i % classes).unwrap())
            .collect();
        let names = (0..classes).map(|c| c.to_string()).collect();
        LabeledDataset::new(names, imgs).unwrap()
    }

    #[test]
    fn seventy_thirty_per_class() {
        let ds = toy(100, 3);
        let (train, test) = split_shuffle(&ds, 0.7, 4).unwrap();
        assert_eq!(train.counts(), vec![70; 3]);
        assert_eq!(test.counts(), vec![30; 3]);
    }

    #[test]
    fn disjoint_and_seed_dependent() {
        let ds = toy(20, 4);
        let (a_train, a_test) = split_indices(&ds, 0.7, 1).unwrap();
        let (b_train, _) = split_indices(&ds, 0.7, 2).unwrap();
        assert!(a_train.iter().all(|i| !a_test.contains(i)));
        assert_eq!(a_train.len() + a_test.len(), ds.len());
        assert_ne!(a_train, b_train);
        assert_eq!(a_train.len(), b_train.len());
    }

    #[test]
    fn tiny_class_and_bad_fraction() {
        let mut imgs: Vec<_> = (0..4)
            .map(|i| LabeledImage::new(i, 8, 8, vec![0.5; 64], 0).unwrap())
            .collect();
        imgs.push(LabeledImage::new(4, 8, 8, vec![0.5; 64], 1).unwrap());
        let ds = LabeledDataset::new(vec!["a".into(), "b".into()], imgs).unwrap();
        assert!(split_indices(&ds, 0.7, 0).is_err());
        assert!(split_indices(&toy(4, 2), 1.0, 0).is_err());
        // 2 samples at 0.9 still leave one for test
        let (tr, te) = split_indices(&toy(2, 2), 0.9, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 2));
    }
}
