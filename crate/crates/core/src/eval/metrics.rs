use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann–Whitney statistic: the chance that
/// a random positive outranks a random negative, ties counting ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann–Whitney count, kept in integers so the result is exact.
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok((doubled as f64 / 2.0) / (positives * negatives) as f64)
}

/// One-vs-rest macro AUC over classes present in `labels`. Binary problems
/// reduce to the AUC of the last class's probability.
pub fn auc_multiclass(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let classes = probabilities.first().map_or(0, Vec::len);
    if classes == 2 {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&scores, &pos);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        total += auc(&scores, &pos)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric("no class has both positives and negatives".into()));
    }
    Ok(total / counted as f64)
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("MSE of zero predictions".into()));
    }
    let sum: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn seven_pairs_match_brute_force() {
        let s = [0.3, 0.7, 0.3, 0.9, 0.1, 0.7, 0.5];
        let l = [true, false, false, true, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), brute_force_auc(&s, &l));
    }

    #[test]
    fn multiclass_macro() {
        let p = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.6, 0.3, 0.1],
        ];
        assert_eq!(auc_multiclass(&p, &[0, 1, 2, 0]).unwrap(), 1.0);
        let b = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(auc_multiclass(&b, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
        let p = [0.1, -0.4, 2.5, 0.0, 1.25];
        let t = [0.3, 0.2, 2.0, -1.0, 1.0];
        let mut acc = 0.0;
        for i in 0..5 {
            acc += (p[i] - t[i]) * (p[i] - t[i]);
        }
        assert!((mse(&p, &t).unwrap() - acc / 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_matches_oracle(pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..100)) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 7.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let moved: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&moved, &labels).unwrap());
        }

        #[test]
        fn mse_non_negative(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let t: Vec<f64> = v.iter().map(|x| x.1).collect();
            let m = mse(&p, &t).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, p == t);
        }
    }
}
