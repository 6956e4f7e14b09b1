use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::{predict, weighted_f1};
use super::net::Model;
use super::{augment, make_test_graph, HierModelConfig, ModelChoice, RoISample};
use crate::ad::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Patient-level split of RoI ids. `pseudo_val_rois` is a subset of
/// `train_rois` held out from fitting and used for early stopping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_rois: Vec<String>,
    pub test_rois: Vec<String>,
    pub pseudo_val_rois: Vec<String>,
}

impl SplitPlan {
    /// Training RoIs minus the pseudo-validation ones.
    pub fn fit_rois(&self) -> Vec<String> {
        let pv: BTreeSet<&String> = self.pseudo_val_rois.iter().collect();
        self.train_rois.iter().filter(|r| !pv.contains(r)).cloned().collect()
    }

    /// Check disjointness and containment against the samples' patients.
    pub fn check(&self, samples: &[RoISample]) -> Result<()> {
        let patient: BTreeMap<&str, &str> = samples
            .iter()
            .map(|s| (s.roi_id.as_str(), s.patient_id.as_str()))
            .collect();
        let lookup = |id: &String| {
            patient
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("split names unknown roi {id}")))
        };
        let train: BTreeSet<&str> = self.train_rois.iter().map(lookup).collect::<Result<_>>()?;
        let test: BTreeSet<&str> = self.test_rois.iter().map(lookup).collect::<Result<_>>()?;
        if let Some(p) = train.intersection(&test).next() {
            return Err(Error::Validation(format!("patient {p} is in both train and test")));
        }
        let all: BTreeSet<&String> = self.train_rois.iter().collect();
        if let Some(r) = self.pseudo_val_rois.iter().find(|r| !all.contains(r)) {
            return Err(Error::Validation(format!("pseudo-validation roi {r} is not a training roi")));
        }
        Ok(())
    }
}

/// Shuffle patients, then move them into the training side until it holds at
/// least `round(train_frac * n)` RoIs. Pseudo-validation draws
/// `max(1, round(frac * n_c))` training RoIs from every class with at least
/// two training RoIs.
pub fn split_patients(samples: &[RoISample], cfg: &HierModelConfig, split_seed: u64) -> Result<SplitPlan> {
    let mut by_patient: BTreeMap<&str, Vec<&RoISample>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(&s.patient_id).or_default().push(s);
    }
    if by_patient.len() < 2 {
        return Err(Error::Empty(format!(
            "a patient-level split needs at least two patients, found {}",
            by_patient.len()
        )));
    }
    let mut rng = seed::child_rng(split_seed, &[stream::SPLIT]);
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut rng);
    let target = ((cfg.train_frac * samples.len() as f64).round() as usize).max(1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, p) in patients.iter().enumerate() {
        let last = i + 1 == patients.len();
        if train.len() < target && !(last && test.is_empty()) {
            train.extend(by_patient[p].iter().copied());
        } else {
            test.extend(by_patient[p].iter().copied());
        }
    }
    let mut per_class: BTreeMap<usize, Vec<&RoISample>> = BTreeMap::new();
    for s in &train {
        per_class.entry(cfg.class_of(s.stage)).or_default().push(s);
    }
    let mut pseudo_val = Vec::new();
    if cfg.pseudo_val_frac > 0.0 {
        for members in per_class.values_mut() {
            if members.len() < 2 {
                continue;
            }
            let k = ((cfg.pseudo_val_frac * members.len() as f64).round() as usize).max(1);
            members.shuffle(&mut rng);
            pseudo_val.extend(members[..k].iter().map(|s| s.roi_id.clone()));
        }
    }
    let ids = |v: &[&RoISample]| {
        let mut ids: Vec<String> = v.iter().map(|s| s.roi_id.clone()).collect();
        ids.sort();
        ids
    };
    pseudo_val.sort();
    Ok(SplitPlan {
        train_rois: ids(&train),
        test_rois: ids(&test),
        pseudo_val_rois: pseudo_val,
    })
}

/// Inverse class frequency `n / (C * n_c)`; zero for absent classes.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (n_classes as f64 * c as f64) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Weighted F1 and loss on the monitoring set.
    pub monitor_f1: f64,
    pub monitor_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best monitored epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// True when the pseudo-validation set was empty and the fitting set
    /// was monitored instead.
    pub monitored_fit_set: bool,
}

/// Weighted cross entropy of evaluation-mode logits.
fn dataset_loss(model: &Model, samples: &[RoISample], weights: &[f64]) -> Result<(f64, Vec<usize>)> {
    let preds = predict(model, samples)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for p in &preds {
        let w = weights[p.truth];
        num += -w * p.probs[p.truth].max(f64::MIN_POSITIVE).ln();
        den += w;
    }
    let loss = if den > 0.0 { num / den } else { 0.0 };
    Ok((loss, preds.iter().map(|p| p.pred).collect()))
}

/// Fit a model on `fit` (pre-augmentation) with early stopping on
/// `pseudo_val`. Tile models see `augment_copies` augmented views of every
/// fitting RoI per epoch; the monitoring set uses full test graphs.
pub fn train(
    choice: ModelChoice,
    cfg: &HierModelConfig,
    fit: &[RoISample],
    pseudo_val: &[RoISample],
    run_seed: u64,
) -> Result<TrainOutcome> {
    if fit.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut model = Model::new(choice, cfg, run_seed)?;
    let full: Vec<RoISample> = fit.iter().map(|s| make_test_graph(s, cfg)).collect::<Result<_>>()?;
    model.fit_normalization(&full)?;
    let prepare = |v: Vec<RoISample>| -> Result<Vec<RoISample>> {
        v.into_iter()
            .map(|mut s| {
                model.prepare(&mut s)?;
                Ok(s)
            })
            .collect()
    };
    let full = prepare(full)?;
    let monitored_fit_set = pseudo_val.is_empty();
    let monitor = if monitored_fit_set {
        log::warn!("pseudo-validation set is empty; early stopping monitors the fitting set");
        full.clone()
    } else {
        prepare(pseudo_val.iter().map(|s| make_test_graph(s, cfg)).collect::<Result<_>>()?)?
    };
    let labels: Vec<usize> = full.iter().map(|s| model.label(s)).collect();
    let weights = class_weights(&labels, cfg.n_classes);
    let monitor_truth: Vec<usize> = monitor.iter().map(|s| model.label(s)).collect();

    let mut adam = Adam::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut log = Vec::new();
    let mut stale = 0usize;
    let tiles = choice.kind.uses_tiles();
    let copies = if tiles { cfg.augment_copies.max(1) } else { 1 };

    for epoch in 0..cfg.max_epochs {
        let mut views: Vec<RoISample> = Vec::with_capacity(full.len() * copies);
        for (i, s) in full.iter().enumerate() {
            for c in 0..copies {
                views.push(if tiles && cfg.augment_copies > 0 {
                    augment(s, cfg, seed::derive(run_seed, &[stream::AUGMENT, epoch as u64, i as u64, c as u64]))?
                } else {
                    s.clone()
                });
            }
        }
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.shuffle(&mut seed::child_rng(run_seed, &[stream::SHUFFLE, epoch as u64]));

        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = seed::child_rng(run_seed, &[stream::DROPOUT, epoch as u64, b as u64]);
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, true);
            let mut logits = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for &i in batch {
                let opts = super::ForwardOpts {
                    edge_weights: None,
                    feature_mask: None,
                    dropout_rng: Some(&mut rng),
                };
                logits.push(model.forward(&mut tape, &p, &views[i], opts)?);
                ys.push(labels[i / copies]);
            }
            let z = tape.concat_rows(&logits);
            let loss = tape.weighted_cross_entropy(z, &ys, &weights);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            epoch_loss += value * batch.len() as f64;
            let grads = tape.backward(loss);
            let ids: Vec<_> = model.store.ids().collect();
            let g: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.get(p.var(id)).cloned()).collect();
            adam.step(&mut model.store, |id| g[ids.iter().position(|&x| x == id).unwrap()].as_ref());
            if !model.store.is_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch}, batch {b}")));
            }
        }

        let (monitor_loss, preds) = dataset_loss(&model, &monitor, &weights)?;
        let monitor_f1 = weighted_f1(&monitor_truth, &preds, cfg.n_classes);
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / views.len() as f64,
            monitor_f1,
            monitor_loss,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} monitor f1 {:.4} loss {:.4}",
            entry.train_loss,
            monitor_f1,
            monitor_loss
        );
        log.push(entry);
        let improved = match &best {
            None => true,
            Some((f, l, _, _)) => monitor_f1 > *f || (monitor_f1 == *f && monitor_loss < *l),
        };
        if improved {
            best = Some((monitor_f1, monitor_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, _, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        monitored_fit_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny_samples;

    #[test]
    fn weights_times_frequency_is_constant() {
        let labels = [0, 0, 0, 0, 1, 1, 2, 0, 1, 0];
        let w = class_weights(&labels, 3);
        let freq = [6.0, 3.0, 1.0];
        let products: Vec<f64> = w.iter().zip(freq).map(|(w, f)| w * f).collect();
        for p in &products {
            assert!((p - products[0]).abs() < 1e-12);
        }
        assert_eq!(class_weights(&[0, 0, 1], 3)[2], 0.0);
    }

    #[test]
    fn split_is_patient_disjoint() {
        let samples = tiny_samples(6, 4, 21);
        let cfg = HierModelConfig::default();
        for s in 0..5 {
            let plan = split_patients(&samples, &cfg, s).unwrap();
            plan.check(&samples).unwrap();
            assert!(!plan.test_rois.is_empty());
            assert_eq!(plan.train_rois.len() + plan.test_rois.len(), samples.len());
            let train_patients: BTreeSet<_> = samples
                .iter()
                .filter(|x| plan.train_rois.contains(&x.roi_id))
                .map(|x| &x.patient_id)
                .collect();
            assert!(samples
                .iter()
                .filter(|x| plan.test_rois.contains(&x.roi_id))
                .all(|x| !train_patients.contains(&x.patient_id)));
        }
    }

    #[test]
    fn split_needs_two_patients() {
        let samples = tiny_samples(1, 4, 22);
        assert!(split_patients(&samples, &HierModelConfig::default(), 0).is_err());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let cfg = HierModelConfig::default();
        assert!(train("mlp".parse().unwrap(), &cfg, &[], &[], 0).is_err());
    }

    fn quick_cfg() -> HierModelConfig {
        HierModelConfig {
            max_epochs: 3,
            batch_size: 4,
            augment_copies: 1,
            lr: 1e-3,
            ..HierModelConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let samples = tiny_samples(3, 10, 23);
        let cfg = quick_cfg();
        let a = train("gcn-mean".parse().unwrap(), &cfg, &samples[..4], &samples[4..], 5).unwrap();
        let b = train("gcn-mean".parse().unwrap(), &cfg, &samples[..4], &samples[4..], 5).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.train_loss.is_finite() && e.train_loss > 0.0));
        assert_eq!(a.model.store.export(), b.model.store.export());
    }

    #[test]
    fn mlp_separates_a_toy_set() {
        let mut samples = tiny_samples(4, 2, 24);
        // Make the class readable from the mean area alone.
        for s in samples.iter_mut() {
            s.cell_mean[5] = 50.0 + 40.0 * s.stage.index() as f64;
        }
        let cfg = HierModelConfig {
            max_epochs: 300,
            patience: 300,
            batch_size: 8,
            lr: 1e-2,
            dropout: 0.0,
            ..HierModelConfig::default()
        };
        let out = train("mlp".parse().unwrap(), &cfg, &samples, &[], 1).unwrap();
        assert!(out.monitored_fit_set);
        let preds = predict(&out.model, &samples).unwrap();
        let truth: Vec<usize> = samples.iter().map(|s| out.model.label(s)).collect();
        let pred: Vec<usize> = preds.iter().map(|p| p.pred).collect();
        assert_eq!(weighted_f1(&truth, &pred, 3), 1.0);
    }
}
