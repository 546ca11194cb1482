//! Inference over chips with single models and ensembles.

use std::path::Path;

use crate::datapipe::Chip;
use crate::error::{Error, Result};
use crate::model::{self, ArchSpec, Network};
use crate::train::batch_input;

/// Inference-mode predictions, one `32×32` map per chip.
pub fn predict_chips(net: &mut Network, chips: &[&Chip], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(chips.len());
    for group in chips.chunks(batch.max(1)) {
        let y = net.predict(batch_input(net.kind(), group))?;
        out.extend(y.data().chunks(crate::CHIP_SIZE * crate::CHIP_SIZE).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Models with one shared architecture, combined by their unweighted mean.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Network>,
}

/// Ensemble output for one chip.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    /// Per-pixel `max − min` over members.
    pub spread: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<Network>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::invalid("an ensemble needs at least one member"));
        };
        let arch: ArchSpec = *first.arch();
        if let Some((i, m)) = members.iter().enumerate().find(|(_, m)| *m.arch() != arch) {
            return Err(Error::invalid(format!("member {i} has architecture {:?}, expected {arch:?}", m.arch())));
        }
        Ok(Ensemble { members })
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let members = paths.iter().map(|p| model::load(p.as_ref())).collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn arch(&self) -> &ArchSpec {
        self.members[0].arch()
    }

    pub fn predict(&mut self, chips: &[&Chip], batch: usize) -> Result<Vec<EnsemblePrediction>> {
        let k = self.members.len() as f64;
        let mut acc: Vec<EnsemblePrediction> = Vec::new();
        let mut lo: Vec<Vec<f64>> = Vec::new();
        let mut hi: Vec<Vec<f64>> = Vec::new();
        for (m, net) in self.members.iter_mut().enumerate() {
            let preds = predict_chips(net, chips, batch)?;
            if m == 0 {
                lo = preds.clone();
                hi = preds.clone();
                acc = preds.iter().map(|p| EnsemblePrediction { mean: p.clone(), spread: vec![0.0; p.len()] }).collect();
                continue;
            }
            for (c, p) in preds.iter().enumerate() {
                for (i, &v) in p.iter().enumerate() {
                    acc[c].mean[i] += v;
                    lo[c][i] = lo[c][i].min(v);
                    hi[c][i] = hi[c][i].max(v);
                }
            }
        }
        for (c, e) in acc.iter_mut().enumerate() {
            for (i, v) in e.mean.iter_mut().enumerate() {
                *v /= k;
                e.spread[i] = hi[c][i] - lo[c][i];
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use crate::synth::{generate, SceneParams};

    fn chips() -> Vec<Chip> {
        let p = SceneParams { grid: 1, fine_factor: 2, years: vec![2019], sample_stride: 20, ..SceneParams::default() };
        generate(&p).unwrap()
    }

    #[test]
    fn identical_members_match_single_model() {
        let data = chips();
        let refs: Vec<&Chip> = data.iter().collect();
        let mut single = Network::new(&ArchSpec::fusion(2, 2), 1).unwrap();
        let expect = predict_chips(&mut single, &refs, 2).unwrap();
        let mut ens = Ensemble::new(vec![single.clone(), single.clone(), single]).unwrap();
        let got = ens.predict(&refs, 2).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            for (a, b) in g.mean.iter().zip(e) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!(g.spread.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn two_members_average_and_bound() {
        let data = chips();
        let refs: Vec<&Chip> = data.iter().collect();
        let mut a = Network::new(&ArchSpec::baseline(2), 1).unwrap();
        let mut b = Network::new(&ArchSpec::baseline(2), 2).unwrap();
        let pa = predict_chips(&mut a, &refs, 4).unwrap();
        let pb = predict_chips(&mut b, &refs, 4).unwrap();
        let got = Ensemble::new(vec![a, b]).unwrap().predict(&refs, 4).unwrap();
        for c in 0..refs.len() {
            for i in 0..1024 {
                let (x, y) = (pa[c][i], pb[c][i]);
                assert!((got[c].mean[i] - (x + y) / 2.0).abs() < 1e-15);
                assert!(x.min(y) <= got[c].mean[i] && got[c].mean[i] <= x.max(y));
                assert!((got[c].spread[i] - (x - y).abs()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mixed_architectures_are_rejected() {
        let a = Network::new(&ArchSpec::fusion(2, 2), 1).unwrap();
        let b = Network::new(&ArchSpec::fusion(2, 3), 1).unwrap();
        let c = Network::new(&ArchSpec::baseline(2), 1).unwrap();
        assert!(Ensemble::new(vec![a.clone(), b]).is_err());
        assert!(Ensemble::new(vec![a, c]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }
}
