use super::{DatasetIndex, SequenceKey};
use crate::error::{Error, Result};

/// How training identities are chosen from the sorted identity list; the
/// remaining identities form the test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainIds {
    First(usize),
    /// The first half, rounded down.
    Half,
}

/// Sequences with one of `seqs` under `condition`; `None` matches any
/// condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqRule {
    pub condition: Option<String>,
    pub seqs: Vec<u32>,
}

impl SeqRule {
    pub fn new(condition: &str, seqs: &[u32]) -> Self {
        Self { condition: Some(condition.to_string()), seqs: seqs.to_vec() }
    }

    pub fn any_condition(seqs: &[u32]) -> Self {
        Self { condition: None, seqs: seqs.to_vec() }
    }

    pub fn matches(&self, key: &SequenceKey) -> bool {
        self.condition.as_deref().is_none_or(|c| c == key.condition) && self.seqs.contains(&key.seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub name: String,
    pub train: TrainIds,
    pub gallery: Vec<SeqRule>,
    /// Named probe subsets.
    pub probes: Vec<(String, Vec<SeqRule>)>,
}

/// Entry indices selected by a protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub train: Vec<usize>,
    pub gallery: Vec<usize>,
    pub probes: Vec<(String, Vec<usize>)>,
}

impl ProtocolSpec {
    fn casia(name: &str, train: usize) -> Self {
        Self {
            name: name.to_string(),
            train: TrainIds::First(train),
            gallery: vec![SeqRule::new("NM", &[1, 2, 3, 4])],
            probes: vec![
                ("NM".into(), vec![SeqRule::new("NM", &[5, 6])]),
                ("BG".into(), vec![SeqRule::new("BG", &[1, 2])]),
                ("CL".into(), vec![SeqRule::new("CL", &[1, 2])]),
            ],
        }
    }

    /// Small-sample training: 24 training subjects.
    pub fn st() -> Self {
        Self::casia("ST", 24)
    }

    /// Medium-sample training: 62 training subjects.
    pub fn mt() -> Self {
        Self::casia("MT", 62)
    }

    /// Large-sample training: 74 training subjects, 50 test.
    pub fn lt() -> Self {
        Self::casia("LT", 74)
    }

    /// 5153 training subjects; sequence 01 is the gallery, 00 the probe.
    pub fn oumvlp() -> Self {
        Self {
            name: "OUMVLP".into(),
            train: TrainIds::First(5153),
            gallery: vec![SeqRule::any_condition(&[1])],
            probes: vec![("NM".into(), vec![SeqRule::any_condition(&[0])])],
        }
    }

    /// Synthetic data has one sequence per (identity, condition, view), so
    /// the gallery is NM #1 and the NM probe reuses NM #1 at the other views;
    /// same-view cells are excluded from every mean.
    pub fn synth() -> Self {
        Self {
            name: "SYNTH".into(),
            train: TrainIds::Half,
            gallery: vec![SeqRule::new("NM", &[1])],
            probes: vec![
                ("NM".into(), vec![SeqRule::new("NM", &[1])]),
                ("BG".into(), vec![SeqRule::new("BG", &[1])]),
                ("CL".into(), vec![SeqRule::new("CL", &[1])]),
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "ST" => Ok(Self::st()),
            "MT" => Ok(Self::mt()),
            "LT" => Ok(Self::lt()),
            "OUMVLP" => Ok(Self::oumvlp()),
            "SYNTH" => Ok(Self::synth()),
            _ => Err(Error::Config(format!("unknown protocol {name:?}"))),
        }
    }

    /// Same protocol with the gallery replaced, e.g. NM#2 + BG#2 + CL#2 for
    /// multi-condition experiments.
    pub fn with_gallery(&self, gallery: Vec<SeqRule>) -> Self {
        Self { gallery, ..self.clone() }
    }

    /// Gallery NM#2 + BG#2 + CL#2 with probes NM#1, BG#1 and CL#1, the
    /// arrangement used for multi-condition probes.
    pub fn multicondition(&self) -> Self {
        let probes = ["NM", "BG", "CL"].iter().map(|c| (c.to_string(), vec![SeqRule::new(c, &[1])])).collect();
        Self {
            name: format!("{}-MC", self.name),
            gallery: ["NM", "BG", "CL"].iter().map(|c| SeqRule::new(c, &[2])).collect(),
            probes,
            ..self.clone()
        }
    }

    pub fn split(&self, index: &DatasetIndex) -> Result<Split> {
        let ids = index.identities();
        let n_train = match self.train {
            TrainIds::First(n) => n,
            TrainIds::Half => ids.len() / 2,
        };
        if n_train == 0 || n_train >= ids.len() {
            return Err(Error::Data(format!(
                "protocol {} trains on {n_train} identities but the dataset has {}",
                self.name,
                ids.len()
            )));
        }
        let (train_ids, test_ids) = ids.split_at(n_train);
        let is_train = |k: &SequenceKey| train_ids.binary_search(&k.identity).is_ok();
        let select = |rules: &[SeqRule]| -> Vec<usize> {
            index
                .entries()
                .iter()
                .enumerate()
                .filter(|(_, e)| !is_train(&e.key) && rules.iter().any(|r| r.matches(&e.key)))
                .map(|(i, _)| i)
                .collect()
        };
        let train = index.entries().iter().enumerate().filter(|(_, e)| is_train(&e.key)).map(|(i, _)| i).collect();
        Ok(Split {
            train_ids: train_ids.to_vec(),
            test_ids: test_ids.to_vec(),
            train,
            gallery: select(&self.gallery),
            probes: self.probes.iter().map(|(name, rules)| (name.clone(), select(rules))).collect(),
        })
    }
}
