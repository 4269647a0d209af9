//! Content-disjoint train/validation/test splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datakit::StereoSample;
use crate::derive_seed;
use crate::error::{contract, Error, Result};

/// Fewest distinct reference contents [`make_splits`] accepts.
pub const MIN_CONTENTS: usize = 5;
pub const SPLIT_HEADER: &str = "run,seed,subset,ref_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub fn tag(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Subset::Train),
            "val" => Some(Subset::Val),
            "test" => Some(Subset::Test),
            _ => None,
        }
    }
}

/// Reference-content ids per subset for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub run: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, subset: Subset) -> &[String] {
        match subset {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    /// The subset holding reference `ref_id`, if any.
    pub fn subset_of(&self, ref_id: &str) -> Option<Subset> {
        [Subset::Train, Subset::Val, Subset::Test]
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|r| r == ref_id))
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(contract(format!("run {}: reference {id} appears in two subsets", self.run)));
            }
        }
        Ok(())
    }
}

/// `runs` seeded 60/20/20 partitions of the reference contents; rounding
/// remainders go to train. Run `r` (1-based) shuffles with
/// `derive_seed(seed, [r])`.
pub fn make_splits(samples: &[StereoSample], runs: usize, seed: u64) -> Result<Vec<SplitManifest>> {
    let refs: Vec<String> =
        samples.iter().map(|s| s.ref_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if refs.len() < MIN_CONTENTS {
        return Err(contract(format!(
            "splitting needs at least {MIN_CONTENTS} reference contents, found {}",
            refs.len()
        )));
    }
    if runs == 0 {
        return Err(contract("at least one run is required"));
    }
    let n = refs.len();
    let (n_val, n_test) = (n / 5, n / 5);
    Ok((1..=runs)
        .map(|run| {
            let run_seed = derive_seed(seed, &[run as u64]);
            let mut order = refs.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(run_seed));
            let test = order.split_off(n - n_test);
            let val = order.split_off(n - n_test - n_val);
            SplitManifest { run, seed: run_seed, train: order, val, test }
        })
        .collect())
}

pub fn splits_to_csv(splits: &[SplitManifest]) -> String {
    let mut s = format!("{SPLIT_HEADER}\n");
    for m in splits {
        for subset in [Subset::Train, Subset::Val, Subset::Test] {
            for id in m.ids(subset) {
                writeln!(s, "{},{},{},{id}", m.run, m.seed, subset.tag()).expect("writing to a String");
            }
        }
    }
    s
}

pub fn splits_from_csv(text: &str) -> Result<Vec<SplitManifest>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SPLIT_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("header must be {SPLIT_HEADER:?}") }),
    }
    let mut out: Vec<SplitManifest> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let run: usize = f[0].parse().map_err(|_| bad(format!("bad run {:?}", f[0])))?;
        let seed: u64 = f[1].parse().map_err(|_| bad(format!("bad seed {:?}", f[1])))?;
        let subset = Subset::parse(f[2]).ok_or_else(|| bad(format!("unknown subset {:?}", f[2])))?;
        if f[3].is_empty() {
            return Err(bad("empty reference id".into()));
        }
        let m = match out.iter_mut().find(|m| m.run == run) {
            Some(m) if m.seed == seed => m,
            Some(_) => return Err(bad(format!("run {run} has two seeds"))),
            None => {
                out.push(SplitManifest { run, seed, train: vec![], val: vec![], test: vec![] });
                out.last_mut().expect("just pushed")
            }
        };
        match subset {
            Subset::Train => m.train.push(f[3].to_string()),
            Subset::Val => m.val.push(f[3].to_string()),
            Subset::Test => m.test.push(f[3].to_string()),
        }
    }
    for m in &out {
        m.check_disjoint()?;
    }
    Ok(out)
}

pub fn save_splits(path: &Path, splits: &[SplitManifest]) -> Result<()> {
    std::fs::write(path, splits_to_csv(splits))?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<Vec<SplitManifest>> {
    splits_from_csv(&std::fs::read_to_string(path)?)
}
