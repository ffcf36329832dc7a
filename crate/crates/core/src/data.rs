//! Datasets: synthetic generation, line-delimited JSON I/O, leave-one-out
//! splitting and fixed-length segmentation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    #[serde(rename = "user")]
    pub user_id: String,
    pub items: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cats: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub catalog_size: usize,
    pub users: Vec<UserSequence>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for u in &self.users {
            if u.items.len() < 3 {
                return Err(Error::Config(format!(
                    "user {} has {} items; leave-one-out needs at least 3",
                    u.user_id,
                    u.items.len()
                )));
            }
            if let Some(&bad) = u.items.iter().find(|&&i| i as usize >= self.catalog_size) {
                return Err(Error::Index {
                    op: "dataset item",
                    index: bad as usize,
                    size: self.catalog_size,
                });
            }
            if let Some(c) = &u.cats {
                if c.len() != u.items.len() {
                    return Err(Error::Config(format!(
                        "user {} has {} categories for {} items",
                        u.user_id,
                        c.len(),
                        u.items.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps users with at least `l_full + 3` interactions, truncated to the
    /// most recent `l_full + 3`.
    pub fn prepare_long(&self, l_full: usize) -> Self {
        let keep = l_full + 3;
        let users = self
            .users
            .iter()
            .filter(|u| u.items.len() >= keep)
            .map(|u| {
                let start = u.items.len() - keep;
                UserSequence {
                    user_id: u.user_id.clone(),
                    items: u.items[start..].to_vec(),
                    cats: u.cats.as_ref().map(|c| c[start..].to_vec()),
                }
            })
            .collect();
        Self {
            catalog_size: self.catalog_size,
            users,
        }
    }

    /// Item → category lookup assembled from per-user annotations.
    pub fn item_categories(&self) -> HashMap<u32, u32> {
        let mut out = HashMap::new();
        for u in &self.users {
            if let Some(c) = &u.cats {
                for (&i, &k) in u.items.iter().zip(c) {
                    out.insert(i, k);
                }
            }
        }
        out
    }
}

/// Parameters of the synthetic long-sequence generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub seq_len: usize,
    pub catalog_size: usize,
    pub n_categories: usize,
    pub prefs_per_user: usize,
    pub long_term_weight: f64,
    pub session_burst_len: usize,
    pub noise_rate: f64,
    /// Zipf exponent of item popularity inside a category.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            seq_len: 67,
            catalog_size: 500,
            n_categories: 25,
            prefs_per_user: 3,
            long_term_weight: 0.5,
            session_burst_len: 4,
            noise_rate: 0.2,
            popularity_skew: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if !(0.0..=1.0).contains(&self.long_term_weight) || !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("weights must lie in [0, 1]");
        }
        if self.long_term_weight + self.noise_rate > 1.0 + 1e-12 {
            return bad("long_term_weight + noise_rate must not exceed 1");
        }
        if self.n_categories == 0 || self.n_categories > self.catalog_size {
            return bad("need 1 <= n_categories <= catalog_size");
        }
        if self.prefs_per_user == 0 || self.prefs_per_user > self.n_categories {
            return bad("need 1 <= prefs_per_user <= n_categories");
        }
        if self.session_burst_len == 0 {
            return bad("session_burst_len must be positive");
        }
        if self.seq_len < 3 {
            return bad("seq_len must be at least 3");
        }
        if self.popularity_skew < 0.0 {
            return bad("popularity_skew must be non-negative");
        }
        Ok(())
    }

    pub fn category_of(&self, item: u32) -> u32 {
        (item as usize * self.n_categories / self.catalog_size) as u32
    }

    /// Item id range of every category (contiguous blocks).
    pub fn category_ranges(&self) -> Vec<std::ops::Range<u32>> {
        let mut ranges = vec![u32::MAX..0; self.n_categories];
        for i in 0..self.catalog_size as u32 {
            let r = &mut ranges[self.category_of(i) as usize];
            r.start = r.start.min(i);
            r.end = r.end.max(i + 1);
        }
        ranges
    }
}

/// Generated data plus the latent preferred categories of each user.
pub struct SyntheticData {
    pub dataset: Dataset,
    pub preferences: Vec<Vec<u32>>,
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| 1.0 / (r as f64).powf(s)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

/// Every step draws, with probability `long_term_weight`, an item from one of
/// the user's fixed preferred categories; with probability `noise_rate` a
/// uniform item; otherwise the next item of a short repeating session burst
/// (re-drawn after cycling twice).
pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let ranges = spec.category_ranges();
    let cdfs: Vec<Vec<f64>> = ranges
        .iter()
        .map(|r| zipf_cdf((r.end - r.start) as usize, spec.popularity_skew))
        .collect();
    let categories: Vec<u32> = (0..spec.n_categories as u32).collect();
    let mut users = Vec::with_capacity(spec.n_users);
    let mut preferences = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u as u64);
        let prefs: Vec<u32> = categories
            .choose_multiple(&mut rng, spec.prefs_per_user)
            .copied()
            .collect();
        let new_burst = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            (0..spec.session_burst_len)
                .map(|_| rng.gen_range(0..spec.catalog_size as u32))
                .collect()
        };
        let mut burst = new_burst(&mut rng);
        let mut burst_pos = 0usize;
        let mut items = Vec::with_capacity(spec.seq_len);
        for _ in 0..spec.seq_len {
            let r: f64 = rng.gen();
            let item = if r < spec.long_term_weight {
                let c = prefs[rng.gen_range(0..prefs.len())] as usize;
                let x: f64 = rng.gen();
                let k = cdfs[c].partition_point(|&p| p < x).min(cdfs[c].len() - 1);
                ranges[c].start + k as u32
            } else if r < spec.long_term_weight + spec.noise_rate {
                rng.gen_range(0..spec.catalog_size as u32)
            } else {
                let it = burst[burst_pos % burst.len()];
                burst_pos += 1;
                if burst_pos == 2 * burst.len() {
                    burst = new_burst(&mut rng);
                    burst_pos = 0;
                }
                it
            };
            items.push(item);
        }
        let cats = items.iter().map(|&i| spec.category_of(i)).collect();
        users.push(UserSequence {
            user_id: format!("u{u}"),
            items,
            cats: Some(cats),
        });
        preferences.push(prefs);
    }
    Ok(SyntheticData {
        dataset: Dataset {
            catalog_size: spec.catalog_size,
            users,
        },
        preferences,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_synthetic_with_truth(spec)?.dataset)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for u in &dataset.users {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON object per line. The catalog size is taken as
/// `max item id + 1` unless `catalog_size` is given.
pub fn load_dataset(path: impl AsRef<Path>, catalog_size: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut users = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserSequence = serde_json::from_str(&line).map_err(|e| Error::DatasetLine {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        if rec.cats.as_ref().is_some_and(|c| c.len() != rec.items.len()) {
            return Err(Error::DatasetLine {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "`cats` length differs from `items`".into(),
            });
        }
        users.push(rec);
    }
    let observed = users
        .iter()
        .flat_map(|u| u.items.iter())
        .map(|&i| i as usize + 1)
        .max()
        .unwrap_or(0);
    let catalog_size = catalog_size.unwrap_or(observed);
    if catalog_size < observed {
        return Err(Error::Config(format!(
            "catalog size {catalog_size} is smaller than observed item range {observed}"
        )));
    }
    Ok(Dataset {
        catalog_size,
        users,
    })
}

/// Training prefix, validation item and test item.
pub fn split_leave_one_out(items: &[u32]) -> Result<(&[u32], u32, u32)> {
    let n = items.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 3 items, got {n}"
        )));
    }
    Ok((&items[..n - 2], items[n - 2], items[n - 1]))
}

/// `[S_0..S_k]` with every segment but the last of length `L_seg`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedHistory {
    pub segments: Vec<Vec<u32>>,
}

impl SegmentedHistory {
    pub fn flatten(&self) -> Vec<u32> {
        self.segments.concat()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

pub fn segment(items: &[u32], l_seg: usize) -> SegmentedHistory {
    assert!(l_seg >= 1, "segment length must be positive");
    SegmentedHistory {
        segments: items.chunks(l_seg).map(<[u32]>::to_vec).collect(),
    }
}

/// Plug-in mutual information (nats) of paired discrete observations.
pub fn mutual_information(pairs: &[(u32, u32)]) -> f64 {
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut px: HashMap<u32, f64> = HashMap::new();
    let mut py: HashMap<u32, f64> = HashMap::new();
    for &(x, y) in pairs {
        *joint.entry((x, y)).or_default() += 1.0;
        *px.entry(x).or_default() += 1.0;
        *py.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c / n;
            pxy * (pxy / ((px[&x] / n) * (py[&y] / n))).ln()
        })
        .sum()
}
