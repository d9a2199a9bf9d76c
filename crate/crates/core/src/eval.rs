//! Verification and identification metrics over similarity scores.
//!
//! All scores are similarities: higher means more alike, and a comparison
//! is accepted when `score >= threshold`. Thresholds are always realized
//! values, never interpolated. In ISO/IEC 19795-1 terms TAR is `1 - FNMR`
//! and FAR is `FMR`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image;
use crate::network::{similarity, Embedding, Metric, Network};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRow {
    pub id_a: String,
    pub id_b: String,
    pub genuine: bool,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairList {
    pub rows: Vec<PairRow>,
}

impl PairList {
    /// `id_a id_b label [fold]` per line; `#` comments and blank lines are
    /// skipped. Either every row carries a fold or none does.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if !(3..=4).contains(&f.len()) {
                return Err(Error::Format(format!(
                    "pair list line {}: expected `id_a id_b label [fold]`, got {} fields",
                    no + 1,
                    f.len()
                )));
            }
            let genuine = match f[2] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Format(format!(
                        "pair list line {}: label {other:?} is not 0 or 1",
                        no + 1
                    )))
                }
            };
            let fold = f
                .get(3)
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Format(format!("pair list line {}: bad fold {s:?}", no + 1)))
                })
                .transpose()?;
            rows.push(PairRow {
                id_a: f[0].to_string(),
                id_b: f[1].to_string(),
                genuine,
                fold,
            });
        }
        let with_fold = rows.iter().filter(|r| r.fold.is_some()).count();
        if with_fold != 0 && with_fold != rows.len() {
            return Err(Error::Format("fold column present on some rows but not all".into()));
        }
        Ok(PairList { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.genuine).collect()
    }

    /// Fold index per row: the explicit column when present, otherwise `k`
    /// consecutive blocks of near-equal size.
    pub fn fold_assignment(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.rows.len();
        if k == 0 || k > n {
            return Err(Error::Invalid(format!("{k} folds requested for {n} pairs")));
        }
        if self.rows.first().is_some_and(|r| r.fold.is_some()) {
            let folds: Vec<usize> = self.rows.iter().map(|r| r.fold.unwrap_or(0)).collect();
            check_partition(&folds, k)?;
            return Ok(folds);
        }
        Ok(sequential_folds(n, k))
    }

    /// Ids in order of first appearance.
    pub fn unique_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in &self.rows {
            for id in [r.id_a.as_str(), r.id_b.as_str()] {
                if seen.insert(id) {
                    out.push(id);
                }
            }
        }
        out
    }
}

pub fn sequential_folds(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n).collect()
}

fn check_partition(folds: &[usize], k: usize) -> Result<()> {
    let mut sizes = vec![0usize; k];
    for &f in folds {
        if f >= k {
            return Err(Error::Invalid(format!("fold index {f} outside 0..{k}")));
        }
        sizes[f] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Invalid(format!("fold {empty} is empty")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::Invalid("scores must be finite".into()));
        }
        Ok(ScoreSet { genuine, impostor })
    }

    pub fn from_rows(labels: &[bool], scores: &[f64]) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::Shape(format!("{} labels for {} scores", labels.len(), scores.len())));
        }
        let (mut g, mut i) = (Vec::new(), Vec::new());
        for (&l, &s) in labels.iter().zip(scores) {
            if l {
                g.push(s)
            } else {
                i.push(s)
            }
        }
        ScoreSet::new(g, i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TarAtFar {
    pub tar: f64,
    /// `+inf` when no realized score keeps the impostor rate low enough.
    pub threshold: f64,
    /// Impostor acceptance rate at `threshold`.
    pub far: f64,
}

fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

/// The smallest realized score `t` (or `+inf`) whose impostor acceptance
/// rate `#{impostor >= t} / #impostor` is at most `far_target`, and the
/// genuine acceptance rate at that `t`.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<TarAtFar> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Invalid(format!("FAR target {far_target} outside (0, 1)")));
    }
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::Invalid("TAR@FAR needs genuine and impostor scores".into()));
    }
    let mut imp = scores.impostor.clone();
    imp.sort_by(f64::total_cmp);
    let mut gen = scores.genuine.clone();
    gen.sort_by(f64::total_cmp);
    let mut cand: Vec<f64> = imp.iter().chain(&gen).copied().collect();
    cand.sort_by(f64::total_cmp);
    cand.dedup();
    cand.push(f64::INFINITY);
    let ni = imp.len() as f64;
    // acceptance rate is non-increasing along the candidates
    let first = cand.partition_point(|&t| count_at_least(&imp, t) as f64 / ni > far_target);
    let threshold = cand[first];
    Ok(TarAtFar {
        tar: count_at_least(&gen, threshold) as f64 / gen.len() as f64,
        threshold,
        far: count_at_least(&imp, threshold) as f64 / ni,
    })
}

/// Candidate thresholds: `-inf`, midpoints of consecutive unique scores,
/// `+inf`, ascending.
pub fn midpoint_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut t = Vec::with_capacity(u.len() + 1);
    t.push(f64::NEG_INFINITY);
    t.extend(u.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    t.push(f64::INFINITY);
    t
}

/// Threshold with the highest accuracy on `(labels, scores)`; the lowest
/// such threshold wins ties.
pub fn best_threshold(labels: &[bool], scores: &[f64]) -> (f64, f64) {
    let mut rows: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = rows.len();
    let total_gen = rows.iter().filter(|r| r.1).count();
    let mut best = (f64::NEG_INFINITY, -1.0);
    let mut below = 0; // rows with score < t
    let mut gen_below = 0;
    for t in midpoint_thresholds(scores) {
        while below < n && rows[below].0 < t {
            if rows[below].1 {
                gen_below += 1;
            }
            below += 1;
        }
        // accepted genuines + rejected impostors
        let correct = (total_gen - gen_below) + (below - gen_below);
        let acc = correct as f64 / n as f64;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

pub fn accuracy_at(labels: &[bool], scores: &[f64], threshold: f64) -> f64 {
    let correct = labels
        .iter()
        .zip(scores)
        .filter(|(&l, &s)| (s >= threshold) == l)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct KFold {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldResult {
    pub threshold: f64,
    pub accuracy: f64,
}

/// For each fold, the best threshold on the other folds is applied to the
/// held-out fold.
pub fn verification_accuracy_kfold(labels: &[bool], scores: &[f64], folds: &[usize], k: usize) -> Result<KFold> {
    let n = labels.len();
    if scores.len() != n || folds.len() != n {
        return Err(Error::Shape(format!(
            "{n} labels, {} scores, {} fold indices",
            scores.len(),
            folds.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("{k} folds requested for {n} pairs")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    check_partition(folds, k)?;
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let (mut tl, mut ts, mut hl, mut hs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            if folds[i] == f {
                hl.push(labels[i]);
                hs.push(scores[i]);
            } else {
                tl.push(labels[i]);
                ts.push(scores[i]);
            }
        }
        let threshold = if ts.is_empty() {
            f64::NEG_INFINITY
        } else {
            best_threshold(&tl, &ts).0
        };
        out.push(FoldResult {
            threshold,
            accuracy: accuracy_at(&hl, &hs, threshold),
        });
    }
    let mean = out.iter().map(|r| r.accuracy).sum::<f64>() / k as f64;
    let var = out.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(KFold {
        mean,
        std: var.sqrt(),
        folds: out,
    })
}

/// Fraction of probes whose most similar gallery entry has the probe's id.
/// `exclude[i]`, when given, is a gallery index probe `i` must skip (its own
/// entry when probes are drawn from the gallery). Ties go to the lowest
/// gallery index.
pub fn rank1_identification<L: PartialEq + std::fmt::Display, E: AsRef<[f32]>>(
    probe_ids: &[L],
    probes: &[E],
    gallery_ids: &[L],
    gallery: &[E],
    metric: Metric,
    exclude: Option<&[usize]>,
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::Invalid("empty gallery".into()));
    }
    if probe_ids.len() != probes.len() || gallery_ids.len() != gallery.len() {
        return Err(Error::Shape("ids and embeddings differ in count".into()));
    }
    if probes.is_empty() {
        return Err(Error::Invalid("no probes".into()));
    }
    let missing: Vec<String> = probe_ids
        .iter()
        .filter(|p| !gallery_ids.contains(p))
        .map(|p| p.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let mut hits = 0;
    for (i, p) in probes.iter().enumerate() {
        let skip = exclude.map(|e| e[i]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gallery.iter().enumerate() {
            if Some(j) == skip {
                continue;
            }
            let s = similarity(p.as_ref(), g.as_ref(), metric)?;
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        if let Some((j, _)) = best {
            if gallery_ids[j] == probe_ids[i] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Resolves image ids to network inputs.
pub trait ImageSource {
    fn contains(&self, id: &str) -> bool;
    fn load(&self, id: &str) -> Result<Tensor<f32>>;
}

/// Images in a directory as `<id>.ppm`, `<id>.mftn` or a file named `<id>`.
pub struct DirSource {
    pub dir: PathBuf,
    pub input_hw: (usize, usize),
}

impl DirSource {
    fn resolve(&self, id: &str) -> Option<PathBuf> {
        [format!("{id}.ppm"), format!("{id}.mftn"), id.to_string()]
            .into_iter()
            .map(|f| self.dir.join(f))
            .find(|p| p.is_file())
    }
}

impl ImageSource for DirSource {
    fn contains(&self, id: &str) -> bool {
        self.resolve(id).is_some()
    }

    fn load(&self, id: &str) -> Result<Tensor<f32>> {
        let path = self.resolve(id).ok_or_else(|| Error::MissingIds(vec![id.to_string()]))?;
        image::load_input(&path, self.input_hw)
    }
}

impl ImageSource for HashMap<String, Tensor<f32>> {
    fn contains(&self, id: &str) -> bool {
        self.contains_key(id)
    }

    fn load(&self, id: &str) -> Result<Tensor<f32>> {
        self.get(id).cloned().ok_or_else(|| Error::MissingIds(vec![id.to_string()]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    /// One similarity per pair row, in row order.
    pub scores: Vec<f64>,
    pub set: ScoreSet,
}

/// Scores every pair from embeddings looked up by id.
pub fn score_embeddings(
    pairs: &PairList,
    lookup: impl Fn(&str) -> Option<Embedding>,
    metric: Metric,
) -> Result<PairScores> {
    let missing: Vec<String> = pairs
        .unique_ids()
        .into_iter()
        .filter(|id| lookup(id).is_none())
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let scores = pairs
        .rows
        .iter()
        .map(|r| {
            let (a, b) = (lookup(&r.id_a).unwrap(), lookup(&r.id_b).unwrap());
            similarity(a.as_slice(), b.as_slice(), metric)
        })
        .collect::<Result<Vec<_>>>()?;
    let set = ScoreSet::from_rows(&pairs.labels(), &scores)?;
    Ok(PairScores { scores, set })
}

/// Embeds each referenced image once (kept in `cache`) and scores every pair.
pub fn score_pairs(
    net: &Network,
    pairs: &PairList,
    source: &dyn ImageSource,
    metric: Metric,
    cache: &mut HashMap<String, Embedding>,
) -> Result<PairScores> {
    let ids = pairs.unique_ids();
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !cache.contains_key(**id) && !source.contains(id))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    for id in ids {
        if !cache.contains_key(id) {
            let e = net.embed(&source.load(id)?)?.remove(0);
            cache.insert(id.to_string(), e);
        }
    }
    score_embeddings(pairs, |id| cache.get(id).cloned(), metric)
}

/// CSV `id_a,id_b,label,score`.
pub fn score_dump(pairs: &PairList, scores: &[f64]) -> String {
    let mut s = String::from("id_a,id_b,label,score\n");
    for (r, v) in pairs.rows.iter().zip(scores) {
        let _ = writeln!(s, "{},{},{},{}", r.id_a, r.id_b, u8::from(r.genuine), v);
    }
    s
}

/// Sidecar id manifest next to an embedding file.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Writes embeddings as an MFTN `(n, d, 1, 1)` tensor plus `<path>.ids`.
pub fn write_embeddings(path: &Path, ids: &[String], embeddings: &[Embedding]) -> Result<()> {
    if ids.len() != embeddings.len() {
        return Err(Error::Shape(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
    }
    let d = embeddings.first().map_or(0, Embedding::dim);
    if embeddings.iter().any(|e| e.dim() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let data = embeddings.iter().flat_map(|e| e.0.iter().copied()).collect();
    let t = Tensor::from_vec(Shape::new(embeddings.len(), d, 1, 1), data)?;
    let mut buf = Vec::new();
    t.write_mftn(&mut buf)?;
    fs::write(path, buf)?;
    let mut list = ids.join("\n");
    list.push('\n');
    fs::write(ids_path(path), list)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<Embedding>)> {
    let t = Tensor::read_mftn(&fs::read(path)?[..])?;
    let ids: Vec<String> = fs::read_to_string(ids_path(path))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let s = t.shape();
    if ids.len() != s.n {
        return Err(Error::Format(format!(
            "{} ids in manifest for {} embeddings",
            ids.len(),
            s.n
        )));
    }
    let d = s.c * s.h * s.w;
    let embs = t.data().chunks(d.max(1)).take(s.n).map(|c| Embedding(c.to_vec())).collect();
    Ok((ids, embs))
}
