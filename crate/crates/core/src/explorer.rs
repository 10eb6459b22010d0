//! 2-D concept layout and the JSON bundle read by the concept explorer.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::concepts::{ediff_histogram, rank_concepts, ConceptClass, ConceptScore, Rankings, Thresholds, DEFAULT_BINS};
use crate::cooccur::{fix_sign, CooccurrenceMatrix};
use crate::error::{Error, Result};
use crate::rasae::{Dictionary, SparseCodeMatrix};
use crate::stats::Histogram;
use crate::tensorio::{read_bytes, write_bytes, TokenGrouping};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_EXEMPLARS: usize = 4;
pub const DEFAULT_PARTNERS: usize = 10;

/// JSON schema for [`ExportBundle`] files.
pub const BUNDLE_SCHEMA: &str = include_str!("../schema/bundle.schema.json");

/// Components whose variance falls below this fraction of the leading one are
/// treated as absent.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// Free-form tag, e.g. `pca-atoms` or `umap` for injected coordinates.
    pub method: String,
    pub coords: Vec<[f64; 2]>,
}

/// PCA of the dictionary atoms.
pub fn embed_2d(dict: &Dictionary) -> Result<Embedding> {
    Ok(Embedding {
        method: "pca-atoms".into(),
        coords: pca_2d(&dict.atoms, dict.n_concepts, dict.dim)?,
    })
}

/// PCA of the rows of the co-activation matrix, an alternative layout that
/// places concepts by how they are used rather than by their atoms.
pub fn embed_cooccurrence(c: &CooccurrenceMatrix) -> Result<Embedding> {
    Ok(Embedding {
        method: "pca-cooccurrence".into(),
        coords: pca_2d(&c.to_dense(), c.dim(), c.dim())?,
    })
}

/// First two principal coordinates of `n` row-major rows of width `dim`.
/// Each loading vector has its largest-magnitude entry positive.
pub fn pca_2d(rows: &[f64], n: usize, dim: usize) -> Result<Vec<[f64; 2]>> {
    if rows.len() != n * dim {
        return Err(Error::Shape(format!("{} values for {n}x{dim} rows", rows.len())));
    }
    if n == 0 || dim == 0 {
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let mut x = DMatrix::from_row_slice(n, dim, rows);
    for j in 0..dim {
        let m = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-m);
    }
    // Decompose whichever Gram matrix is smaller.
    let (eig, via_rows) = if dim <= n {
        (SymmetricEigen::new(x.tr_mul(&x)), false)
    } else {
        (SymmetricEigen::new(&x * x.transpose()), true)
    };
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lead = eig.eigenvalues[order[0]].max(0.0);
    let mut out = vec![[0.0, 0.0]; n];
    for (c, &i) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[i];
        if !(lambda > RANK_TOL * lead) {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        let mut loading: Vec<f64> = if via_rows {
            let w = x.tr_mul(&v);
            let norm = w.norm();
            w.iter().map(|a| a / norm).collect()
        } else {
            v.iter().cloned().collect()
        };
        fix_sign(&mut loading);
        for (r, o) in out.iter_mut().enumerate() {
            o[c] = x.row(r).iter().zip(&loading).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Image ids with the highest max-over-tokens activation of `concept`,
/// strongest first, ties by id. Images where it never fires are skipped.
pub fn top_exemplars(
    codes: &SparseCodeMatrix,
    grouping: TokenGrouping,
    image_ids: &[String],
    concept: usize,
    n: usize,
) -> Result<Vec<String>> {
    if concept >= codes.n_concepts() {
        return Err(Error::Argument(format!(
            "concept {concept} out of range for {} concepts",
            codes.n_concepts()
        )));
    }
    Ok(exemplar_table(codes, grouping, image_ids, n)?.swap_remove(concept))
}

/// Exemplar lists for every concept in one pass over the codes.
fn exemplar_table(
    codes: &SparseCodeMatrix,
    grouping: TokenGrouping,
    image_ids: &[String],
    n: usize,
) -> Result<Vec<Vec<String>>> {
    grouping.check_rows(codes.n_rows())?;
    if image_ids.len() != grouping.image_count {
        return Err(Error::Shape(format!(
            "{} image ids for {} images",
            image_ids.len(),
            grouping.image_count
        )));
    }
    let mut best: Vec<Vec<(f64, usize)>> = vec![Vec::new(); codes.n_concepts()];
    let mut peak = vec![0.0f64; codes.n_concepts()];
    let mut touched = Vec::new();
    for img in 0..grouping.image_count {
        for r in grouping.image_rows(img) {
            for (j, a) in codes.row_entries(r) {
                if peak[j] == 0.0 {
                    touched.push(j);
                }
                peak[j] = peak[j].max(a);
            }
        }
        for &j in &touched {
            best[j].push((peak[j], img));
            peak[j] = 0.0;
        }
        touched.clear();
    }
    Ok(best
        .into_iter()
        .map(|mut list| {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| image_ids[a.1].cmp(&image_ids[b.1])));
            list.truncate(n);
            list.into_iter().map(|(_, i)| image_ids[i].clone()).collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partner {
    pub concept_id: usize,
    pub weight: f64,
}

/// Strongest co-activation partners of `concept`, excluding itself.
pub fn top_partners(c: &CooccurrenceMatrix, concept: usize, n: usize) -> Vec<Partner> {
    let mut p: Vec<Partner> = c
        .row(concept)
        .filter(|&(j, _)| j != concept)
        .map(|(j, w)| Partner { concept_id: j, weight: w })
        .collect();
    p.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.concept_id.cmp(&b.concept_id)));
    p.truncate(n);
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConcept {
    pub concept_id: usize,
    pub x: f64,
    pub y: f64,
    pub ediff: f64,
    pub delta: f64,
    pub frequency: u64,
    pub class: ConceptClass,
    pub top_real_image_ids: Vec<String>,
    pub top_gen_image_ids: Vec<String>,
    pub cooccurring: Vec<Partner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub n_concepts: usize,
    pub thresholds: Thresholds,
    pub temperature: f64,
    pub created_at: String,
    /// Directory of `<image id>.png` thumbnails, relative to the bundle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnails: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub schema_version: u32,
    pub model_name: String,
    pub embedding_method: String,
    pub concepts: Vec<BundleConcept>,
    pub rankings: Rankings,
    pub histogram: Histogram,
    pub metadata: BundleMetadata,
}

/// Codes of one image set together with the ids of its images.
#[derive(Debug, Clone, Copy)]
pub struct ExemplarSource<'a> {
    pub codes: &'a SparseCodeMatrix,
    pub grouping: TokenGrouping,
    pub image_ids: &'a [String],
}

/// Everything a bundle is assembled from. A `None` stage is reported as a
/// dependency error.
#[derive(Debug, Clone)]
pub struct BundleInputs<'a> {
    pub model_name: &'a str,
    pub scores: Option<&'a [ConceptScore]>,
    pub embedding: Option<&'a Embedding>,
    pub real: Option<ExemplarSource<'a>>,
    pub generated: Option<ExemplarSource<'a>>,
    /// Co-activation matrix of the generated codes.
    pub cooccurrence: Option<&'a CooccurrenceMatrix>,
    pub thresholds: Thresholds,
    pub created_at: String,
    pub thumbnails: Option<String>,
    pub exemplars: usize,
    pub partners: usize,
}

fn need<T>(v: Option<T>, stage: &str) -> Result<T> {
    v.ok_or_else(|| Error::Dependency { stage: stage.into() })
}

pub fn build_bundle(inputs: &BundleInputs) -> Result<ExportBundle> {
    let scores = need(inputs.scores, "energy-diff")?;
    let embedding = need(inputs.embedding, "embedding")?;
    let real = need(inputs.real, "encode-real")?;
    let generated = need(inputs.generated, "encode-generated")?;
    let c = need(inputs.cooccurrence, "cooccur")?;
    inputs.thresholds.validate()?;

    let k = scores.len();
    for (i, s) in scores.iter().enumerate() {
        if s.concept_id != i {
            return Err(Error::Validation(format!("score {i} carries concept id {}", s.concept_id)));
        }
    }
    let sizes = [
        ("embedding", embedding.coords.len()),
        ("real codes", real.codes.n_concepts()),
        ("generated codes", generated.codes.n_concepts()),
        ("co-occurrence", c.dim()),
    ];
    for (what, n) in sizes {
        if n != k {
            return Err(Error::Shape(format!("{what} covers {n} concepts, scores cover {k}")));
        }
    }
    let top_real = exemplar_table(real.codes, real.grouping, real.image_ids, inputs.exemplars)?;
    let top_gen = exemplar_table(generated.codes, generated.grouping, generated.image_ids, inputs.exemplars)?;

    let concepts = scores
        .iter()
        .zip(top_real)
        .zip(top_gen)
        .map(|((s, tr), tg)| {
            let [x, y] = embedding.coords[s.concept_id];
            BundleConcept {
                concept_id: s.concept_id,
                x,
                y,
                ediff: s.ediff,
                delta: s.delta,
                frequency: s.frequency,
                class: s.class,
                top_real_image_ids: tr,
                top_gen_image_ids: tg,
                cooccurring: top_partners(c, s.concept_id, inputs.partners),
            }
        })
        .collect();
    let bundle = ExportBundle {
        schema_version: SCHEMA_VERSION,
        model_name: inputs.model_name.into(),
        embedding_method: embedding.method.clone(),
        concepts,
        rankings: rank_concepts(scores),
        histogram: ediff_histogram(scores, DEFAULT_BINS)?,
        metadata: BundleMetadata {
            n_concepts: k,
            thresholds: inputs.thresholds,
            temperature: inputs.thresholds.temperature,
            created_at: inputs.created_at.clone(),
            thumbnails: inputs.thumbnails.clone(),
        },
    };
    bundle.check()?;
    Ok(bundle)
}

/// Bundle timestamp: the explicit value if given (RFC 3339), else
/// `SOURCE_DATE_EPOCH`, else the Unix epoch, so exports stay reproducible.
pub fn resolve_created_at(explicit: Option<&str>) -> Result<String> {
    if let Some(s) = explicit {
        chrono::DateTime::parse_from_rfc3339(s)
            .map_err(|e| Error::Validation(format!("created_at `{s}` is not RFC 3339: {e}")))?;
        return Ok(s.to_string());
    }
    let secs = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::Validation(format!("SOURCE_DATE_EPOCH `{v}` is not an integer")))?,
        Err(_) => 0,
    };
    let t = chrono::DateTime::from_timestamp(secs, 0)
        .ok_or_else(|| Error::Validation(format!("SOURCE_DATE_EPOCH {secs} is out of range")))?;
    Ok(t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

impl ExportBundle {
    /// Checks ids, ranking order and class labels against the concept list.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported bundle schema {}", self.schema_version)));
        }
        let k = self.metadata.n_concepts;
        if self.concepts.len() != k {
            return Err(Error::Validation(format!("{} concepts listed, metadata says {k}", self.concepts.len())));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.concept_id != i {
                return Err(Error::Validation(format!("concept {i} carries id {}", c.concept_id)));
            }
            if let Some(p) = c.cooccurring.iter().find(|p| p.concept_id >= k) {
                return Err(Error::Validation(format!("concept {i} links to unknown concept {}", p.concept_id)));
            }
            if self.metadata.thresholds.classify(c.ediff) != c.class {
                return Err(Error::Validation(format!("concept {i} class disagrees with its ediff")));
            }
        }
        let scores: Vec<ConceptScore> = self
            .concepts
            .iter()
            .map(|c| ConceptScore {
                concept_id: c.concept_id,
                ediff: c.ediff,
                delta: c.delta,
                frequency: c.frequency,
                class: c.class,
            })
            .collect();
        if rank_concepts(&scores) != self.rankings {
            return Err(Error::Validation("rankings do not follow the concept list".into()));
        }
        Ok(())
    }

    /// Bitwise comparison of every Ediff with the scores it was built from.
    pub fn matches_scores(&self, scores: &[ConceptScore]) -> bool {
        self.concepts.len() == scores.len()
            && self
                .concepts
                .iter()
                .zip(scores)
                .all(|(c, s)| c.concept_id == s.concept_id && c.ediff.to_bits() == s.ediff.to_bits())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::json("bundle", e))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let b: Self =
            serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(path.display().to_string(), e))?;
        b.check()?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::energy_difference;
    use crate::concepts::EnergyVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn planar_atoms_keep_their_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 12;
        let basis = DMatrix::from_fn(d, 2, |_, _| rng.random::<f64>() - 0.5).qr().q();
        let n = 20;
        let plane: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>()]).collect();
        let mut rows = Vec::new();
        for p in &plane {
            for r in 0..d {
                rows.push(p[0] * basis[(r, 0)] + p[1] * basis[(r, 1)] + 0.3);
            }
        }
        for (n_rows, dim, data) in [(n, d, rows.clone())] {
            let coords = pca_2d(&data, n_rows, dim).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((dist(coords[i], coords[j]) - dist(plane[i], plane[j])).abs());
                }
            }
            assert!(worst < 1e-8, "{worst}");
        }
        // Same data, wide layout (more columns than rows) goes through the
        // other Gram matrix.
        let few = &rows[..5 * d];
        let coords = pca_2d(few, 5, d).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((dist(coords[i], coords[j]) - dist(plane[i], plane[j])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn identical_atoms_collapse_to_origin() {
        let rows = [1.0, -2.0, 3.0].repeat(7);
        assert!(pca_2d(&rows, 7, 3).unwrap().iter().all(|c| *c == [0.0, 0.0]));
    }

    #[test]
    fn collinear_atoms_have_no_second_component() {
        let rows: Vec<f64> = (0..6).flat_map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let c = pca_2d(&rows, 6, 3).unwrap();
        assert!(c.iter().all(|p| p[1] == 0.0));
        let span = c[5][0] - c[0][0];
        assert!((span.abs() - 5.0 * 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sign_convention_is_fixed() {
        let rows = vec![0.0, 0.0, 3.0, 0.1, 6.0, 0.0];
        let flipped: Vec<f64> = rows.iter().map(|v| -v).collect();
        let a = pca_2d(&rows, 3, 2).unwrap();
        let b = pca_2d(&flipped, 3, 2).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] + q[0]).abs() < 1e-12);
        }
        // The dominant loading is on the first axis and positive, so the
        // largest original x gets the largest coordinate.
        assert!(a[2][0] > a[0][0]);
    }

    fn codes(rows: Vec<Vec<(usize, f64)>>, k: usize) -> SparseCodeMatrix {
        SparseCodeMatrix::from_rows(k, rows).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    #[test]
    fn exemplar_cases() {
        let g = TokenGrouping::new(2, 3).unwrap();
        let z = codes(
            vec![vec![(0, 5.0)], vec![(0, 1.0)], vec![(0, 2.0)], vec![], vec![(0, 9.0), (1, 1.0)], vec![]],
            3,
        );
        assert_eq!(top_exemplars(&z, g, &ids(3), 0, 2).unwrap(), vec!["img2", "img0"]);
        assert_eq!(top_exemplars(&z, g, &ids(3), 1, 4).unwrap(), vec!["img2"]);
        assert!(top_exemplars(&z, g, &ids(3), 2, 4).unwrap().is_empty());
        assert!(top_exemplars(&z, g, &ids(3), 3, 4).is_err());

        let tied = codes(vec![vec![(0, 1.0)], vec![(0, 1.0)], vec![(0, 1.0)]], 1);
        let names = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        let g = TokenGrouping::new(1, 3).unwrap();
        assert_eq!(top_exemplars(&tied, g, &names, 0, 3).unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn partners_skip_the_diagonal() {
        let dense = vec![9.0, 1.0, 3.0, 1.0, 1.0, 0.0, 3.0, 0.0, 4.0];
        let c = CooccurrenceMatrix::from_dense(3, &dense).unwrap();
        let p = top_partners(&c, 0, 10);
        assert_eq!(p, vec![Partner { concept_id: 2, weight: 3.0 }, Partner { concept_id: 1, weight: 1.0 }]);
        assert_eq!(top_partners(&c, 0, 1).len(), 1);
        assert!(top_partners(&c, 1, 10).iter().all(|q| q.concept_id == 0));
    }

    struct Fixture {
        scores: Vec<ConceptScore>,
        embedding: Embedding,
        real: SparseCodeMatrix,
        gen: SparseCodeMatrix,
        c: CooccurrenceMatrix,
        grouping: TokenGrouping,
        ids: Vec<String>,
    }

    fn fixture(k: usize, n_img: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 2;
        let mut draw = |boost: f64| {
            let rows: Vec<Vec<(usize, f64)>> = (0..n_img * t)
                .map(|_| {
                    let mut r = Vec::new();
                    for j in 0..k {
                        if rng.random::<f64>() < 0.2 && r.len() < 3 {
                            r.push((j, rng.random::<f64>() * if j == 0 { boost } else { 1.0 } + 0.01));
                        }
                    }
                    r
                })
                .collect();
            codes(rows, k)
        };
        let real = draw(1.0);
        let gen = draw(30.0);
        let grouping = TokenGrouping::new(t, n_img).unwrap();
        let ids = ids(n_img);
        let agg = |z: &SparseCodeMatrix| {
            crate::concepts::aggregate_energies(z, grouping, Default::default(), &ids).unwrap()
        };
        let er: Vec<EnergyVector> = agg(&real);
        let eg = agg(&gen);
        let scores = energy_difference(&er, &eg, &Thresholds::default()).unwrap();
        let atoms: Vec<f64> = (0..k * 5).map(|_| rng.random::<f64>()).collect();
        let embedding = embed_2d(&Dictionary::new(k, 5, atoms).unwrap()).unwrap();
        let c = crate::cooccur::cooccurrence(&gen);
        Fixture {
            scores,
            embedding,
            real,
            gen,
            c,
            grouping,
            ids,
        }
    }

    fn inputs(f: &Fixture) -> BundleInputs<'_> {
        BundleInputs {
            model_name: "toy",
            scores: Some(&f.scores),
            embedding: Some(&f.embedding),
            real: Some(ExemplarSource {
                codes: &f.real,
                grouping: f.grouping,
                image_ids: &f.ids,
            }),
            generated: Some(ExemplarSource {
                codes: &f.gen,
                grouping: f.grouping,
                image_ids: &f.ids,
            }),
            cooccurrence: Some(&f.c),
            thresholds: Thresholds::default(),
            created_at: "2020-01-01T00:00:00Z".into(),
            thumbnails: None,
            exemplars: DEFAULT_EXEMPLARS,
            partners: DEFAULT_PARTNERS,
        }
    }

    #[test]
    fn bundle_is_consistent_and_reproducible() {
        let f = fixture(16, 10, 1);
        let b = build_bundle(&inputs(&f)).unwrap();
        b.check().unwrap();
        assert!(b.matches_scores(&f.scores));
        assert_eq!(b.concepts.len(), 16);
        assert_eq!(b.histogram.total(), 16);
        assert!(b.concepts.iter().all(|c| c.cooccurring.len() <= 10 && c.top_real_image_ids.len() <= 4));
        assert_eq!(b.rankings.exaggerated.first(), Some(&0));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        b.save(&p).unwrap();
        let back = ExportBundle::load(&p).unwrap();
        assert!(back.matches_scores(&f.scores));
        assert_eq!(back, b);
        let again = build_bundle(&inputs(&fixture(16, 10, 1))).unwrap();
        assert_eq!(again.to_json().unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn timestamps() {
        assert_eq!(resolve_created_at(Some("2024-05-01T12:00:00Z")).unwrap(), "2024-05-01T12:00:00Z");
        assert!(resolve_created_at(Some("yesterday")).is_err());
        if std::env::var("SOURCE_DATE_EPOCH").is_err() {
            assert_eq!(resolve_created_at(None).unwrap(), "1970-01-01T00:00:00Z");
        }
    }

    #[test]
    fn wrong_thresholds_are_rejected() {
        let f = fixture(16, 10, 1);
        let mut i = inputs(&f);
        // Move a neutral concept below the lower threshold.
        let e = f.scores.iter().map(|s| s.ediff).find(|e| (0.1..=0.9).contains(e)).unwrap();
        let lambda_min = (e + 1.0) / 2.0;
        i.thresholds = Thresholds {
            lambda_min,
            lambda_max: (lambda_min + 1.0) / 2.0,
            temperature: 0.8,
        };
        assert!(matches!(build_bundle(&i), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_stages_are_named() {
        let f = fixture(4, 3, 2);
        let cases: [(&str, fn(&mut BundleInputs)); 5] = [
            ("energy-diff", |i| i.scores = None),
            ("embedding", |i| i.embedding = None),
            ("encode-real", |i| i.real = None),
            ("encode-generated", |i| i.generated = None),
            ("cooccur", |i| i.cooccurrence = None),
        ];
        for (stage, drop) in cases {
            let mut i = inputs(&f);
            drop(&mut i);
            match build_bundle(&i) {
                Err(Error::Dependency { stage: s }) => assert_eq!(s, stage),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn tampered_bundles_fail_the_check() {
        let f = fixture(8, 6, 3);
        let b = build_bundle(&inputs(&f)).unwrap();
        let mut swapped = b.clone();
        swapped.rankings.suppressed.reverse();
        swapped.rankings.exaggerated.reverse();
        if swapped.rankings != b.rankings {
            assert!(swapped.check().is_err());
        }
        let mut bad_link = b.clone();
        bad_link.concepts[0].cooccurring.push(Partner { concept_id: 8, weight: 1.0 });
        assert!(bad_link.check().is_err());
        let mut relabeled = b.clone();
        relabeled.concepts[0].ediff = 0.5;
        assert!(relabeled.check().is_err());
    }

    #[test]
    fn schema_accepts_exported_bundles() {
        let schema: serde_json::Value = serde_json::from_str(BUNDLE_SCHEMA).unwrap();
        let validator = jsonschema::validator_for(&schema).unwrap();
        let f = fixture(16, 10, 4);
        let mut i = inputs(&f);
        i.thumbnails = Some("thumbs".into());
        let doc: serde_json::Value = serde_json::from_slice(&build_bundle(&i).unwrap().to_json().unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");

        let mut broken = doc.clone();
        broken["schema_version"] = 2.into();
        assert!(!validator.is_valid(&broken));
        let mut broken = doc.clone();
        broken["concepts"][0]["class"] = "odd".into();
        assert!(!validator.is_valid(&broken));
        let mut broken = doc;
        broken.as_object_mut().unwrap().remove("rankings");
        assert!(!validator.is_valid(&broken));
    }

    proptest! {
        #[test]
        fn first_component_dominates(seed in 0u64..500, n in 3usize..15, d in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
            let a = pca_2d(&rows, n, d).unwrap();
            let var = |c: usize| a.iter().map(|p| p[c] * p[c]).sum::<f64>();
            prop_assert!(var(0) + 1e-12 >= var(1));
            let mean: f64 = a.iter().map(|p| p[0]).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert_eq!(a, pca_2d(&rows, n, d).unwrap());
        }

        #[test]
        fn rankings_rebuild_from_bundle(seed in 0u64..200) {
            let f = fixture(8, 5, seed);
            let b = build_bundle(&inputs(&f)).unwrap();
            prop_assert!(b.check().is_ok());
            prop_assert!(b.matches_scores(&f.scores));
        }
    }
}
