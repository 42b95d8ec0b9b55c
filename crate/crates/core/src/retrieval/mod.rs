//! Exact top-k retrieval over unit embeddings.
//!
//! Similarity is the inner product of stored (f32) vectors accumulated in
//! f64, which equals cosine similarity for unit vectors. Rankings are by
//! descending similarity with ties broken by ascending id, so output does not
//! depend on the number of threads.

mod kernel;
mod store;

pub use store::{EmbeddingStore, STORE_HEADER_LEN, STORE_MAGIC, UNIT_TOLERANCE};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::{for_each_row, open_csv, parse_field};
use crate::error::{Error, Result};

pub const RESULTS_HEADER: [&str; 4] = ["query_id", "rank", "index_id", "similarity"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: u64,
    /// At most `k` neighbors, best first.
    pub neighbors: Vec<Neighbor>,
}

impl QueryResult {
    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub queries: Vec<QueryResult>,
}

fn check_search_args(index: &EmbeddingStore, queries: &EmbeddingStore, k: usize) -> Result<()> {
    if index.dim() != queries.dim() {
        return Err(Error::Argument(format!(
            "index dim {} does not match query dim {}",
            index.dim(),
            queries.dim()
        )));
    }
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".into()));
    }
    Ok(())
}

fn assemble(queries: &EmbeddingStore, lists: Vec<Vec<Neighbor>>) -> RetrievalResult {
    RetrievalResult {
        queries: queries
            .ids()
            .iter()
            .zip(lists)
            .map(|(&query_id, neighbors)| QueryResult {
                query_id,
                neighbors,
            })
            .collect(),
    }
}

/// Exact top-k on the current rayon pool. When `k` exceeds the number of
/// candidates, every candidate is returned (lists are never padded).
pub fn top_k(
    index: &EmbeddingStore,
    queries: &EmbeddingStore,
    k: usize,
    exclude_self: bool,
) -> Result<RetrievalResult> {
    check_search_args(index, queries, k)?;
    let lists = kernel::search(index, queries, k, exclude_self, kernel::detect_isa());
    Ok(assemble(queries, lists))
}

/// [`top_k`] on a dedicated pool of `threads` workers.
pub fn top_k_with_threads(
    index: &EmbeddingStore,
    queries: &EmbeddingStore,
    k: usize,
    exclude_self: bool,
    threads: usize,
) -> Result<RetrievalResult> {
    check_search_args(index, queries, k)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let isa = kernel::detect_isa();
    let lists = pool.install(|| kernel::search(index, queries, k, exclude_self, isa));
    Ok(assemble(queries, lists))
}

/// Reference scan for one query: scores every index vector with a plain
/// sequential f64 dot product and fully sorts.
pub fn exhaustive_top_k(
    index: &EmbeddingStore,
    query: &[f32],
    query_id: u64,
    k: usize,
    exclude_self: bool,
) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = index
        .iter()
        .filter(|(id, _)| !(exclude_self && *id == query_id))
        .map(|(id, v)| {
            let mut s = 0.0f64;
            for (a, b) in query.iter().zip(v) {
                s += *a as f64 * *b as f64;
            }
            Neighbor { id, similarity: s }
        })
        .collect();
    all.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
    all.truncate(k);
    all
}

/// Mean of unit views, renormalized.
pub fn fuse_views(views: &[&[f64]]) -> Result<Vec<f64>> {
    let first = views
        .first()
        .ok_or_else(|| Error::Argument("fuse_views needs at least one view".into()))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for (i, v) in views.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Argument(format!(
                "view {i} has dim {}, expected {dim}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Argument(format!(
                "view {i} has norm {norm}, expected unit length"
            )));
        }
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    let n = views.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Numeric(format!(
            "views cancel out (mean norm {norm:e})"
        )));
    }
    mean.iter_mut().for_each(|m| *m /= norm);
    Ok(mean)
}

/// C-style `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!(
            "{mantissa}e{}{:02}",
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

pub fn write_results(result: &RetrievalResult, path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", RESULTS_HEADER.join(",")).map_err(|e| Error::io(ctx(), e))?;
    for q in &result.queries {
        for (rank, n) in q.neighbors.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                q.query_id,
                rank + 1,
                n.id,
                format_sig9(n.similarity)
            )
            .map_err(|e| Error::io(ctx(), e))?;
        }
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a results CSV. Rows of one query must be contiguous with ranks
/// `1, 2, ...`; queries keep their file order. Queries that had no
/// neighbors do not appear in the file.
pub fn read_results(path: &Path) -> Result<RetrievalResult> {
    let mut reader = open_csv(path, &RESULTS_HEADER)?;
    let mut queries: Vec<QueryResult> = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for_each_row(path, &mut reader, |line, row| {
        let query_id: u64 = parse_field(path, line, row, 0, "query_id")?;
        let rank: usize = parse_field(path, line, row, 1, "rank")?;
        let id: u64 = parse_field(path, line, row, 2, "index_id")?;
        let similarity: f64 = parse_field(path, line, row, 3, "similarity")?;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        match queries.last_mut() {
            Some(q) if q.query_id == query_id => {
                if rank != q.neighbors.len() + 1 {
                    return Err(bad(format!(
                        "query {query_id}: expected rank {}, got {rank}",
                        q.neighbors.len() + 1
                    )));
                }
                q.neighbors.push(Neighbor { id, similarity });
            }
            _ => {
                if seen.insert(query_id, queries.len()).is_some() {
                    return Err(bad(format!("rows for query {query_id} are not contiguous")));
                }
                if rank != 1 {
                    return Err(bad(format!(
                        "query {query_id}: first rank must be 1, got {rank}"
                    )));
                }
                queries.push(QueryResult {
                    query_id,
                    neighbors: vec![Neighbor { id, similarity }],
                });
            }
        }
        Ok(())
    })?;
    Ok(RetrievalResult { queries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(rows: &[(u64, Vec<f32>)]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(rows[0].1.len()).unwrap();
        for (id, v) in rows {
            s.push(*id, v).unwrap();
        }
        s
    }

    fn oracle(
        index: &EmbeddingStore,
        queries: &EmbeddingStore,
        k: usize,
        ex: bool,
    ) -> Vec<Vec<Neighbor>> {
        queries
            .iter()
            .map(|(qid, q)| exhaustive_top_k(index, q, qid, k, ex))
            .collect()
    }

    #[test]
    fn identical_vector_ranks_first() {
        let index = EmbeddingStore::random(50, 16, 1, 0).unwrap();
        let mut queries = EmbeddingStore::new(16).unwrap();
        queries.push(1000, index.vector(17)).unwrap();
        let r = top_k(&index, &queries, 5, false).unwrap();
        assert_eq!(r.queries[0].neighbors[0].id, 17);
        assert!((r.queries[0].neighbors[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let index = store_from(&[
            (9, vec![1.0, 0.0]),
            (4, vec![0.0, 1.0]),
            (7, vec![-1.0, 0.0]),
        ]);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let queries = store_from(&[(0, vec![h, h])]);
        let r = top_k(&index, &queries, 3, false).unwrap();
        assert_eq!(r.queries[0].ids(), vec![4, 9, 7]);
        assert_eq!(
            r.queries[0].neighbors[0].similarity,
            r.queries[0].neighbors[1].similarity
        );
    }

    #[test]
    fn exclude_self_and_short_lists() {
        let store = EmbeddingStore::random(6, 4, 3, 0).unwrap();
        let r = top_k(&store, &store, 10, true).unwrap();
        for q in &r.queries {
            assert_eq!(q.neighbors.len(), 5);
            assert!(!q.ids().contains(&q.query_id));
        }
        let r = top_k(&store, &store, 10, false).unwrap();
        assert!(r
            .queries
            .iter()
            .all(|q| q.neighbors.len() == 6 && q.neighbors[0].id == q.query_id));
    }

    #[test]
    fn argument_errors() {
        let a = EmbeddingStore::random(3, 4, 0, 0).unwrap();
        let b = EmbeddingStore::random(3, 5, 0, 0).unwrap();
        assert!(matches!(top_k(&a, &b, 5, false), Err(Error::Argument(_))));
        assert!(matches!(top_k(&a, &a, 0, false), Err(Error::Argument(_))));
    }

    #[test]
    fn matches_oracle_on_ragged_sizes() {
        for (n, q, dim) in [
            (1, 1, 1),
            (7, 3, 5),
            (8, 9, 64),
            (517, 70, 33),
            (1030, 130, 64),
        ] {
            let index = EmbeddingStore::random(n, dim, n as u64, 10).unwrap();
            let queries = EmbeddingStore::random(q, dim, 99 + q as u64, 5).unwrap();
            for ex in [false, true] {
                let got = top_k(&index, &queries, 5, ex).unwrap();
                let want = oracle(&index, &queries, 5, ex);
                for (g, w) in got.queries.iter().zip(&want) {
                    assert_eq!(&g.neighbors, w, "n={n} q={q} dim={dim}");
                }
            }
        }
    }

    #[test]
    fn all_isas_agree() {
        let index = EmbeddingStore::random(700, 64, 5, 0).unwrap();
        let queries = EmbeddingStore::random(75, 64, 6, 0).unwrap();
        let reference = kernel::search(&index, &queries, 5, false, kernel::Isa::Scalar);
        let detected = kernel::search(&index, &queries, 5, false, kernel::detect_isa());
        assert_eq!(reference, detected);
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            assert_eq!(
                reference,
                kernel::search(&index, &queries, 5, false, kernel::Isa::Avx2)
            );
        }
    }

    #[test]
    fn fuse_examples() {
        let v = [0.6, 0.8, 0.0];
        assert_eq!(fuse_views(&[&v, &v]).unwrap(), v.to_vec());
        let neg = [-0.6, -0.8, 0.0];
        assert!(matches!(fuse_views(&[&v, &neg]), Err(Error::Numeric(_))));
        let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
        let f = fuse_views(&[&a, &b]).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f[0] - r).abs() < 1e-15 && (f[1] - r).abs() < 1e-15);
        assert!(fuse_views(&[]).is_err());
        assert!(fuse_views(&[&[2.0, 0.0][..]]).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.123456789123), "0.123456789");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(
            format_sig9(f64::from(1.0_f32 - f32::EPSILON)),
            "0.999999881"
        );
    }

    #[test]
    fn results_csv_roundtrip() {
        let store = EmbeddingStore::random(20, 8, 4, 0).unwrap();
        let r = top_k(&store, &store, 5, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results(&r, &path).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back.queries.len(), r.queries.len());
        for (a, b) in back.queries.iter().zip(&r.queries) {
            assert_eq!(a.ids(), b.ids());
            for (x, y) in a.neighbors.iter().zip(&b.neighbors) {
                assert!((x.similarity - y.similarity).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fused_output_is_unit(seed in 0u64..1000, views in 1usize..5, dim in 1usize..16) {
            let s = EmbeddingStore::random(views, dim, seed, 0).unwrap();
            let vs: Vec<Vec<f64>> = s.iter().map(|(_, v)| {
                let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            }).collect();
            let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
            if let Ok(f) = fuse_views(&refs) {
                let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn optimized_equals_oracle(seed in 0u64..10_000, n in 1usize..600, q in 1usize..40, dim in 1usize..65, k in 1usize..8) {
            let index = EmbeddingStore::random(n, dim, seed, 0).unwrap();
            let queries = EmbeddingStore::random(q, dim, seed ^ 0xabc, 0).unwrap();
            let got = top_k(&index, &queries, k, true).unwrap();
            let want = oracle(&index, &queries, k, true);
            for (g, w) in got.queries.iter().zip(&want) {
                prop_assert_eq!(&g.neighbors, w);
            }
        }

        #[test]
        fn appending_only_inserts(seed in 0u64..10_000, n in 2usize..200, dim in 1usize..12) {
            let base = EmbeddingStore::random(n, dim, seed, 0).unwrap();
            let extra = EmbeddingStore::random(1, dim, seed + 1, n as u64).unwrap();
            let mut grown = base.clone();
            grown.push(n as u64, extra.vector(0)).unwrap();
            let queries = EmbeddingStore::random(4, dim, seed + 2, 1_000_000).unwrap();
            let before = top_k(&base, &queries, 5, false).unwrap();
            let after = top_k(&grown, &queries, 5, false).unwrap();
            for (b, a) in before.queries.iter().zip(&after.queries) {
                let without_new: Vec<u64> = a.ids().into_iter().filter(|&id| id != n as u64).collect();
                let keep = without_new.len();
                prop_assert_eq!(&without_new[..], &b.ids()[..keep]);
            }
        }
    }
}
