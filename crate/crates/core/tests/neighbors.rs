use std::collections::BTreeSet;

use protoedit::corpus::{Corpus, Vocabulary};
use protoedit::neighbors::{jaccard_distance, mine_pairs_bfs, signature_with, LshIndex, LshParams, MinHasher};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn nonempty_subsets(universe: &[u32]) -> Vec<Vec<u32>> {
    (1u32..1 << universe.len())
        .map(|mask| universe.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &t)| t).collect())
        .collect()
}

#[test]
fn single_hash_collision_rate_is_jaccard_over_all_permutations() {
    let universe = [0u32, 1, 2, 3];
    let perms = permutations(&universe);
    assert_eq!(perms.len(), 24);
    // hash row i ranks a token by its position in permutation i
    let rank = |i: usize, t: u32| perms[i].iter().position(|&u| u == t).unwrap() as u64;
    let subsets = nonempty_subsets(&universe);
    for a in &subsets {
        for b in &subsets {
            let sa = signature_with(a, perms.len(), rank);
            let sb = signature_with(b, perms.len(), rank);
            let j = 1.0 - jaccard_distance(a, b).unwrap();
            assert!((sa.similarity(&sb) - j).abs() < 1e-12, "{a:?} {b:?}");
        }
    }
}

#[test]
fn seeded_hash_family_estimates_jaccard() {
    let hasher = MinHasher::new(20_000, 3);
    let a: Vec<u32> = (0..30).collect();
    for (b, j) in [((10..40).collect::<Vec<u32>>(), 0.5), ((20..50).collect(), 0.2), ((0..30).collect(), 1.0)] {
        let s = hasher.signature(&a).similarity(&hasher.signature(&b));
        let sd = (j * (1.0 - j) / 20_000f64).sqrt();
        assert!((s - j).abs() <= 4.0 * sd + 1e-12, "{s} vs {j}");
    }
}

#[test]
fn bfs_edges_stay_inside_clusters_and_match_brute_force() {
    // 10 clusters of 12 sentences; clusters share no words, and members of
    // a cluster share a 6-word core plus two of ten private words.
    let mut lines = Vec::new();
    for c in 0..10 {
        for s in 0..12 {
            let mut words: Vec<String> = (0..6).map(|k| format!("c{c}w{k}")).collect();
            words.push(format!("c{c}x{}", s % 10));
            words.push(format!("c{c}x{}", (s * 3 + 1) % 10));
            lines.push(words.join(" "));
        }
    }
    let vocab = Vocabulary::build(&lines, 10_000).unwrap();
    let (corpus, _) = Corpus::ingest(&lines, &vocab, 50);
    let index = LshIndex::build(&corpus, LshParams::default()).unwrap();
    let mined = mine_pairs_bfs(&index, 10, usize::MAX, &mut ChaCha8Rng::seed_from_u64(8));

    let mut brute = BTreeSet::new();
    for a in 0..corpus.len() {
        for b in a + 1..corpus.len() {
            let d = jaccard_distance(&corpus.sentences[a].ids, &corpus.sentences[b].ids).unwrap();
            if d < 0.5 {
                brute.insert((a, b));
            }
        }
    }
    assert!(brute.iter().all(|&(a, b)| a / 12 == b / 12));
    for e in &mined.edges {
        assert!(brute.contains(&(e.proto_id, e.target_id)), "{e:?}");
        let d = jaccard_distance(&corpus.sentences[e.proto_id].ids, &corpus.sentences[e.target_id].ids).unwrap();
        assert_eq!(e.distance, d);
    }
    // Every cluster reached by a seed is one connected component, so BFS
    // recovers most of its brute-force edges.
    let reached: BTreeSet<usize> = mined.edges.iter().map(|e| e.proto_id / 12).collect();
    let in_reached = brute.iter().filter(|(a, _)| reached.contains(&(a / 12))).count();
    assert!(mined.edges.len() as f64 >= 0.9 * in_reached as f64, "{} of {in_reached}", mined.edges.len());
    assert_eq!(mined.visited, reached.len() * 12);
}
