use cirfuse::engine::{
    balance, balanced_similarity, cosine_scores, minmax_normalize, rank_subset, top_k,
    BalanceParams, Normalization, ScoreKind,
};
use cirfuse::fusion::{robust_proxy, scale_factor, FusionInputs, FusionWeights};
use cirfuse::kernel::BlockSizes;
use cirfuse::layout::{parse_layout, serialize_layout};
use cirfuse::metrics::{map_at_k, recall_at_k, subset_recall_at_k};
use cirfuse::store::{read_embedding_set, write_embedding_set_to};
use cirfuse::synth::{generate, SynthSpec};
use cirfuse::{
    duplicate_image_instances, l2_normalize, resolve_manifest, validate_layout, BBox, Embedding,
    EmbeddingSet, Error, Kernel, LayoutInstance, Modality, ProxyLayout, Role, SimilarityVector,
};
use proptest::prelude::*;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, dim)
}

fn nonzero_vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    vector(dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn embedding_set() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..12, 0usize..20)
        .prop_flat_map(|(dim, n)| {
            let bits = prop::collection::vec(any::<u32>(), dim * n);
            let names = prop::collection::vec("[a-z0-9_./-]{1,12}", n);
            (Just(dim), bits, names)
        })
        .prop_filter_map("unique ids", |(dim, bits, names)| {
            let mut ids: Vec<String> = names
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{s}#{i}"))
                .collect();
            ids.dedup();
            let matrix: Vec<f32> = bits
                .into_iter()
                .map(f32::from_bits)
                .map(|x| if x.is_finite() { x } else { 0.5 })
                .collect();
            EmbeddingSet::new(Role::ProxyImage, dim, ids, matrix).ok()
        })
}

fn layout() -> impl Strategy<Value = ProxyLayout> {
    let modality = prop_oneof![
        Just(Modality::Text),
        Just(Modality::Image),
        Just(Modality::ImageAndText)
    ];
    let instance = (
        "[a-z][a-z ]{0,15}",
        0.0f64..0.9,
        0.0f64..0.9,
        0.01f64..0.1,
        0.01f64..0.1,
        modality,
    )
        .prop_map(|(desc, x, y, w, h, modality)| LayoutInstance {
            description: desc,
            bbox: BBox::new(x, y, x + w, y + h),
            modality,
        });
    ("[a-z][a-z ]{0,20}", prop::collection::vec(instance, 1..6))
        .prop_map(|(scene, instances)| ProxyLayout { scene, instances })
}

fn scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    // a small value set so ties are frequent
    prop::collection::vec((0u8..12).prop_map(|v| f64::from(v) / 11.0), n)
}

fn ranked_instance() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<usize>)> {
    (6usize..40).prop_flat_map(|n| {
        (
            scores(n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            1usize..5,
            3usize..6,
        )
            .prop_map(|(s, perm, g, extra)| {
                let mut gt = perm[..g].to_vec();
                gt.sort_unstable();
                let subset = perm[..(g + extra).min(perm.len())].to_vec();
                (s, gt, subset)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn embedding_set_round_trip(set in embedding_set()) {
        let mut buf = Vec::new();
        write_embedding_set_to(&mut buf, &set).unwrap();
        let back = read_embedding_set(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.ids(), set.ids());
        let a: Vec<u32> = back.matrix().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = set.matrix().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalized_vectors_have_unit_norm(v in (1usize..300).prop_flat_map(nonzero_vector)) {
        let n = l2_normalize(&Embedding::new(v).unwrap());
        prop_assert!(!n.zero);
        let dot: f64 = n.embedding.values().iter().map(|&x| f64::from(x) * f64::from(x)).sum();
        prop_assert!((dot - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_dangling_reference_always_fails(seed in 0u64..1000, pick in any::<prop::sample::Index>(), field in 0usize..6) {
        let d = generate(&SynthSpec::new(4, 40, 5, 0.5, 0.2, 2, seed)).unwrap();
        prop_assert!(resolve_manifest(&d.manifest, d.sets.clone()).is_ok());
        let mut m = d.manifest.clone();
        let q = &mut m.queries[pick.index(5)];
        let bogus = "no-such-id".to_string();
        match field {
            0 => q.query_image = bogus,
            1 => q.proxy_images[1] = bogus,
            2 => q.target_captions[0] = bogus,
            3 => q.origin_captions[2] = bogus,
            4 => q.ground_truth[0] = bogus,
            _ => q.subset.as_mut().unwrap()[3] = bogus,
        }
        let err = resolve_manifest(&m, d.sets).unwrap_err();
        prop_assert!(matches!(err, Error::Resolution { .. }), "{err}");
    }

    #[test]
    fn rescaling_inputs_rescales_output(
        (p, q, t, o) in (2usize..40).prop_flat_map(|d| (vector(d), vector(d), vector(d), vector(d))),
        exp in -6i32..6,
    ) {
        let c = 2f32.powi(exp);
        let mk = |v: &[f32], c: f32| Embedding::new(v.iter().map(|x| x * c).collect()).unwrap();
        let w = FusionWeights::default();
        let base = robust_proxy(&FusionInputs::new(mk(&p, 1.0), mk(&q, 1.0), mk(&t, 1.0), mk(&o, 1.0)).unwrap(), &w).unwrap();
        let scaled = robust_proxy(&FusionInputs::new(mk(&p, c), mk(&q, c), mk(&t, c), mk(&o, c)).unwrap(), &w).unwrap();
        for (a, b) in base.embedding.values().iter().zip(scaled.embedding.values()) {
            prop_assert_eq!((a * c).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rescaling_keeps_gallery_ranking(
        (p, q, t, o, g) in (2usize..24).prop_flat_map(|d| (
            nonzero_vector(d), vector(d), vector(d), vector(d), prop::collection::vec(nonzero_vector(d), 30),
        )),
        c in 0.01f32..100.0,
    ) {
        let dim = p.len();
        let gallery = EmbeddingSet::new(
            Role::Gallery,
            dim,
            (0..g.len()).map(|i| format!("g{i}")).collect(),
            g.concat(),
        ).unwrap();
        let rank = |c: f32| {
            let mk = |v: &[f32]| Embedding::new(v.iter().map(|x| x * c).collect()).unwrap();
            let rp = robust_proxy(&FusionInputs::new(mk(&p), mk(&q), mk(&t), mk(&o)).unwrap(), &FusionWeights::default()).unwrap();
            cosine_scores(&rp.embedding, &gallery).unwrap()
        };
        let (a, b) = (rank(1.0), rank(c));
        let order = |s: &[f32]| {
            let v = SimilarityVector::new("q", ScoreKind::Proxy, s.iter().map(|&x| f64::from(x)).collect()).unwrap();
            top_k(&v, s.len()).unwrap().indices().collect::<Vec<_>>()
        };
        let (oa, ob) = (order(&a), order(&b));
        // positions may only swap between scores closer than float noise
        for (x, y) in oa.iter().zip(&ob) {
            prop_assert!(x == y || (a[*x] - a[*y]).abs() < 1e-5, "{oa:?} vs {ob:?}");
        }
    }

    #[test]
    fn zero_perturbation_drops_the_term(
        (p, q, o) in (2usize..40).prop_flat_map(|d| (vector(d), vector(d), vector(d))),
        wq in 0.0f32..3.0, ws in 0.0f32..3.0, wp in 0.0f32..3.0,
    ) {
        let e = |v: &[f32]| Embedding::new(v.to_vec()).unwrap();
        let w = FusionWeights::new(wq, ws, wp).unwrap();
        let rp = robust_proxy(&FusionInputs::new(e(&p), e(&q), e(&o), e(&o)).unwrap(), &w).unwrap();
        let a = scale_factor(&e(&p), &e(&q));
        for (d, &got) in rp.embedding.values().iter().enumerate() {
            prop_assert_eq!(got.to_bits(), (wp * p[d] + (wq * a) * q[d] + 0.0).to_bits());
        }
    }

    #[test]
    fn fusion_is_the_weighted_sum(
        (p, q, t, o) in (1usize..64).prop_flat_map(|d| (vector(d), vector(d), vector(d), vector(d))),
        wq in 0.0f32..3.0, ws in 0.0f32..3.0, wp in 0.0f32..3.0,
    ) {
        let e = |v: &[f32]| Embedding::new(v.to_vec()).unwrap();
        let w = FusionWeights::new(wq, ws, wp).unwrap();
        let rp = robust_proxy(&FusionInputs::new(e(&p), e(&q), e(&t), e(&o)).unwrap(), &w).unwrap();
        let maxabs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let f = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        let (fp, fq) = (f(&p), f(&q));
        let fs: Vec<f64> = t.iter().zip(&o).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
        let ratio = |v: &[f64]| if maxabs(v) < 1e-12 { 0.0 } else { maxabs(&fp) / maxabs(v) };
        let want: Vec<f64> = (0..p.len())
            .map(|d| f64::from(wp) * fp[d] + f64::from(wq) * ratio(&fq) * fq[d] + f64::from(ws) * ratio(&fs) * fs[d])
            .collect();
        let scale = maxabs(&want).max(1e-30);
        for (g, w) in rp.embedding.values().iter().zip(&want) {
            prop_assert!((f64::from(*g) - w).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn minmax_preserves_order(s in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let v = SimilarityVector::new("q", ScoreKind::Text, s.clone()).unwrap();
        let n = minmax_normalize(&v);
        for i in 0..s.len() {
            prop_assert!((0.0..=1.0).contains(&n.scores[i]));
            for j in 0..s.len() {
                if s[i] < s[j] {
                    prop_assert!(n.scores[i] < n.scores[j]);
                }
            }
        }
    }

    #[test]
    fn balance_is_monotone_in_proxy(
        t in prop::collection::vec(0.0f64..1.0, 2..30),
        bump in 0.0f64..0.5,
        lambda in 0.0f64..0.999,
    ) {
        let p: Vec<f64> = t.iter().map(|x| 1.0 - x).collect();
        let p2: Vec<f64> = p.iter().enumerate().map(|(i, x)| if i % 2 == 0 { x + bump } else { *x }).collect();
        let params = BalanceParams::new(lambda, Normalization::None).unwrap();
        let sv = |v: &[f64]| SimilarityVector::new("q", ScoreKind::Text, v.to_vec()).unwrap();
        let a = balance(&sv(&t), &sv(&p), &params).unwrap();
        let b = balance(&sv(&t), &sv(&p2), &params).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn product_bound_after_minmax(
        (t, p) in (2usize..40).prop_flat_map(|n| (prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))),
    ) {
        let sv = |v: &[f64]| SimilarityVector::new("q", ScoreKind::Text, v.to_vec()).unwrap();
        let b = balanced_similarity(&sv(&t), &sv(&p), Normalization::MinmaxPerQuery).unwrap();
        let (tn, pn) = (minmax_normalize(&sv(&t)), minmax_normalize(&sv(&p)));
        for i in 0..t.len() {
            prop_assert!(b.scores[i] <= tn.scores[i].min(pn.scores[i]));
        }
    }

    #[test]
    fn metrics_are_monotone_in_k_and_bounded((s, gt, subset) in ranked_instance()) {
        let v = SimilarityVector::new("q", ScoreKind::Final, s.clone()).unwrap();
        let ranked = top_k(&v, s.len()).unwrap();
        let mut last = (0.0, 0.0);
        for k in 1..=s.len() {
            let r = recall_at_k(&ranked, &gt, k).unwrap();
            let m = map_at_k(&ranked, &gt, k).unwrap();
            prop_assert!(r >= last.0);
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0 + 1e-12).contains(&m));
            last.0 = r;
            if k <= subset.len() {
                let sr = subset_recall_at_k(&v, &subset, &gt, k).unwrap();
                prop_assert!(sr >= last.1 && sr <= 1.0);
                last.1 = sr;
            }
        }
    }

    #[test]
    fn relabeling_keeps_metrics(
        (s, gt, subset) in ranked_instance(),
        k in 1usize..6,
    ) {
        // reverse the gallery; the tie-break must follow the relabeling, so
        // scores are made distinct first
        let n = s.len();
        let distinct: Vec<f64> = s.iter().enumerate().map(|(i, x)| x + i as f64 * 1e-9).collect();
        let relabel = |i: usize| n - 1 - i;
        let moved: Vec<f64> = (0..n).map(|i| distinct[relabel(i)]).collect();
        let gt2: Vec<usize> = gt.iter().map(|&g| relabel(g)).collect();
        let sub2: Vec<usize> = subset.iter().map(|&g| relabel(g)).collect();
        let v1 = SimilarityVector::new("q", ScoreKind::Final, distinct).unwrap();
        let v2 = SimilarityVector::new("q", ScoreKind::Final, moved).unwrap();
        let (r1, r2) = (top_k(&v1, n).unwrap(), top_k(&v2, n).unwrap());
        prop_assert_eq!(recall_at_k(&r1, &gt, k).unwrap(), recall_at_k(&r2, &gt2, k).unwrap());
        prop_assert_eq!(map_at_k(&r1, &gt, k).unwrap(), map_at_k(&r2, &gt2, k).unwrap());
        let k = k.min(subset.len());
        prop_assert_eq!(
            recall_at_k(&rank_subset(&v1, &subset), &gt, k).unwrap(),
            recall_at_k(&rank_subset(&v2, &sub2), &gt2, k).unwrap()
        );
    }

    #[test]
    fn layout_serialization_round_trips(l in layout()) {
        prop_assert_eq!(parse_layout(&serialize_layout(&l)).unwrap(), l);
    }

    #[test]
    fn validation_flags_exactly_the_mutated_layouts(l in layout(), mutation in 0usize..9, pick in any::<prop::sample::Index>()) {
        prop_assert!(validate_layout(&l).is_empty());
        let mut m = l.clone();
        let i = pick.index(m.instances.len());
        let b = &mut m.instances[i].bbox;
        match mutation {
            0 => m.scene = " ".into(),
            1 => m.instances.clear(),
            2 => m.instances[i].description = "\t".into(),
            3 => b.x1 = f64::INFINITY,
            4 => b.x2 = 1.3,
            5 => b.y1 = -0.5,
            6 => b.x1 = b.x2,
            7 => b.y2 = b.y1 - 0.001,
            _ => {}
        }
        prop_assert_eq!(validate_layout(&m).is_empty(), mutation == 8);
    }

    #[test]
    fn duplication_counts(l in layout()) {
        let images = l.instances.iter().filter(|i| i.modality == Modality::Image).count();
        let once = duplicate_image_instances(&l);
        let twice = duplicate_image_instances(&once);
        prop_assert_eq!(once.instances.len(), l.instances.len() + images);
        prop_assert_eq!(twice.instances.len(), l.instances.len() + 2 * images);
        prop_assert_eq!(&once.instances[..l.instances.len()], &l.instances[..]);
    }
}

#[test]
fn one_image_instance_duplicates_to_three_then_four() {
    let inst = |m| LayoutInstance {
        description: "cat".into(),
        bbox: BBox::new(0.1, 0.1, 0.4, 0.4),
        modality: m,
    };
    let l = ProxyLayout {
        scene: "a sofa".into(),
        instances: vec![inst(Modality::Image), inst(Modality::Text)],
    };
    let once = duplicate_image_instances(&l);
    assert_eq!(once.instances.len(), 3);
    assert_eq!(duplicate_image_instances(&once).instances.len(), 4);
}

fn unit_rows(dim: usize, n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(nonzero_vector(dim), n).prop_map(|rows| {
        rows.iter()
            .flat_map(|r| {
                l2_normalize(&Embedding::new(r.clone()).unwrap())
                    .embedding
                    .values()
                    .to_vec()
            })
            .collect()
    })
}

fn kernel_instance() -> impl Strategy<Value = (usize, Vec<f32>, Vec<f32>)> {
    (1usize..70, 1usize..9, 1usize..120)
        .prop_flat_map(|(dim, nq, ng)| (Just(dim), unit_rows(dim, nq), unit_rows(dim, ng)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_matches_naive_cosine((dim, q, g) in kernel_instance()) {
        let got = Kernel::default().score_matrix(&q, &g, dim);
        let ng = g.len() / dim;
        for (i, qr) in q.chunks_exact(dim).enumerate() {
            for (j, gr) in g.chunks_exact(dim).enumerate() {
                let naive: f64 = qr.iter().zip(gr).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                prop_assert!((f64::from(got[i * ng + j]) - naive).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn kernel_results_ignore_tiling(
        (dim, q, g) in kernel_instance(),
        qb in 1usize..9, gb in 1usize..40, k in 1usize..20,
    ) {
        let reference = Kernel::default();
        let tiled = Kernel::with_blocks(BlockSizes { query_block: qb, gallery_block: gb });
        let portable = Kernel::portable(BlockSizes { query_block: qb, gallery_block: gb });
        let bits = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect::<Vec<_>>();
        let full = bits(reference.score_matrix(&q, &g, dim));
        prop_assert_eq!(&full, &bits(tiled.score_matrix(&q, &g, dim)));
        prop_assert_eq!(&full, &bits(portable.score_matrix(&q, &g, dim)));
        let top = |kern: &Kernel| {
            kern.top_k(&q, &g, dim, k)
                .into_iter()
                .map(|row| row.into_iter().map(|(i, s)| (i, s.to_bits())).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let want = top(&reference);
        prop_assert_eq!(&want, &top(&tiled));
        prop_assert_eq!(&want, &top(&portable));
        // top-k agrees with sorting the dense row
        let ng = g.len() / dim;
        for (i, row) in want.iter().enumerate() {
            let mut order: Vec<usize> = (0..ng).collect();
            let r = &full[i * ng..(i + 1) * ng];
            order.sort_by(|&a, &b| f32::from_bits(r[b]).total_cmp(&f32::from_bits(r[a])).then(a.cmp(&b)));
            let idx: Vec<usize> = row.iter().map(|e| e.0).collect();
            prop_assert_eq!(idx, order[..k.min(ng)].to_vec());
        }
    }
}
