use actseg::align::{alignment_score, fifa_align, viterbi_align, AlignmentProblem, FifaConfig};
use actseg::losses::{
    durations_from_assignment, frame_ce, group_ce, round_durations, AttentionMatrix, GroupIndex,
    GroupVariant,
};
use actseg::metrics::{
    edit_score, f1_at_with, f1_counts, frame_accuracy, intervals, levenshtein, MatchingRule,
};
use actseg::pseudolabel::{constrained_kmedoids_traced, Distance, TimestampAnnotation};
use actseg::segcore::{
    merge_repeats, split_limit, split_segments, to_frames, to_segments, FeatureSequence,
    FrameLabeling, Segmentation, Transcript,
};
use actseg::tensor::{log_softmax_rows, softmax_rows, Mat};
use proptest::prelude::*;

fn labels(max_len: usize, classes: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, 1..max_len)
}

fn segmentation(max_segs: usize, classes: usize) -> impl Strategy<Value = Segmentation> {
    prop::collection::vec((0..classes, 1usize..30), 1..max_segs)
        .prop_map(|pairs| Segmentation::from_pairs(&pairs).unwrap())
}

fn matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = Mat> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-4.0f64..4.0, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
    })
}

proptest! {
    #[test]
    fn frames_segments_round_trip(l in labels(300, 5)) {
        let f = FrameLabeling::new(l).unwrap();
        let s = to_segments(&f);
        prop_assert_eq!(to_frames(&s), f.clone());
        prop_assert_eq!(s.total_frames(), f.len());
        for w in s.segments().windows(2) {
            prop_assert_ne!(w[0].action, w[1].action);
        }
    }

    #[test]
    fn segments_frames_round_trip_up_to_merge(s in segmentation(12, 4)) {
        prop_assert_eq!(to_segments(&to_frames(&s)), merge_repeats(&s));
    }

    #[test]
    fn split_then_merge_is_identity(s in segmentation(10, 4), frac in 0.05f64..1.0) {
        let merged = merge_repeats(&s);
        let split = split_segments(&merged, frac).unwrap();
        let limit = split_limit(s.total_frames(), frac);
        prop_assert!(split.segments().iter().all(|x| x.duration <= limit));
        prop_assert_eq!(split.total_frames(), s.total_frames());
        prop_assert_eq!(merge_repeats(&split), merged);
        prop_assert_eq!(to_frames(&split), to_frames(&s));
    }

    #[test]
    fn split_pieces_are_near_equal(d in 1usize..400, frac in 0.05f64..1.0) {
        let s = Segmentation::from_pairs(&[(0, d)]).unwrap();
        let split = split_segments(&s, frac).unwrap();
        let ds = split.durations();
        let (lo, hi) = (ds.iter().min().unwrap(), ds.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(ds.len(), d.div_ceil(split_limit(d, frac)));
    }

    #[test]
    fn levenshtein_is_a_metric(a in labels(9, 3), b in labels(9, 3), c in labels(9, 3)) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
    }

    #[test]
    fn edit_score_bounds(a in labels(9, 3), b in labels(9, 3)) {
        let (ta, tb) = (Transcript::new(a).unwrap(), Transcript::new(b).unwrap());
        let e = edit_score(&ta, &tb);
        prop_assert!((0.0..=100.0).contains(&e));
        prop_assert_eq!(edit_score(&ta, &ta), 100.0);
    }

    #[test]
    fn optimal_matching_dominates_greedy(
        a in segmentation(8, 3),
        b in segmentation(8, 3),
        thr in 0.05f64..0.95,
    ) {
        let t = a.total_frames().min(b.total_frames());
        let crop = |s: &Segmentation| {
            to_segments(&FrameLabeling::new(to_frames(s).labels()[..t].to_vec()).unwrap())
        };
        let (a, b) = (crop(&a), crop(&b));
        let (pa, pb) = (intervals(&a, None), intervals(&b, None));
        let opt = f1_counts(&pa, &pb, thr, MatchingRule::Optimal);
        let greedy = f1_counts(&pa, &pb, thr, MatchingRule::Greedy);
        prop_assert!(opt.tp >= greedy.tp);
        prop_assert_eq!(opt.tp + opt.fp, pa.len());
        prop_assert_eq!(opt.tp + opt.fn_, pb.len());
        let f = f1_at_with(&a, &b, thr, MatchingRule::Optimal, None).unwrap();
        prop_assert!((0.0..=100.0).contains(&f));
        prop_assert_eq!(f1_at_with(&a, &a, thr, MatchingRule::Optimal, None).unwrap(), 100.0);
        let acc = frame_accuracy(&to_frames(&a), &to_frames(&b)).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
    }

    #[test]
    fn assignment_durations_sum_to_frames(m in matrix(1..40, 1..7)) {
        let p = softmax_rows(&m);
        let d = durations_from_assignment(&AttentionMatrix::new(p).unwrap());
        prop_assert!((d.iter().sum::<f64>() - m.rows() as f64).abs() < 1e-9);
        let r = round_durations(&d, m.rows()).unwrap();
        prop_assert_eq!(r.iter().sum::<usize>(), m.rows());
        for (x, y) in d.iter().zip(&r) {
            prop_assert!((x - *y as f64).abs() < 1.0);
        }
    }

    #[test]
    fn cross_entropies_are_non_negative(m in matrix(1..20, 2..6), seed in any::<u64>()) {
        let t = m.rows();
        let l: Vec<usize> = (0..t).map(|i| ((seed >> (i % 60)) as usize + i) % m.cols()).collect();
        let f = FrameLabeling::new(l.clone()).unwrap();
        prop_assert!(frame_ce(&m, &f).unwrap() >= 0.0);
        let groups = GroupIndex::from_labels(&l);
        for v in [GroupVariant::AvgLogit, GroupVariant::AvgProbability] {
            prop_assert!(group_ce(&m, &groups, v).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kmedoids_objective_never_increases(
        t in 8usize..80,
        n in 1usize..5,
        seed in any::<u64>(),
        dist_id in 0usize..3,
    ) {
        prop_assume!(n <= t);
        let mut x = seed | 1;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 10_000) as f64 / 10_000.0
        };
        let feats = FeatureSequence::new(Mat::from_fn(t, 3, |_, _| next())).unwrap();
        let stamps: Vec<(usize, usize)> = (0..n).map(|i| (i * t / n + (t / n) / 2, i % 3)).collect();
        let ts = TimestampAnnotation::new(stamps.clone(), t).unwrap();
        let dist = [Distance::Euclidean, Distance::Cosine, Distance::L1][dist_id];
        let (seg, _, trace) = constrained_kmedoids_traced(&feats, &ts, dist, 50).unwrap();
        prop_assert!(trace.is_monotone());
        prop_assert_eq!(seg.total_frames(), t);
        let owner = seg.frame_to_segment();
        for (i, &(f, _)) in stamps.iter().enumerate() {
            prop_assert_eq!(owner[f], i);
        }
    }

    #[test]
    fn viterbi_beats_fifa_and_keeps_transcript(
        m in matrix(6..40, 3..5),
        tr in prop::collection::vec(0usize..3, 1..5),
    ) {
        prop_assume!(tr.len() <= m.rows());
        let lp = log_softmax_rows(&m);
        let tr = Transcript::new(tr).unwrap();
        let p = AlignmentProblem::new(lp.clone(), tr.clone(), 1).unwrap();
        let v = viterbi_align(&p).unwrap();
        let cfg = FifaConfig { epochs: 200, ..FifaConfig::default() };
        let f = fifa_align(&p, &cfg).unwrap();
        prop_assert_eq!(v.transcript(), tr.clone());
        prop_assert_eq!(f.transcript(), tr);
        prop_assert_eq!(f.total_frames(), m.rows());
        prop_assert!(alignment_score(&lp, &v) >= alignment_score(&lp, &f) - 1e-9);
    }
}
